"""Command-line entry point: ``sparc {gen-model,decode,analyze,sweep,bench}``.

Exit codes: 0 success, 2 usage error, 3 malformed input file, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import build_report, load_masks, load_pair_scores, sink_partition
from .errors import FormatError, SparcError
from .harness import (
    BENCH_FIELDS,
    RunRequest,
    UsageError,
    gen_model,
    request_from_manifest,
    run_bench,
    run_decode,
    run_sweep,
    table_csv,
)
from .model import ModelConfig
from .trace import AttentionTrace

log = logging.getLogger("sparc")

EXIT_USAGE, EXIT_FORMAT, EXIT_RUNTIME = 2, 3, 4
MODES = ("baseline", "naive", "sparc", "sparc_reference")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _decode_args() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--weights", help="STDF-v1 weights file")
    p.add_argument("--seed", type=int, default=7, help="seed for synthetic image embeddings")
    p.add_argument("--n-image", type=int, default=16)
    p.add_argument("--image-file", help=".npy matrix (n_image x model_dim) instead of synthetic")
    p.add_argument("--image-scale", type=float, default=3.0)
    p.add_argument("--inst-tokens", type=_int_list, default=[1, 2, 3, 4])
    p.add_argument("--max-new-tokens", type=int, default=512)
    p.add_argument("--eos", type=int, default=None, dest="eos_token_id")
    p.add_argument("--mode", choices=MODES, default="baseline")
    p.add_argument("--alpha", type=float, default=None,
                   help="naive boost (default 0.5) or SPARC value scale (default 1.1)")
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=1.5)
    p.add_argument("--select-layer", type=int, default=None)
    p.add_argument("--naive-layers", type=_int_list, default=None, help="half-open range, e.g. 0,4")
    p.add_argument("--same-step", action="store_true",
                   help="let step i's selections affect layers above the selection layer at step i")
    p.add_argument("--trace-layers", type=_int_list, default=None)
    return p


def _run_request(args) -> RunRequest:
    if getattr(args, "from_manifest", None):
        return request_from_manifest(args.from_manifest)
    if not args.weights:
        raise UsageError("--weights is required")
    if args.naive_layers is not None and len(args.naive_layers) != 2:
        raise UsageError("--naive-layers takes exactly two integers")
    return RunRequest(
        weights=args.weights, seed=args.seed, n_image=args.n_image, image_file=args.image_file,
        image_scale=args.image_scale, inst_tokens=args.inst_tokens,
        max_new_tokens=args.max_new_tokens, eos_token_id=args.eos_token_id, mode=args.mode,
        alpha=args.alpha, beta=args.beta, tau=args.tau, select_layer=args.select_layer,
        naive_layers=args.naive_layers, same_step=args.same_step, trace_layers=args.trace_layers,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _decode_args()

    g = sub.add_parser("gen-model", help="write a seeded STDF-v1 weights file")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--layers", type=int, default=4)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--head-dim", type=int, default=8)
    g.add_argument("--mlp-hidden", type=int, default=64)
    g.add_argument("--vocab-size", type=int, default=64)
    g.add_argument("--max-seq-len", type=int, default=1024)
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--out", required=True)

    d = sub.add_parser("decode", parents=[common], help="greedy decode with an intervention")
    d.add_argument("--from-manifest", help="re-run the request recorded in a manifest")
    d.add_argument("--trace-out")
    d.add_argument("--tokens-out")
    d.add_argument("--manifest-out")
    d.add_argument("--hidden-out", help=".npy of image-position hidden states at the selection layer")

    a = sub.add_parser("analyze", help="compute diagnostics from a trace")
    a.add_argument("--trace", required=True)
    a.add_argument("--layer", type=int, default=None)
    a.add_argument("--diversity-steps", type=int, default=32)
    a.add_argument("--masks")
    a.add_argument("--pair-scores")
    a.add_argument("--hidden", help=".npy hidden states for sink detection")
    a.add_argument("--sink-k", type=float, default=10.0)
    a.add_argument("--sinks", type=_int_list, default=None)
    a.add_argument("--high-threshold", type=int, default=1)
    a.add_argument("--report-out", help="JSON report path (stdout if omitted)")
    a.add_argument("--csv-out")

    s = sub.add_parser("sweep", parents=[common], help="SPARC hyperparameter grid")
    s.add_argument("--grid", required=True, help='JSON or file, e.g. {"alpha": [1.05, 1.1]}')
    s.add_argument("--diversity-steps", type=int, default=32)
    s.add_argument("--report-out", help="CSV path (stdout if omitted)")

    b = sub.add_parser("bench", parents=[common], help="ms/token per mode")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--modes", default="baseline,naive,sparc")
    b.add_argument("--report-out", help="JSON path (stdout if omitted)")
    return parser


def _emit(text: str, path) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_model(args) -> None:
    try:
        config = ModelConfig(num_layers=args.layers, num_heads=args.heads, head_dim=args.head_dim,
                             model_dim=args.heads * args.head_dim, mlp_hidden=args.mlp_hidden,
                             vocab_size=args.vocab_size, max_seq_len=args.max_seq_len)
    except SparcError as exc:
        raise UsageError(str(exc)) from exc
    gen_model(args.seed, config, args.scale, args.out)
    log.info("wrote %s", args.out)


def cmd_decode(args) -> None:
    run = _run_request(args)
    result, manifest = run_decode(run, args.trace_out, args.tokens_out, args.manifest_out,
                                  args.hidden_out)
    if not args.tokens_out:
        print(json.dumps(result.tokens))
    log.info("generated %d tokens, params %s", len(result.tokens), manifest["params_sha256"][:12])


def cmd_analyze(args) -> None:
    trace = AttentionTrace.read_jsonl(args.trace)
    masks = load_masks(args.masks) if args.masks else None
    if masks:
        for name, m in masks.items():
            if m.size != trace.n_image:
                raise FormatError(f"mask {name!r} has {m.size} entries, trace has {trace.n_image} image tokens")
    pairs = load_pair_scores(args.pair_scores) if args.pair_scores else None
    sinks = args.sinks
    if sinks is None and args.hidden:
        sinks = sink_partition(np.load(args.hidden), args.sink_k).tolist()
        if not sinks:
            log.warning("no sink tokens found at k=%g; sink ratio skipped", args.sink_k)
            sinks = None
    report = build_report(trace, args.layer, args.diversity_steps, masks, sinks, pairs,
                          args.high_threshold)
    _emit(report.to_json() + "\n", args.report_out)
    if args.csv_out:
        Path(args.csv_out).write_text(report.to_csv())


def cmd_sweep(args) -> None:
    rows = run_sweep(args.grid, _run_request(args), args.diversity_steps)
    _emit(table_csv(rows), args.report_out)


def cmd_bench(args) -> None:
    modes = tuple(m for m in args.modes.split(",") if m)
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"unknown modes {bad}")
    rows = run_bench(_run_request(args), args.reps, modes)
    for r in rows:
        log.info("%-16s %8.3f ± %.3f ms/token  %+6.1f%%", r["mode"], r["ms_per_token_mean"],
                 r["ms_per_token_std"], r["delta_pct"])
    _emit(json.dumps([{k: r[k] for k in BENCH_FIELDS} for r in rows], indent=2) + "\n",
          args.report_out)


COMMANDS = {
    "gen-model": cmd_gen_model,
    "decode": cmd_decode,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sparc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, json.JSONDecodeError) as exc:
        print(f"sparc: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (SparcError, ValueError, KeyError, OSError) as exc:
        print(f"sparc: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
