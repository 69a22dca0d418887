"""Experiment orchestration: fixtures, decode runs, sweeps, benchmarks."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import image_share_curve, mean_pairwise, pairwise_diversity, selection_counts
from .decoder import (
    Decoder,
    DecodeRequest,
    GenerationResult,
    InterventionMode,
    default_select_layer,
)
from .intervention import SparcConfig
from .model import ModelConfig, random_weights
from .rng import SplitMix64
from .stdf import VERSION as STDF_VERSION
from .stdf import dumps_weights, read_weights_file

TRACE_FORMAT_VERSION = 1
MANIFEST_VERSION = 1
DEFAULT_ALPHA = {"naive": 0.5, "sparc": 1.1, "sparc_reference": 1.1}


class UsageError(ValueError):
    """Bad command-line or request parameters."""


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def gen_model(seed: int, config: ModelConfig, scale: float, out=None) -> bytes:
    """Write (and return) an STDF-v1 container of seeded uniform weights."""
    if scale < 0:
        raise UsageError("scale must be >= 0")
    data = dumps_weights(random_weights(seed, config, scale))
    if out is not None:
        Path(out).write_bytes(data)
    return data


def synthetic_image_embeddings(seed: int, n_image: int, dim: int, scale: float = 3.0) -> np.ndarray:
    """Seeded stand-ins for vision-encoder outputs, uniform in ``[-scale, scale]``."""
    return SplitMix64(seed).uniform(n_image * dim, -scale, scale).reshape(n_image, dim)


@dataclass
class RunRequest:
    """Everything needed to reproduce one decode run from files."""

    weights: str
    seed: int = 7
    n_image: int = 16
    image_file: str | None = None
    image_scale: float = 3.0
    inst_tokens: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    max_new_tokens: int = 512
    eos_token_id: int | None = None
    mode: str = "baseline"
    alpha: float | None = None
    beta: float = 0.1
    tau: float = 1.5
    select_layer: int | None = None
    naive_layers: list[int] | None = None
    same_step: bool = False
    trace_layers: list[int] | None = None

    def __post_init__(self):
        try:
            InterventionMode(self.mode)
        except ValueError:
            raise UsageError(f"unknown mode {self.mode!r}") from None
        if self.max_new_tokens < 0:
            raise UsageError("max_new_tokens must be >= 0")
        if self.alpha is None and self.mode in DEFAULT_ALPHA:
            self.alpha = DEFAULT_ALPHA[self.mode]

    def params(self) -> dict:
        return asdict(self)

    def params_hash(self) -> str:
        return sha256_bytes(json.dumps(self.params(), sort_keys=True).encode())

    def sparc_config(self, num_layers: int) -> SparcConfig:
        layer = self.select_layer
        if layer is None:
            layer = default_select_layer(num_layers)
        alpha = DEFAULT_ALPHA["sparc"] if self.alpha is None else self.alpha
        return SparcConfig(alpha=alpha, beta=self.beta, tau=self.tau,
                           select_layer=layer, same_step=self.same_step)

    def build(self, config: ModelConfig) -> DecodeRequest:
        if self.image_file:
            images = np.load(self.image_file)
        else:
            images = synthetic_image_embeddings(self.seed, self.n_image, config.model_dim,
                                                self.image_scale)
        mode = InterventionMode(self.mode)
        sparc = self.sparc_config(config.num_layers) if mode.uses_sparc else None
        trace_layers = self.trace_layers
        if trace_layers is None:
            trace_layers = [default_select_layer(config.num_layers)
                            if self.select_layer is None else self.select_layer]
        return DecodeRequest(
            image_embeddings=images,
            inst_tokens=self.inst_tokens,
            max_new_tokens=self.max_new_tokens,
            eos_token_id=self.eos_token_id,
            mode=mode,
            sparc=sparc,
            naive_alpha=self.alpha if mode is InterventionMode.NAIVE else 0.0,
            naive_layers=tuple(self.naive_layers) if self.naive_layers else None,
            trace_layers=tuple(trace_layers),
        )


_decoders: dict[str, tuple[str, Decoder]] = {}


def load_decoder(path) -> Decoder:
    path = str(path)
    digest = sha256_file(path)
    hit = _decoders.get(path)
    if hit and hit[0] == digest:
        return hit[1]
    _, weights = read_weights_file(path)
    dec = Decoder(weights)
    _decoders[path] = (digest, dec)
    return dec


def execute(run: RunRequest, decoder: Decoder | None = None) -> GenerationResult:
    decoder = decoder or load_decoder(run.weights)
    return decoder.generate(run.build(decoder.config))


def run_decode(run: RunRequest, trace_out=None, tokens_out=None, manifest_out=None,
               hidden_out=None) -> tuple[GenerationResult, dict]:
    """Decode once and write the requested artifacts plus a manifest."""
    decoder = load_decoder(run.weights)
    req = run.build(decoder.config)
    result = decoder.generate(req)
    outputs = {}
    if trace_out:
        result.trace.write_jsonl(trace_out)
        outputs[str(trace_out)] = sha256_file(trace_out)
    if tokens_out:
        Path(tokens_out).write_text(json.dumps(result.tokens) + "\n")
        outputs[str(tokens_out)] = sha256_file(tokens_out)
    if hidden_out:
        _, hidden = decoder.prefill(req)
        layer = req.sparc.select_layer if req.sparc else default_select_layer(decoder.config.num_layers)
        with open(hidden_out, "wb") as fh:
            np.save(fh, hidden[layer, : req.layout.n_image])
        outputs[str(hidden_out)] = sha256_file(hidden_out)
    manifest = {
        "tool": "sparc",
        "tool_version": __version__,
        "manifest_version": MANIFEST_VERSION,
        "formats": {"stdf": STDF_VERSION, "trace_jsonl": TRACE_FORMAT_VERSION},
        "request": run.params(),
        "params_sha256": run.params_hash(),
        "weights_sha256": sha256_file(run.weights),
        "num_tokens": len(result.tokens),
        "outputs": outputs,
    }
    if manifest_out:
        Path(manifest_out).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return result, manifest


def request_from_manifest(path) -> RunRequest:
    doc = json.loads(Path(path).read_text())
    if doc.get("manifest_version") != MANIFEST_VERSION:
        raise UsageError(f"unsupported manifest version {doc.get('manifest_version')}")
    return RunRequest(**doc["request"])


# -- sweep ---------------------------------------------------------------

GRID_KEYS = ("alpha", "beta", "tau", "select_layer")


def parse_grid(source) -> dict[str, list]:
    """Accept a dict, a JSON string or a path to a JSON file."""
    if isinstance(source, (str, Path)):
        text = str(source)
        p = Path(text)
        try:
            is_file = p.is_file()
        except OSError:
            is_file = False
        try:
            grid = json.loads(p.read_text() if is_file else text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"grid is not valid JSON: {exc}") from exc
        if not isinstance(grid, dict):
            raise UsageError("grid must be a JSON object")
    else:
        grid = dict(source)
    if "l_sel" in grid:
        grid["select_layer"] = grid.pop("l_sel")
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise UsageError(f"unknown grid keys: {sorted(unknown)}")
    if not grid:
        raise UsageError("grid is empty")
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise UsageError(f"grid entry {k!r} must be a nonempty list")
    return grid


def run_sweep(grid, base: RunRequest, diversity_steps: int = 32) -> list[dict]:
    """Run every cell of the Cartesian product of ``grid`` over ``base``.

    Keys vary in ``alpha, beta, tau, select_layer`` order (last fastest),
    values in the order given.
    """
    grid = parse_grid(grid)
    if base.mode not in ("sparc", "sparc_reference"):
        base = replace(base, mode="sparc", alpha=None)
    decoder = load_decoder(base.weights)
    keys = [k for k in GRID_KEYS if k in grid]
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cell = replace(base, **dict(zip(keys, values)))
        try:
            cell.sparc_config(decoder.config.num_layers).check_depth(decoder.config.num_layers)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        result = execute(cell, decoder)
        sparc = cell.sparc_config(decoder.config.num_layers)
        trace = result.trace
        row = {k: getattr(sparc, k) for k in GRID_KEYS}
        row["tokens"] = len(result.tokens)
        if len(trace):
            row["mean_image_share"] = float(np.mean(image_share_curve(trace, sparc.select_layer).image))
            T = min(diversity_steps, len(trace))
            row["mean_pairwise_diversity"] = (
                mean_pairwise(pairwise_diversity(trace, T, sparc.select_layer)) if trace.n_image else 0.0
            )
        else:
            row["mean_image_share"] = row["mean_pairwise_diversity"] = float("nan")
        counts = selection_counts(trace)
        row["selection_total"] = int(counts.sum())
        row["tokens_ever_selected"] = int(np.count_nonzero(counts))
        rows.append(row)
    return rows


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


# -- bench ---------------------------------------------------------------

BENCH_FIELDS = ("mode", "ms_per_token_mean", "ms_per_token_std", "delta_pct")


def run_bench(base: RunRequest, repetitions: int = 5,
              modes=("baseline", "naive", "sparc"), clock=time.perf_counter_ns) -> list[dict]:
    """Mean and std of ms per generated token for each mode.

    One warmup generation per mode is discarded; repetitions are interleaved
    across modes so drift in machine load hits every mode alike.
    """
    if repetitions < 3:
        raise UsageError("bench needs at least 3 repetitions")
    if "baseline" not in modes:
        modes = ("baseline", *modes)
    decoder = load_decoder(base.weights)
    runs = {}
    for m in modes:
        r = replace(base, mode=m, alpha=None)
        runs[m] = (r, r.build(decoder.config))
    samples: dict[str, list[float]] = {m: [] for m in modes}
    for m in modes:
        decoder.generate(runs[m][1])
    for _ in range(repetitions):
        for m in modes:
            req = runs[m][1]
            t0 = clock()
            out = decoder.generate(req)
            elapsed_ms = (clock() - t0) / 1e6
            samples[m].append(elapsed_ms / max(len(out.tokens), 1))
    base_mean = statistics.fmean(samples["baseline"])
    table = []
    for m in modes:
        mean = statistics.fmean(samples[m])
        table.append({
            "mode": m,
            "ms_per_token_mean": mean,
            "ms_per_token_std": statistics.stdev(samples[m]),
            "delta_pct": 100.0 * (mean - base_mean) / base_mean,
        })
    return table


__all__ = [
    "RunRequest", "UsageError", "gen_model", "synthetic_image_embeddings", "run_decode",
    "request_from_manifest", "run_sweep", "run_bench", "parse_grid", "table_csv",
    "default_select_layer", "load_decoder", "execute", "BENCH_FIELDS",
]
