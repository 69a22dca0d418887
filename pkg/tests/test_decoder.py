import numpy as np
import pytest

import sparc.decoder as decoder_mod
from sparc.decoder import (
    Decoder,
    DecodeRequest,
    InterventionMode,
    argmax_lowest,
    default_select_layer,
)
from sparc.errors import CapacityError, ShapeError
from sparc.intervention import SparcConfig
from sparc.model import ModelConfig, random_weights

from conftest import INST, max_rel, seeded_fixture
from oracles import recompute_generation


def _req(images, **kw):
    kw.setdefault("max_new_tokens", 16)
    return DecodeRequest(image_embeddings=images, inst_tokens=INST, **kw)


def test_prefill_fills_every_layer_and_head(desk_decoder, desk_images):
    cache, hidden = desk_decoder.prefill(_req(desk_images))
    assert cache.length == 20
    assert hidden.shape == (5, 20, 32)
    assert np.all(np.abs(cache.keys[:, :, :20]).sum(-1) > 0)
    assert not cache.keys[:, :, 20:].any()


def test_prefill_is_bit_identical(desk_decoder, desk_images):
    a, _ = desk_decoder.prefill(_req(desk_images))
    b, _ = desk_decoder.prefill(_req(desk_images))
    assert np.array_equal(a.values, b.values) and np.array_equal(a.keys, b.keys)


def test_no_image_positions(desk_decoder):
    res = desk_decoder.generate(_req(np.zeros((0, 32)), mode="sparc"))
    assert len(res.tokens) == 16
    assert all(s.size == 0 for s in res.trace.selections())


def test_prefill_capacity():
    cfg = ModelConfig(num_layers=1, num_heads=1, head_dim=4, model_dim=4, mlp_hidden=4,
                      vocab_size=8, max_seq_len=6)
    dec = Decoder(random_weights(0, cfg, 1.0))
    with pytest.raises(CapacityError):
        dec.prefill(DecodeRequest(np.zeros((3, 4)), [1, 2, 3, 4]))


def test_decode_capacity():
    cfg = ModelConfig(num_layers=1, num_heads=1, head_dim=4, model_dim=4, mlp_hidden=4,
                      vocab_size=8, max_seq_len=8)
    dec = Decoder(random_weights(0, cfg, 1.0))
    req = DecodeRequest(np.zeros((2, 4)), [1, 2], max_new_tokens=5)
    assert len(dec.generate(req).tokens) == 5    # last step writes position 7
    with pytest.raises(CapacityError):
        dec.generate(DecodeRequest(np.zeros((2, 4)), [1, 2], max_new_tokens=6))


def test_image_width_checked(desk_decoder):
    with pytest.raises(ShapeError):
        desk_decoder.prefill(_req(np.zeros((2, 31))))


def test_tie_breaks_to_lowest_id():
    assert argmax_lowest(np.array([1.0, 3.0, 3.0])) == 1


def test_zero_tokens(desk_decoder, desk_images):
    res = desk_decoder.generate(_req(desk_images, max_new_tokens=0))
    assert res.tokens == [] and len(res.trace) == 0


def test_baseline_never_selects(desk_decoder, desk_images):
    res = desk_decoder.generate(_req(desk_images))
    assert res.state is None
    assert all(s.size == 0 for s in res.trace.selections())


def test_generation_is_deterministic(desk_decoder, desk_images):
    a = desk_decoder.generate(_req(desk_images, mode="sparc", max_new_tokens=24))
    b = desk_decoder.generate(_req(desk_images, mode="sparc", max_new_tokens=24))
    assert a.tokens == b.tokens
    assert a.trace.dumps_jsonl() == b.trace.dumps_jsonl()


def test_eos_stops_generation(desk_decoder, desk_images):
    full = desk_decoder.generate(_req(desk_images, max_new_tokens=20))
    eos = full.tokens[11]
    res = desk_decoder.generate(_req(desk_images, max_new_tokens=20, eos_token_id=eos))
    stop = full.tokens.index(eos)
    assert res.tokens == full.tokens[:stop + 1]


def test_trace_layout(desk_decoder, desk_images):
    res = desk_decoder.generate(_req(desk_images, trace_layers=(0, 3)))
    for i, s in enumerate(res.trace.steps, start=1):
        assert s.step == i
        for l in (0, 3):
            assert len(s.rows[l]) == 16 + 4 + i - 1


def test_default_select_layer():
    assert default_select_layer(4) == 2
    assert default_select_layer(32) == 20
    assert default_select_layer(1) == 0


def test_select_layer_must_fit(desk_decoder, desk_images):
    with pytest.raises(ValueError):
        desk_decoder.generate(_req(desk_images, mode="sparc", sparc=SparcConfig(select_layer=4)))


@pytest.mark.parametrize("mode", ["baseline", "naive", "sparc", "sparc_reference"])
def test_cached_decode_matches_recompute(mode):
    dec, images = seeded_fixture(5)
    req = DecodeRequest(images, INST, max_new_tokens=24, mode=mode, naive_alpha=0.5,
                        naive_layers=(1, 3))
    res = dec.generate(req)
    sel = res.trace.selections() if InterventionMode(mode).uses_sparc else None
    logits, _ = recompute_generation(dec.weights, images, INST, res.tokens, sel, alpha=1.1,
                                     naive_alpha=0.5 if mode == "naive" else 0.0,
                                     naive_layers=(1, 3))
    assert max_rel(np.stack(res.logits), logits) < 1e-9


def test_same_step_scaling_matches_recompute():
    dec, images = seeded_fixture(3)
    cfg = SparcConfig(same_step=True)
    res = dec.generate(DecodeRequest(images, INST, max_new_tokens=32, mode="sparc", sparc=cfg))
    ref = dec.generate(DecodeRequest(images, INST, max_new_tokens=32, mode="sparc_reference",
                                     sparc=cfg))
    assert res.tokens == ref.tokens
    logits, _ = recompute_generation(dec.weights, images, INST, res.tokens,
                                     res.trace.selections(), alpha=1.1,
                                     same_step_layer=cfg.select_layer)
    assert max_rel(np.stack(res.logits), logits) < 1e-9


def test_sparc_overhead_is_bounded_per_step(monkeypatch, desk_decoder, desk_images):
    """Operation count: one observation and at most one scaling pass per step."""
    calls = {"observe": 0, "scale": 0, "scaled_rows": 0}
    real_observe, real_scale = decoder_mod.sparc_observe, decoder_mod.scale_cached_values

    def observe(state, row):
        calls["observe"] += 1
        assert len(row) >= state.n_image
        return real_observe(state, row)

    def scale(cache, selected, alpha):
        calls["scale"] += 1
        cfg = cache.config
        calls["scaled_rows"] += len(selected) * cfg.num_layers * cfg.num_heads
        return real_scale(cache, selected, alpha)

    monkeypatch.setattr(decoder_mod, "sparc_observe", observe)
    monkeypatch.setattr(decoder_mod, "scale_cached_values", scale)
    steps = 64
    res = desk_decoder.generate(_req(desk_images, mode="sparc", max_new_tokens=steps))
    cfg = desk_decoder.config
    assert calls["observe"] == steps
    assert calls["scale"] == steps
    assert calls["scaled_rows"] <= steps * cfg.num_layers * cfg.num_heads * 16
    assert calls["scaled_rows"] == sum(len(s) for s in res.trace.selections()) * 16
