"""Greedy single-sequence decoder with an explicit KV cache.

Architecture: sinusoidal absolute positions added to the inputs, pre-norm
blocks (RMS norm), multi-head causal attention, GELU MLP, final RMS norm and
an untied unembedding. Everything runs in float64.

Generation step ``i`` (1-based) attends over ``n_image + n_inst + i - 1``
positions. The prefill caches every prompt position without intervention;
step 1 then re-issues the final prompt position as its query (rewriting
that position's cache entries) so that the first generated token is
produced under the active intervention, and each later step appends the
previously generated token.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .attention import attention_logits, combine, softmax
from .cache import KVCache, SequenceLayout
from .errors import CapacityError, ShapeError
from .intervention import (
    SparcConfig,
    SparcState,
    naive_adjust,
    reference_multipliers,
    scale_cached_values,
    sparc_observe,
)
from .model import ModelWeights
from .trace import AttentionTrace, StepTrace


class InterventionMode(str, enum.Enum):
    BASELINE = "baseline"
    NAIVE = "naive"
    SPARC = "sparc"
    SPARC_REFERENCE = "sparc_reference"

    @property
    def uses_sparc(self) -> bool:
        return self in (InterventionMode.SPARC, InterventionMode.SPARC_REFERENCE)


@dataclass
class DecodeRequest:
    image_embeddings: np.ndarray
    inst_tokens: list[int]
    max_new_tokens: int = 512
    eos_token_id: int | None = None
    mode: InterventionMode = InterventionMode.BASELINE
    sparc: SparcConfig | None = None
    naive_alpha: float = 0.5
    # Half-open layer range for the naive boost; None means every layer.
    naive_layers: tuple[int, int] | None = None
    trace_layers: tuple[int, ...] | None = None
    keep_heads: bool = False

    def __post_init__(self):
        self.mode = InterventionMode(self.mode)
        self.image_embeddings = np.asarray(self.image_embeddings, dtype=np.float64)
        if self.image_embeddings.ndim == 1 and self.image_embeddings.size == 0:
            self.image_embeddings = self.image_embeddings.reshape(0, 0)
        self.inst_tokens = [int(t) for t in self.inst_tokens]
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")
        if self.mode.uses_sparc and self.sparc is None:
            self.sparc = SparcConfig()
        if self.mode is InterventionMode.NAIVE and self.naive_alpha < 0:
            raise ValueError("naive alpha must be >= 0")

    @property
    def layout(self) -> SequenceLayout:
        return SequenceLayout(self.image_embeddings.shape[0], len(self.inst_tokens))


@dataclass
class GenerationResult:
    tokens: list[int]
    trace: AttentionTrace
    cache: KVCache
    state: SparcState | None = None
    logits: list[np.ndarray] = field(default_factory=list)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def argmax_lowest(logits: np.ndarray) -> int:
    """Greedy choice; ``np.argmax`` already returns the first maximum."""
    return int(np.argmax(logits))


class Decoder:
    """Runs prefill and greedy decode steps against fixed weights.

    The decoder holds only immutable weights; caches, SPARC state and traces
    are created per generation.
    """

    def __init__(self, weights: ModelWeights):
        self.weights = weights
        self.config = weights.config
        self.positions = sinusoidal_positions(self.config.max_seq_len, self.config.model_dim)

    # -- inputs ----------------------------------------------------------
    def prompt_inputs(self, req: DecodeRequest) -> np.ndarray:
        D = self.config.model_dim
        img = req.image_embeddings
        if img.size and img.shape[1] != D:
            raise ShapeError(f"image embeddings have width {img.shape[1]}, model_dim is {D}")
        for t in req.inst_tokens:
            if not 0 <= t < self.config.vocab_size:
                raise ValueError(f"token id {t} outside vocabulary")
        tok = self.weights.token_embedding[req.inst_tokens].reshape(-1, D)
        return np.concatenate([img.reshape(-1, D), tok], axis=0)

    def token_input(self, token_id: int) -> np.ndarray:
        return self.weights.token_embedding[token_id]

    # -- prefill ---------------------------------------------------------
    def prefill(self, req: DecodeRequest) -> tuple[KVCache, np.ndarray]:
        """Cache keys/values for every prompt position (no intervention).

        Returns the cache and the residual streams, shape ``(L + 1, P, D)``:
        entry ``l`` is the input to layer ``l`` and entry ``L`` the output of
        the last layer.
        """
        cfg = self.config
        x = self.prompt_inputs(req)
        P = x.shape[0]
        if P == 0:
            raise ValueError("prompt is empty: need image embeddings or instruction tokens")
        if P > cfg.max_seq_len:
            raise CapacityError(f"prompt length {P} exceeds max_seq_len={cfg.max_seq_len}")
        H, d = cfg.num_heads, cfg.head_dim
        cache = KVCache(cfg, n_image=req.layout.n_image)
        x = x + self.positions[:P]
        causal = np.triu(np.ones((P, P), dtype=bool), k=1)
        hidden = [x]
        for l, lw in enumerate(self.weights.layers):
            h = rms_norm(x, lw.attn_norm)
            q = (h @ lw.wq).reshape(P, H, d).transpose(1, 0, 2)
            k = (h @ lw.wk).reshape(P, H, d).transpose(1, 0, 2)
            v = (h @ lw.wv).reshape(P, H, d).transpose(1, 0, 2)
            cache.keys[l, :, :P] = k
            cache.values[l, :, :P] = v
            scores = q @ k.transpose(0, 2, 1) / np.sqrt(d)
            scores[:, causal] = -np.inf
            o = softmax(scores) @ v
            x = x + o.transpose(1, 0, 2).reshape(P, cfg.model_dim) @ lw.wo
            h = rms_norm(x, lw.mlp_norm)
            x = x + gelu(h @ lw.mlp_in) @ lw.mlp_out
            hidden.append(x)
        cache.length = P
        return cache, np.stack(hidden)

    # -- single position -------------------------------------------------
    def forward_position(self, cache: KVCache, x: np.ndarray, pos: int, req: DecodeRequest,
                         state: SparcState | None = None, record=(), keep_heads=False):
        """Run one position through every layer, writing its cache entries.

        Returns ``(logits, rows, selected, head_rows, raw_logits)``.
        """
        cfg = self.config
        if pos >= cfg.max_seq_len:
            raise CapacityError(f"position {pos} exceeds max_seq_len={cfg.max_seq_len}")
        H, d, D = cfg.num_heads, cfg.head_dim, cfg.model_dim
        n = pos + 1
        n_image = cache.n_image
        mode = req.mode
        sparc_cfg = req.sparc
        naive_range = req.naive_layers or (0, cfg.num_layers)
        selected = None
        rows, head_rows, raw = {}, {}, {}

        x = x + self.positions[pos]
        mult = None
        if mode is InterventionMode.SPARC_REFERENCE:
            mult = reference_multipliers(state, n)
        for l, lw in enumerate(self.weights.layers):
            h = rms_norm(x, lw.attn_norm)
            q = (h @ lw.wq).reshape(H, d)
            cache.write(l, pos, (h @ lw.wk).reshape(H, d), (h @ lw.wv).reshape(H, d))
            K, V = cache.layer_view(l, n)
            A = attention_logits(q, K)
            if keep_heads:
                raw[l] = A
            if mode is InterventionMode.NAIVE and naive_range[0] <= l < naive_range[1]:
                A = naive_adjust(A, req.naive_alpha, n_image)
            w = softmax(A)
            o = combine(w, V, mult).reshape(D)
            x = x + o @ lw.wo
            h = rms_norm(x, lw.mlp_norm)
            x = x + gelu(h @ lw.mlp_in) @ lw.mlp_out

            avg = None
            if l in record:
                avg = rows[l] = w.mean(axis=0)
                if keep_heads:
                    head_rows[l] = w
            if state is not None and l == sparc_cfg.select_layer:
                selected = sparc_observe(state, w.mean(axis=0) if avg is None else avg)
                if sparc_cfg.same_step:
                    if mode is InterventionMode.SPARC:
                        scale_cached_values(cache, selected, sparc_cfg.alpha)
                    else:
                        mult = reference_multipliers(state, n)
        cache.commit(pos)
        logits = rms_norm(x, self.weights.final_norm) @ self.weights.unembedding
        return logits, rows, selected, head_rows or None, raw or None

    def decode_step(self, cache: KVCache, x: np.ndarray, step: int, req: DecodeRequest,
                    state: SparcState | None = None, trace_layers=()):
        """Produce generated token ``step`` from input embedding ``x``.

        Order within a step: forward pass under the current cache (naive
        logits boost or reference multipliers injected), record attention,
        SPARC selection at the selection layer, then value scaling of the
        selected positions which therefore takes effect from the next step.
        """
        layout = SequenceLayout(cache.n_image, req.layout.n_inst)
        pos = layout.context_length(step) - 1
        if pos > cache.length:
            raise ValueError(f"step {step} needs {pos} cached positions, have {cache.length}")
        record = set(trace_layers)
        logits, rows, selected, head_rows, raw = self.forward_position(
            cache, x, pos, req, state, record, req.keep_heads)
        if selected is None:
            selected = np.empty(0, dtype=np.int64)
        elif req.mode is InterventionMode.SPARC and not req.sparc.same_step:
            scale_cached_values(cache, selected, req.sparc.alpha)
        token = argmax_lowest(logits)
        return token, StepTrace(step=step, token_id=token, rows=rows, selected=selected,
                                logits=logits, head_rows=head_rows, raw_logits=raw)

    def generate(self, req: DecodeRequest, on_step=None) -> GenerationResult:
        """Greedy decode until ``max_new_tokens`` or the EOS id.

        ``on_step(step_trace, cache, state)`` is called after every step,
        once value scaling for that step has been applied.
        """
        cfg = self.config
        layout = req.layout
        if req.mode.uses_sparc:
            req.sparc.check_depth(cfg.num_layers)
        trace_layers = req.trace_layers
        if trace_layers is None:
            trace_layers = (req.sparc.select_layer,) if req.sparc else (default_select_layer(cfg.num_layers),)
        trace_layers = tuple(int(l) for l in trace_layers)
        for l in trace_layers:
            if not 0 <= l < cfg.num_layers:
                raise ValueError(f"trace layer {l} outside [0, {cfg.num_layers})")

        cache, _ = self.prefill(req)
        state = SparcState(req.sparc, layout.n_image) if req.mode.uses_sparc else None
        trace = AttentionTrace(layout.n_image, layout.n_inst, trace_layers)
        result = GenerationResult([], trace, cache, state)
        if req.max_new_tokens == 0:
            return result

        x = self.prompt_inputs(req)[-1]
        for step in range(1, req.max_new_tokens + 1):
            token, st = self.decode_step(cache, x, step, req, state, trace_layers)
            result.tokens.append(token)
            result.logits.append(st.logits)
            trace.append(st)
            if on_step is not None:
                on_step(st, cache, state)
            if req.eos_token_id is not None and token == req.eos_token_id:
                break
            x = self.token_input(token)
        return result


def default_select_layer(num_layers: int) -> int:
    """Selection layer at the same relative depth as layer 20 of 32."""
    return min(num_layers - 1, round(num_layers * 20 / 32))
