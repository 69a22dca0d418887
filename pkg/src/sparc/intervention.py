"""Decoding-time attention interventions.

SPARC keeps an exponential moving average of the head-averaged attention
each image position receives at one selection layer. A position whose
current attention jumps well above its average (relative score above
``tau``) is selected, and every selection multiplies that position's cached
value vectors by ``alpha`` at all layers and heads. The naive baseline
instead boosts every image logit by ``alpha * |logit|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cache import KVCache, SequenceLayout
from .errors import ShapeError, StateError


@dataclass(frozen=True)
class SparcConfig:
    alpha: float = 1.1
    beta: float = 0.1
    tau: float = 1.5
    select_layer: int = 2
    epsilon: float = 1e-12
    # Apply step i's selections to layers above select_layer within step i.
    same_step: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.select_layer < 0:
            raise ValueError(f"select_layer must be >= 0, got {self.select_layer}")
        if not np.isfinite(self.tau) and self.tau != np.inf:
            raise ValueError(f"tau must be a real number, got {self.tau}")

    def check_depth(self, num_layers: int) -> None:
        if not 0 <= self.select_layer < num_layers:
            raise ValueError(f"select_layer={self.select_layer} outside [0, {num_layers})")


@dataclass
class SparcState:
    """Per-generation SPARC bookkeeping over the image positions."""

    config: SparcConfig
    n_image: int
    ema: np.ndarray = field(default=None)
    counts: np.ndarray = field(default=None)
    step: int = 0
    initialized: bool = False

    def __post_init__(self):
        if self.ema is None:
            self.ema = np.zeros(self.n_image)
        if self.counts is None:
            self.counts = np.zeros(self.n_image, dtype=np.int64)


def observe_attention(row: np.ndarray, n_image: int) -> np.ndarray:
    """Raw (not renormalized) attention mass on each image position."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape[-1] < n_image:
        raise ShapeError(f"row of length {row.shape[-1]} shorter than n_image={n_image}")
    return row[..., :n_image].copy()


def relative_scores(state: SparcState, a: np.ndarray) -> np.ndarray:
    if not state.initialized:
        raise StateError("relative scores need an initialized EMA")
    a = np.asarray(a, dtype=np.float64)
    if a.shape != state.ema.shape:
        raise ShapeError(f"attention vector {a.shape} vs ema {state.ema.shape}")
    return (a - state.ema) / np.maximum(state.ema, state.config.epsilon)


def select_tokens(r: np.ndarray, tau: float) -> np.ndarray:
    """Indices with score strictly above ``tau``."""
    return np.flatnonzero(np.asarray(r) > tau)


def update_ema(state: SparcState, a: np.ndarray) -> SparcState:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (state.n_image,):
        raise ShapeError(f"attention vector {a.shape}, expected ({state.n_image},)")
    if not state.initialized:
        ema = a.copy()
        state.initialized = True
    else:
        beta = state.config.beta
        ema = beta * state.ema + (1.0 - beta) * a
    state.ema = np.maximum(ema, state.config.epsilon)
    return state


def bump_counts(state: SparcState, selected) -> SparcState:
    idx = np.asarray(selected, dtype=np.int64)
    if idx.size:
        if idx.min() < 0 or idx.max() >= state.n_image:
            raise ShapeError(f"selection {idx.tolist()} outside [0, {state.n_image})")
        state.counts[idx] += 1
    state.step += 1
    return state


def sparc_observe(state: SparcState, row: np.ndarray) -> np.ndarray:
    """One generation step of bookkeeping from the selection-layer row.

    Scores compare the current attention against the EMA of previous steps,
    so the EMA is only folded forward after selection. The first observation
    initializes the EMA and selects nothing.
    """
    a = observe_attention(row, state.n_image)
    if state.initialized:
        selected = select_tokens(relative_scores(state, a), state.config.tau)
    else:
        selected = np.empty(0, dtype=np.int64)
    update_ema(state, a)
    bump_counts(state, selected)
    return selected


def scale_cached_values(cache: KVCache, selected, alpha: float) -> KVCache:
    """Multiply cached values of the selected positions by ``alpha`` at every layer and head."""
    idx = np.asarray(selected, dtype=np.int64)
    if idx.size == 0:
        return cache
    positions = idx.tolist()
    if min(positions) < 0 or max(positions) >= cache.length:
        raise StateError(f"positions {positions} not yet cached (length {cache.length})")
    # Basic slicing per position beats one fancy-indexed update for the few
    # positions a step selects.
    for j in positions:
        cache.values[:, :, j] *= alpha
        cache.cumulative_value_scale[j] *= alpha
    return cache


def naive_adjust(logits: np.ndarray, alpha: float, layout: SequenceLayout | int) -> np.ndarray:
    """``A + alpha * |A|`` on image positions; other positions untouched."""
    n_image = layout if isinstance(layout, (int, np.integer)) else layout.n_image
    out = np.array(logits, dtype=np.float64, copy=True)
    img = out[..., :n_image]
    out[..., :n_image] = img + alpha * np.abs(img)
    return out


def reference_multipliers(state: SparcState, length: int, alpha: float | None = None) -> np.ndarray:
    """Per-position post-softmax factors ``alpha ** count`` (1 outside the image)."""
    if alpha is None:
        alpha = state.config.alpha
    mult = np.ones(length)
    n = min(state.n_image, length)
    mult[:n] = np.power(float(alpha), state.counts[:n].astype(np.float64))
    return mult
