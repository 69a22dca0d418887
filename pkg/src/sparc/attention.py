"""Scaled dot-product attention for a single query position.

All functions accept optional leading batch axes (typically heads), so the
decoder can call them once per layer with ``(H, d)`` queries.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyContextError, ShapeError


def attention_logits(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """``(q . k_j) / sqrt(d)`` for every cached position ``j``."""
    query = np.asarray(query, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[-2] == 0:
        raise EmptyContextError("attention over an empty context")
    if keys.shape[-1] != query.shape[-1]:
        raise ShapeError(f"query dim {query.shape[-1]} != key dim {keys.shape[-1]}")
    d = query.shape[-1]
    return np.einsum("...nd,...d->...n", keys, query) / np.sqrt(d)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def combine(weights: np.ndarray, values: np.ndarray,
            weight_multiplier: np.ndarray | None = None) -> np.ndarray:
    """Weighted sum of value vectors.

    ``weight_multiplier`` scales each weight after the softmax and the result
    is deliberately not renormalized.
    """
    if weight_multiplier is not None:
        weights = weights * weight_multiplier
    return np.einsum("...n,...nd->...d", weights, values)


def attention_step(query, keys, values, logit_adjust=None, weight_multiplier=None):
    """Attend from one query over ``N`` cached positions.

    Args:
        query: vector of length ``d`` (or ``(..., d)``).
        keys, values: ``(N, d)`` (or ``(..., N, d)``).
        logit_adjust: optional additive terms per position, applied before
            the softmax.
        weight_multiplier: optional positive factors per position, applied
            after the softmax without renormalization.

    Returns:
        ``(weights, output)`` where ``weights`` is the softmax row (sums to 1
        regardless of ``weight_multiplier``).
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.ndim < 2 or keys.shape[-2] == 0:
        raise EmptyContextError("attention over an empty context")
    n = keys.shape[-2]
    if values.shape[-2] != n:
        raise ShapeError(f"{n} keys but {values.shape[-2]} values")
    for name, extra in (("logit_adjust", logit_adjust), ("weight_multiplier", weight_multiplier)):
        if extra is not None and np.shape(extra)[-1] != n:
            raise ShapeError(f"{name} has length {np.shape(extra)[-1]}, expected {n}")

    logits = attention_logits(query, keys)
    if logit_adjust is not None:
        logits = logits + np.asarray(logit_adjust, dtype=np.float64)
    weights = softmax(logits)
    mult = None if weight_multiplier is None else np.asarray(weight_multiplier, dtype=np.float64)
    return weights, combine(weights, values, mult)
