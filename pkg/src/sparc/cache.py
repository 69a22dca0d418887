"""Sequence layout and the per-layer, per-head key/value cache."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError
from .model import ModelConfig


@dataclass(frozen=True)
class SequenceLayout:
    """Positions ``[0, n_image)`` hold image embeddings, then ``n_inst``
    instruction tokens, then generated tokens."""

    n_image: int
    n_inst: int
    n_generated: int = 0

    @property
    def n_prompt(self) -> int:
        return self.n_image + self.n_inst

    def context_length(self, step: int) -> int:
        """Positions attended when generating token ``step`` (1-based)."""
        return self.n_image + self.n_inst + step - 1

    def image_slice(self) -> slice:
        return slice(0, self.n_image)


class KVCache:
    """Preallocated key/value storage, shape ``(L, H, max_seq_len, d)``.

    ``cumulative_value_scale[j]`` is the product of every factor applied to
    position ``j``'s cached values.
    """

    def __init__(self, config: ModelConfig, n_image: int = 0):
        shape = (config.num_layers, config.num_heads, config.max_seq_len, config.head_dim)
        self.config = config
        self.n_image = n_image
        self.keys = np.zeros(shape)
        self.values = np.zeros(shape)
        self.cumulative_value_scale = np.ones(config.max_seq_len)
        self.length = 0

    def __len__(self):
        return self.length

    @property
    def capacity(self) -> int:
        return self.config.max_seq_len

    def write(self, layer: int, pos: int, k: np.ndarray, v: np.ndarray) -> None:
        """Store ``(H, d)`` key/value rows for one position at one layer."""
        if pos >= self.capacity:
            raise CapacityError(f"position {pos} exceeds max_seq_len={self.capacity}")
        if pos > self.length:
            raise IndexError(f"cannot write position {pos} past length {self.length}")
        self.keys[layer, :, pos] = k
        self.values[layer, :, pos] = v * self.cumulative_value_scale[pos]

    def commit(self, pos: int) -> None:
        """Mark position ``pos`` as consumed once every layer has written it."""
        self.length = max(self.length, pos + 1)

    def layer_view(self, layer: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        return self.keys[layer, :, :n], self.values[layer, :, :n]

    def copy(self) -> "KVCache":
        other = KVCache.__new__(KVCache)
        other.config = self.config
        other.n_image = self.n_image
        other.keys = self.keys.copy()
        other.values = self.values.copy()
        other.cumulative_value_scale = self.cumulative_value_scale.copy()
        other.length = self.length
        return other
