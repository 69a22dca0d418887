"""Decoder configuration and parameter containers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError
from .rng import SplitMix64


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    head_dim: int
    model_dim: int
    mlp_hidden: int
    vocab_size: int
    max_seq_len: int

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ShapeError(f"{name} must be a positive integer, got {value!r}")
        if self.model_dim != self.num_heads * self.head_dim:
            raise ShapeError(
                f"model_dim={self.model_dim} != num_heads*head_dim="
                f"{self.num_heads * self.head_dim}"
            )

    def to_dict(self) -> dict:
        return {k: int(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = cls.__dataclass_fields__
        missing = [k for k in fields if k not in d]
        if missing:
            raise ShapeError(f"config is missing fields: {missing}")
        return cls(**{k: d[k] for k in fields})

    @classmethod
    def desk(cls) -> "ModelConfig":
        """The committed desk-scale fixture configuration."""
        return cls(num_layers=4, num_heads=4, head_dim=8, model_dim=32,
                   mlp_hidden=64, vocab_size=64, max_seq_len=1024)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray
    mlp_in: np.ndarray
    mlp_out: np.ndarray


# Order fixes both the container layout and the random stream consumption.
LAYER_TENSORS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "mlp_in", "mlp_out")


@dataclass
class ModelWeights:
    token_embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    unembedding: np.ndarray
    config: ModelConfig = field(repr=False, default=None)

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("token_embedding", self.token_embedding)]
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{n}", getattr(layer, n)) for n in LAYER_TENSORS)
        out.append(("final_norm", self.final_norm))
        out.append(("unembedding", self.unembedding))
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> "ModelWeights":
        expected = expected_shapes(config)
        missing = [n for n in expected if n not in tensors]
        if missing:
            raise ShapeError(f"missing tensors: {missing[:4]}")
        extra = [n for n in tensors if n not in expected]
        if extra:
            raise ShapeError(f"unexpected tensors: {extra[:4]}")
        t = {n: np.asarray(a, dtype=np.float64) for n, a in tensors.items()}
        layers = [
            LayerWeights(**{n: t[f"layers.{i}.{n}"] for n in LAYER_TENSORS})
            for i in range(config.num_layers)
        ]
        w = cls(t["token_embedding"], layers, t["final_norm"], t["unembedding"], config)
        w.validate()
        return w

    def validate(self) -> None:
        expected = expected_shapes(self.config)
        for name, arr in self.named_tensors():
            if arr.shape != expected[name]:
                raise ShapeError(f"{name}: shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F = config.model_dim, config.mlp_hidden
    shapes = {"token_embedding": (config.vocab_size, D)}
    per_layer = {
        "attn_norm": (D,), "wq": (D, D), "wk": (D, D), "wv": (D, D), "wo": (D, D),
        "mlp_norm": (D,), "mlp_in": (D, F), "mlp_out": (F, D),
    }
    for i in range(config.num_layers):
        for n in LAYER_TENSORS:
            shapes[f"layers.{i}.{n}"] = per_layer[n]
    shapes["final_norm"] = (D,)
    shapes["unembedding"] = (D, config.vocab_size)
    return shapes


def random_weights(seed: int, config: ModelConfig, scale: float) -> ModelWeights:
    """Draw every tensor uniform in ``[-scale, scale]`` from one SplitMix64 stream.

    Values are rounded through float32 so in-memory weights equal the ones
    read back from a container.
    """
    if scale < 0:
        raise ValueError("scale must be >= 0")
    rng = SplitMix64(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        n = int(np.prod(shape))
        vals = rng.uniform(n, -1.0, 1.0) * scale
        tensors[name] = vals.astype(np.float32).reshape(shape)
    return ModelWeights.from_named(config, tensors)
