"""Per-step attention records and their JSONL serialization.

One JSONL record is written per (generated step, traced layer)::

    {"step": 1, "token_id": 7, "layer": 2, "attn": [...],
     "selected": [3, 9], "n_image": 16, "n_inst": 4}

``attn`` is the head-averaged softmax row over every attended position,
recorded before any post-softmax multipliers. Steps are 1-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError


@dataclass
class StepTrace:
    step: int
    token_id: int
    rows: dict[int, np.ndarray]
    selected: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    logits: np.ndarray | None = None
    # Only filled when the decoder is asked to keep per-head detail.
    head_rows: dict[int, np.ndarray] | None = None
    raw_logits: dict[int, np.ndarray] | None = None


@dataclass
class AttentionTrace:
    n_image: int
    n_inst: int
    layers: tuple[int, ...]
    steps: list[StepTrace] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def append(self, step: StepTrace) -> None:
        self.steps.append(step)

    def default_layer(self) -> int:
        if not self.layers:
            raise ValueError("trace records no layers")
        return self.layers[0]

    def rows(self, layer: int | None = None) -> list[np.ndarray]:
        layer = self.default_layer() if layer is None else layer
        if layer not in self.layers:
            raise KeyError(f"layer {layer} not traced (traced: {list(self.layers)})")
        return [s.rows[layer] for s in self.steps]

    def selections(self) -> list[np.ndarray]:
        return [s.selected for s in self.steps]

    def tokens(self) -> list[int]:
        return [s.token_id for s in self.steps]

    def to_records(self) -> list[dict]:
        out = []
        for s in self.steps:
            for layer in self.layers:
                out.append({
                    "step": s.step,
                    "token_id": int(s.token_id),
                    "layer": int(layer),
                    "attn": [float(x) for x in s.rows[layer]],
                    "selected": [int(j) for j in s.selected],
                    "n_image": self.n_image,
                    "n_inst": self.n_inst,
                })
        return out

    def dumps_jsonl(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.to_records())

    def write_jsonl(self, path) -> None:
        Path(path).write_text(self.dumps_jsonl())

    @classmethod
    def from_records(cls, records) -> "AttentionTrace":
        records = list(records)
        if not records:
            return cls(n_image=0, n_inst=0, layers=())
        required = {"step", "token_id", "layer", "attn", "selected", "n_image", "n_inst"}
        n_image, n_inst = records[0].get("n_image"), records[0].get("n_inst")
        layers: list[int] = []
        steps: dict[int, StepTrace] = {}
        for r in records:
            missing = required - r.keys()
            if missing:
                raise FormatError(f"trace record missing {sorted(missing)}")
            if (r["n_image"], r["n_inst"]) != (n_image, n_inst):
                raise FormatError("trace mixes sequence layouts")
            if r["layer"] not in layers:
                layers.append(r["layer"])
            st = steps.get(r["step"])
            if st is None:
                st = steps[r["step"]] = StepTrace(
                    step=r["step"], token_id=r["token_id"], rows={},
                    selected=np.asarray(r["selected"], dtype=np.int64),
                )
            st.rows[r["layer"]] = np.asarray(r["attn"], dtype=np.float64)
        ordered = [steps[k] for k in sorted(steps)]
        for st in ordered:
            if set(st.rows) != set(layers):
                raise FormatError(f"step {st.step} lacks some traced layers")
        return cls(n_image=n_image, n_inst=n_inst, layers=tuple(layers), steps=ordered)

    @classmethod
    def read_jsonl(cls, path) -> "AttentionTrace":
        records = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
        return cls.from_records(records)
