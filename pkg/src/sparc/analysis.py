"""Diagnostics over attention traces.

All functions are pure: they read traces (or plain rows) and return arrays
or scalars. ``layer=None`` means the first traced layer.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateDistributionError, RangeError, ShapeError
from .trace import AttentionTrace


def normalize_image_distribution(row, n_image: int) -> np.ndarray:
    img = np.asarray(row, dtype=np.float64)[:n_image]
    total = img.sum()
    if not total > 0:
        raise DegenerateDistributionError("image slice has zero attention mass")
    return img / total


def wasserstein_1d(p, q, positions=None) -> float:
    """Earth mover's distance between two distributions on a common 1-D support.

    Uses ``sum_k |CDF_p(k) - CDF_q(k)| * (x[k+1] - x[k])``; ``positions``
    defaults to unit-spaced indices and must be nondecreasing.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"distributions must be 1-D and equal length: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if abs(v.sum() - 1.0) > 1e-6 or np.any(v < 0):
            raise ValueError(f"{name} is not a probability vector (sum={v.sum()!r})")
    gaps = _gaps(positions, p.size)
    diff = np.cumsum(p)[:-1] - np.cumsum(q)[:-1]
    return float(np.abs(diff) @ gaps)


def _gaps(positions, n: int) -> np.ndarray:
    if positions is None:
        return np.ones(max(n - 1, 0))
    x = np.asarray(positions, dtype=np.float64)
    if x.shape != (n,):
        raise ShapeError(f"{x.shape[0]} positions for {n} support points")
    gaps = np.diff(x)
    if np.any(gaps < 0):
        raise ValueError("positions must be nondecreasing")
    return gaps


def pairwise_diversity(trace: AttentionTrace, first_T: int, layer: int | None = None) -> np.ndarray:
    """T x T matrix of Wasserstein distances between image-normalized rows."""
    rows = trace.rows(layer)
    if first_T < 1 or len(rows) < first_T:
        raise RangeError(f"need {first_T} steps, trace has {len(rows)}")
    dists = np.stack([normalize_image_distribution(r, trace.n_image) for r in rows[:first_T]])
    return distance_matrix(dists)


def distance_matrix(dists: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(dists, axis=1)[:, :-1]
    return np.abs(cdf[:, None, :] - cdf[None, :, :]).sum(axis=-1)


def mean_pairwise(matrix: np.ndarray) -> float:
    T = matrix.shape[0]
    if T < 2:
        return 0.0
    return float(matrix[np.triu_indices(T, k=1)].mean())


@dataclass
class ShareCurves:
    image: np.ndarray
    text: np.ndarray
    image_per_token: np.ndarray
    text_per_token: np.ndarray


def image_share_curve(trace: AttentionTrace, layer: int | None = None) -> ShareCurves:
    """Attention mass on image vs text positions at each step.

    The per-token variants divide each share by the number of positions of
    that kind (text counts instruction plus generated tokens); they are NaN
    where the count is zero.
    """
    n_image = trace.n_image
    rows = trace.rows(layer)
    image = np.array([r[:n_image].sum() for r in rows])
    text = 1.0 - image
    lengths = np.array([len(r) for r in rows], dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        img_pt = image / n_image if n_image else np.full(len(rows), np.nan)
        txt_counts = lengths - n_image
        txt_pt = np.where(txt_counts > 0, text / np.where(txt_counts > 0, txt_counts, 1), np.nan)
    return ShareCurves(image, text, img_pt, txt_pt)


def sink_partition(hidden: np.ndarray, k: float = 10.0) -> np.ndarray:
    """Indices of image tokens whose largest |activation| exceeds ``k`` x the median."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[0] < 2:
        raise RangeError("sink detection needs at least 2 image tokens")
    if not k > 1:
        raise ValueError("k must be > 1")
    peak = np.abs(hidden).max(axis=1)
    return np.flatnonzero(peak > k * np.median(peak))


def sink_ratio(trace: AttentionTrace, sinks, layer: int | None = None) -> np.ndarray:
    """Per step: mean attention on sink image tokens over mean on the rest."""
    n_image = trace.n_image
    is_sink = np.zeros(n_image, dtype=bool)
    is_sink[np.asarray(sinks, dtype=np.int64)] = True
    if not is_sink.any() or is_sink.all():
        raise RangeError("sinks must be a nonempty proper subset of image positions")
    out = []
    for r in trace.rows(layer):
        img = np.asarray(r[:n_image])
        out.append(img[is_sink].mean() / img[~is_sink].mean())
    return np.array(out)


def region_share(trace: AttentionTrace, mask, layer: int | None = None) -> np.ndarray:
    """Per step: fraction of image attention that falls inside ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (trace.n_image,):
        raise ShapeError(f"mask length {mask.size} != n_image {trace.n_image}")
    return np.array([
        normalize_image_distribution(r, trace.n_image)[mask].sum() for r in trace.rows(layer)
    ])


def caption_similarity(pair_scores) -> float:
    """Mean sentence-pair similarity of one caption.

    ``pair_scores`` is upper-triangular: row ``i`` lists the scores of
    sentence ``i`` against sentences ``i+1 .. n-1``. A trailing empty row
    is accepted.
    """
    rows = [list(r) for r in pair_scores]
    if rows and not rows[-1]:
        rows = rows[:-1]
    n = len(rows) + 1
    if n < 2:
        raise RangeError("caption similarity needs at least 2 sentences")
    for i, r in enumerate(rows):
        if len(r) != n - 1 - i:
            raise ShapeError(f"row {i} has {len(r)} scores, expected {n - 1 - i}")
    scores = np.array([s for r in rows for s in r], dtype=np.float64)
    if np.any((scores < 0) | (scores > 100)) or not np.all(np.isfinite(scores)):
        raise ValueError("pair scores must lie in [0, 100]")
    return float(scores.mean())


def selection_histogram(counts, high_threshold: int = 1) -> tuple[int, int]:
    """``(num_high, num_low)`` split of image tokens at ``count >= high_threshold``."""
    if high_threshold < 1:
        raise ValueError("threshold must be >= 1")
    counts = np.asarray(counts)
    high = int(np.count_nonzero(counts >= high_threshold))
    return high, int(counts.size - high)


def selection_counts(trace: AttentionTrace) -> np.ndarray:
    counts = np.zeros(trace.n_image, dtype=np.int64)
    for s in trace.selections():
        counts[s] += 1
    return counts


# -- report ---------------------------------------------------------------

@dataclass
class MetricsReport:
    n_image: int
    n_inst: int
    layer: int
    steps: int
    image_share: list[float] = field(default_factory=list)
    text_share: list[float] = field(default_factory=list)
    image_share_per_token: list[float] = field(default_factory=list)
    text_share_per_token: list[float] = field(default_factory=list)
    mean_pairwise_diversity: float | None = None
    diversity_steps: int = 0
    sinks: list[int] | None = None
    sink_ratio: list[float] | None = None
    region_share: dict[str, list[float]] = field(default_factory=dict)
    caption_similarity: float | None = None
    selection_total: int = 0
    selection_histogram: tuple[int, int] | None = None
    bench: list[dict] | None = None

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One row per step with every per-step curve, for plotting."""
        cols = {
            "image_share": self.image_share,
            "text_share": self.text_share,
            "image_share_per_token": self.image_share_per_token,
            "text_share_per_token": self.text_share_per_token,
        }
        if self.sink_ratio is not None:
            cols["sink_ratio"] = self.sink_ratio
        for name, curve in sorted(self.region_share.items()):
            cols[f"region_{name}"] = curve
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "context_length", *cols])
        for i in range(self.steps):
            w.writerow([i + 1, self.n_image + self.n_inst + i, *(c[i] for c in cols.values())])
        return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def build_report(trace: AttentionTrace, layer: int | None = None, diversity_steps: int = 32,
                 masks: dict[str, np.ndarray] | None = None, sinks=None,
                 pair_scores=None, high_threshold: int = 1) -> MetricsReport:
    layer = trace.default_layer() if layer is None else layer
    shares = image_share_curve(trace, layer)
    report = MetricsReport(
        n_image=trace.n_image, n_inst=trace.n_inst, layer=layer, steps=len(trace),
        image_share=shares.image.tolist(), text_share=shares.text.tolist(),
        image_share_per_token=shares.image_per_token.tolist(),
        text_share_per_token=shares.text_per_token.tolist(),
    )
    T = min(diversity_steps, len(trace))
    if T >= 1 and trace.n_image:
        report.mean_pairwise_diversity = mean_pairwise(pairwise_diversity(trace, T, layer))
        report.diversity_steps = T
    if sinks is not None:
        report.sinks = [int(s) for s in sinks]
        report.sink_ratio = sink_ratio(trace, sinks, layer).tolist()
    for name, mask in (masks or {}).items():
        report.region_share[name] = region_share(trace, mask, layer).tolist()
    if pair_scores is not None:
        report.caption_similarity = caption_similarity(pair_scores)
    counts = selection_counts(trace)
    report.selection_total = int(counts.sum())
    report.selection_histogram = selection_histogram(counts, high_threshold)
    return report


def load_masks(path) -> dict[str, np.ndarray]:
    """Read ``{"n_image": N, "masks": {name: [0/1, ...]}}``."""
    with open(path) as fh:
        doc = json.load(fh)
    n_image = doc["n_image"]
    out = {}
    for name, m in doc["masks"].items():
        arr = np.asarray(m)
        if arr.shape != (n_image,) or not np.isin(arr, (0, 1)).all():
            raise ShapeError(f"mask {name!r} must be {n_image} values of 0/1")
        out[name] = arr.astype(bool)
    return out


def load_pair_scores(path) -> list[list[float]]:
    with open(path) as fh:
        return json.load(fh)


__all__ = [
    "normalize_image_distribution", "wasserstein_1d", "pairwise_diversity", "distance_matrix",
    "mean_pairwise", "image_share_curve", "ShareCurves", "sink_partition", "sink_ratio",
    "region_share", "caption_similarity", "selection_histogram", "selection_counts",
    "MetricsReport", "build_report", "load_masks", "load_pair_scores",
]
