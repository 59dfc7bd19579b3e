"""Histograms, rankings, two-sample statistics and cross-dataset density reports."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, to_bytes


@dataclass(frozen=True)
class Histogram:
    """Equal-width bins over ``[lo, hi]``; ``counts`` are raw item counts."""

    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _finite_1d(values, what="values") -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError(f"{what} must be non-empty")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{what} contain non-finite entries")
    return v


def histogram(logps, bin_count: int, value_range: tuple[float, float] | None = None) -> Histogram:
    """Unnormalized histogram; the range defaults to ``[min, max]`` of the data."""
    v = _finite_1d(logps)
    if bin_count < 1:
        raise ValueError("bin_count must be positive")
    lo, hi = (float(v.min()), float(v.max())) if value_range is None else map(float, value_range)
    if hi < lo:
        raise ValueError(f"empty range [{lo}, {hi}]")
    if hi == lo:
        # a degenerate range still needs a bin of positive width
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(v, bins=bin_count, range=(lo, hi))
    return Histogram(edges, counts.astype(np.int64))


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_a - F_b|``."""
    a = np.sort(_finite_1d(a, "first sample"))
    b = np.sort(_finite_1d(b, "second sample"))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)


@dataclass
class DensityReport:
    """Per-item predictions plus histograms and summary statistics.

    ``histograms`` maps a dataset tag (or ``"all"``) to a histogram; in a
    cross-dataset report every histogram shares one bin range.
    """

    ids: np.ndarray
    tags: np.ndarray
    labels: np.ndarray
    log_density: np.ndarray
    histograms: dict = field(default_factory=dict)
    companion_ks: float | None = None

    def __len__(self) -> int:
        return self.ids.shape[0]

    def select(self, tag: str) -> "DensityReport":
        keep = self.tags == tag
        return DensityReport(self.ids[keep], self.tags[keep], self.labels[keep],
                             self.log_density[keep])

    def tag_names(self) -> list[str]:
        return list(dict.fromkeys(self.tags.tolist()))

    def stats(self, tag: str | None = None) -> dict:
        v = self.log_density if tag is None else self.log_density[self.tags == tag]
        return {"count": int(v.size), "mean": float(v.mean()), "std": float(v.std()),
                "median": float(np.median(v)), "min": float(v.min()), "max": float(v.max())}


def make_report(log_density, tag: str = "data", labels=None, ids=None,
                bin_count: int = 50) -> DensityReport:
    v = _finite_1d(log_density, "log-densities")
    ids = np.arange(v.size) if ids is None else np.asarray(ids, dtype=np.int64)
    labels = np.full(v.size, -1, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    tags = np.full(v.size, tag, dtype=object)
    return DensityReport(ids, tags, labels, v, {tag: histogram(v, bin_count)})


def rank_extremes(report: DensityReport, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k (most likely) and bottom-k item ids.

    Ties are broken by ascending id in both lists, so the result does not
    depend on the order items appear in the report.
    """
    if k < 0 or k > len(report):
        raise ValueError(f"k={k} outside [0, {len(report)}]")
    ids, v = report.ids, report.log_density
    top = np.lexsort((ids, -v))[:k]
    bottom = np.lexsort((ids, v))[:k]
    return ids[top], ids[bottom]


def class_composition(ranked_ids, labels, k: int, ids=None) -> dict[int, float]:
    """Fraction of each class among the first ``k`` ranked ids.

    ``labels`` is indexed by id unless ``ids`` gives the id of each label row.
    """
    ranked = np.asarray(ranked_ids, dtype=np.int64)[:k]
    labels = np.asarray(labels, dtype=np.int64)
    if ids is not None:
        lookup = {int(i): j for j, i in enumerate(np.asarray(ids).tolist())}
        ranked = np.array([lookup[int(i)] for i in ranked], dtype=np.int64)
    if ranked.size == 0:
        return {}
    classes, counts = np.unique(labels[ranked], return_counts=True)
    return {int(c): float(n) / ranked.size for c, n in zip(classes, counts)}


def evaluate_dataset(predict, dataset: Dataset, bin_count: int = 50) -> DensityReport:
    if len(dataset) == 0:
        raise ValueError(f"dataset {dataset.tag!r} is empty")
    return make_report(predict(dataset.x), dataset.tag or "data", dataset.labels, bin_count=bin_count)


def cross_dataset_report(predict, dataset_a: Dataset, dataset_b: Dataset,
                         bin_count: int = 50) -> DensityReport:
    """Score two datasets with one model and put them in a single report.

    Ids run ``0..len(a)-1`` for ``a`` and continue for ``b``; both per-dataset
    histograms use the joint ``[min, max]`` so they overlay directly.
    """
    if dataset_a.dim != dataset_b.dim:
        raise ValueError(f"dimension mismatch: {dataset_a.dim} vs {dataset_b.dim}")
    if len(dataset_a) == 0 or len(dataset_b) == 0:
        raise ValueError("both datasets must be non-empty")
    tag_a = dataset_a.tag or "a"
    tag_b = dataset_b.tag or "b"
    if tag_b == tag_a:
        tag_b = tag_b + "_2"
    va = _finite_1d(predict(dataset_a.x), "log-densities")
    vb = _finite_1d(predict(dataset_b.x), "log-densities")
    v = np.concatenate([va, vb])
    tags = np.array([tag_a] * va.size + [tag_b] * vb.size, dtype=object)
    labels = np.concatenate([dataset_a.labels, dataset_b.labels])
    rng = (float(v.min()), float(v.max()))
    hists = {tag_a: histogram(va, bin_count, rng), tag_b: histogram(vb, bin_count, rng),
             "all": histogram(v, bin_count, rng)}
    return DensityReport(np.arange(v.size), tags, labels, v, hists, ks_statistic(va, vb))


def inversion_summary(report: DensityReport, native: str, foreign: str) -> dict:
    """Median comparison between two tagged groups of a report."""
    med_n = float(np.median(report.log_density[report.tags == native]))
    med_f = float(np.median(report.log_density[report.tags == foreign]))
    return {"native_median": med_n, "foreign_median": med_f,
            "foreign_dominates": med_f > med_n}


# -- export -----------------------------------------------------------------

def write_report_csv(path, report: DensityReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "tag", "label", "log_density"])
        for i, t, lab, v in zip(report.ids, report.tags, report.labels, report.log_density):
            w.writerow([int(i), t, int(lab), repr(float(v))])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Histogram):
        return {"edges": obj.edges.tolist(), "counts": obj.counts.tolist()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def summarize(report: DensityReport, k: int = 100, extra: dict | None = None) -> dict:
    k = min(k, len(report))
    top, bottom = rank_extremes(report, k)
    out = {"stats": {"all": report.stats()}, "k": k,
           "top_ids": top, "bottom_ids": bottom,
           "top_composition": class_composition(top, report.labels, k, report.ids),
           "histograms": report.histograms}
    for tag in report.tag_names():
        out["stats"][tag] = report.stats(tag)
    if report.companion_ks is not None:
        out["ks"] = report.companion_ks
    if extra:
        out.update(extra)
    return out


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")


def image_grid_dump(items, path, grid_cols: int, shape: tuple[int, int, int] | None = None,
                    pad: int = 1) -> None:
    """Tile raster items row-major into one binary PGM/PPM.

    Each tile is surrounded by ``pad`` pixels of black framing. ``items`` is
    either ``(k, h, w, c)`` or ``(k, dim)`` together with ``shape``.
    """
    arr = np.asarray(items, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape((-1,) + tuple(shape))
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4 or arr.shape[3] not in (1, 3) or arr.shape[0] == 0:
        raise ValueError(f"items of shape {arr.shape} are not a stack of raster images")
    if grid_cols < 1:
        raise ValueError("grid_cols must be positive")
    k, h, w, c = arr.shape
    rows = -(-k // grid_cols)
    cell_h, cell_w = h + pad, w + pad
    canvas = np.zeros((rows * cell_h + pad, grid_cols * cell_w + pad, c), dtype=np.uint8)
    tiles = to_bytes(arr)
    for i in range(k):
        r, col = divmod(i, grid_cols)
        y0, x0 = pad + r * cell_h, pad + col * cell_w
        canvas[y0:y0 + h, x0:x0 + w] = tiles[i]
    magic = b"P5" if c == 1 else b"P6"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (canvas.shape[1], canvas.shape[0]))
        fh.write(canvas.tobytes())
