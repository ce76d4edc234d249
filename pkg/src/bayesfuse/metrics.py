"""Classification and ranking metrics plus the reporting surfaces:
top-k accuracy, micro-averaged PR/ROC curves, area-normalized density
histograms, and in/out-of-distribution separation statistics.

Micro-averaging flattens every (sample, class) pair into a binary
one-vs-rest instance scored by that class's probability.  Curve areas use
the trapezoidal rule; with ties grouped, the ROC area equals the
Mann-Whitney rank statistic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .csvio import write_csv
from .errors import ConfigError, ShapeError

DEFAULT_HISTOGRAM_BINS = 50


@dataclass(frozen=True)
class Curve:
    """Ordered (x, y) points with trapezoidal area."""

    points: np.ndarray  # (n, 2), x nondecreasing
    auc: float

    def to_csv(self, path) -> None:
        write_csv(path, ["x", "y"], [[float(x), float(y)] for x, y in self.points])


def _trapezoid(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return float(np.trapezoid(y, x))


def topk_accuracy(means, labels, k: int) -> float:
    """Fraction of samples whose label ranks in the top k probabilities.

    Ranking uses a stable sort on descending probability, so ties resolve
    to the lower class index.
    """
    means = np.asarray(means, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if means.ndim != 2 or means.shape[0] != labels.shape[0]:
        raise ShapeError(f"means {means.shape} incompatible with labels {labels.shape}")
    num_classes = means.shape[1]
    if not (1 <= k <= num_classes):
        raise ConfigError(f"k must be in [1, {num_classes}], got {k}")
    order = np.argsort(-means, axis=1, kind="stable")[:, :k]
    hits = (order == labels[:, None]).any(axis=1)
    return float(hits.mean())


def _flatten_micro(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ShapeError(f"scores {scores.shape} incompatible with labels {labels.shape}")
    if scores.shape[0] < 1:
        raise ConfigError("need at least one sample")
    n, k = scores.shape
    positives = np.zeros((n, k), dtype=bool)
    positives[np.arange(n), labels] = True
    return scores.ravel(), positives.ravel()


def _threshold_sweep(flat_scores: np.ndarray, flat_pos: np.ndarray):
    """Cumulative TP/FP at each distinct score, swept from high to low.

    Predicting positive means score >= threshold, so the counts at a
    distinct score include its whole tie group.
    """
    order = np.argsort(-flat_scores, kind="stable")
    sorted_scores = flat_scores[order]
    sorted_pos = flat_pos[order]
    cum_tp = np.cumsum(sorted_pos)
    cum_fp = np.cumsum(~sorted_pos)
    # last index of each tie group marks the counts at that threshold
    boundary = np.flatnonzero(np.diff(sorted_scores) != 0.0)
    idx = np.concatenate([boundary, [len(sorted_scores) - 1]])
    return sorted_scores[idx], cum_tp[idx], cum_fp[idx]


def micro_pr_curve(scores, labels) -> Curve:
    """Micro-averaged precision-recall curve with trapezoidal area.

    The curve starts at recall 0 anchored to the precision of the highest
    threshold, then adds one point per distinct score.
    """
    flat_scores, flat_pos = _flatten_micro(scores, labels)
    n_pos = int(flat_pos.sum())
    if n_pos == 0:
        raise ConfigError("PR curve needs at least one positive instance")
    _, tp, fp = _threshold_sweep(flat_scores, flat_pos)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    points = np.column_stack(
        [np.concatenate([[0.0], recall]), np.concatenate([[precision[0]], precision])]
    )
    return Curve(points=points, auc=_trapezoid(points))


def micro_roc_curve(scores, labels) -> Curve:
    """Micro-averaged ROC curve; trapezoidal area equals the rank statistic."""
    flat_scores, flat_pos = _flatten_micro(scores, labels)
    n_pos = int(flat_pos.sum())
    n_neg = len(flat_pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("ROC curve needs both positive and negative instances")
    _, tp, fp = _threshold_sweep(flat_scores, flat_pos)
    points = np.column_stack(
        [np.concatenate([[0.0], fp / n_neg]), np.concatenate([[0.0], tp / n_pos])]
    )
    return Curve(points=points, auc=_trapezoid(points))


@dataclass(frozen=True)
class DensityHistogram:
    """Uniform-bin histogram normalized to unit area."""

    bin_edges: np.ndarray  # (num_bins + 1,)
    densities: np.ndarray  # (num_bins,)
    clipped_low: int
    clipped_high: int

    @property
    def area(self) -> float:
        width = self.bin_edges[1] - self.bin_edges[0]
        return float(self.densities.sum() * width)

    def to_csv(self, path) -> None:
        write_csv(
            path,
            ["bin_left", "bin_right", "density"],
            [
                [float(self.bin_edges[i]), float(self.bin_edges[i + 1]), float(d)]
                for i, d in enumerate(self.densities)
            ],
        )


def density_histogram(
    values, num_bins: int, range_min: float, range_max: float
) -> DensityHistogram:
    """Histogram with total area one over a fixed range.

    Values beyond the range are clipped into the edge bins (counted), and
    values at the max edge belong to the last bin.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ConfigError("cannot histogram an empty set of values")
    if num_bins < 1:
        raise ConfigError(f"num_bins must be >= 1, got {num_bins}")
    if not range_min < range_max:
        raise ConfigError(f"need range_min < range_max, got [{range_min}, {range_max}]")
    clipped_low = int(np.sum(v < range_min))
    clipped_high = int(np.sum(v > range_max))
    clipped = np.clip(v, range_min, range_max)
    counts, edges = np.histogram(clipped, bins=num_bins, range=(range_min, range_max))
    width = (range_max - range_min) / num_bins
    densities = counts / (v.size * width)
    return DensityHistogram(
        bin_edges=edges,
        densities=densities,
        clipped_low=clipped_low,
        clipped_high=clipped_high,
    )


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group average."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@dataclass(frozen=True)
class OodSeparation:
    mean_in: float
    median_in: float
    mean_out: float
    median_out: float
    auroc: float  # P(u_out > u_in) with ties counted half


def ood_separation(u_in, u_out) -> OodSeparation:
    """Summary statistics for uncertainty as an out-of-distribution score.

    The rank statistic is the probability that a random OOD sample scores
    strictly above a random in-distribution sample, plus half the tie mass;
    equivalently the AUROC of the uncertainty as a detector.
    """
    u_in = np.asarray(u_in, dtype=np.float64).ravel()
    u_out = np.asarray(u_out, dtype=np.float64).ravel()
    if u_in.size == 0 or u_out.size == 0:
        raise ConfigError("both uncertainty sets must be nonempty")
    ranks = _average_ranks(np.concatenate([u_in, u_out]))
    rank_sum_out = float(ranks[u_in.size :].sum())
    n_in, n_out = u_in.size, u_out.size
    auroc = (rank_sum_out - n_out * (n_out + 1) / 2.0) / (n_in * n_out)
    return OodSeparation(
        mean_in=float(u_in.mean()),
        median_in=float(np.median(u_in)),
        mean_out=float(u_out.mean()),
        median_out=float(np.median(u_out)),
        auroc=float(auroc),
    )
