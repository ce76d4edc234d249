"""Accuracy-vs-uncertainty tabulation, optimal thresholds, and the
uncertainty-gated late-fusion rule.

A sample is accurate when the argmax of its predictive mean equals the
label (first index wins ties) and certain when its uncertainty is at or
below the threshold (closed boundary).  The AvU score is the fraction of
samples whose certainty agrees with their correctness; per-modality
thresholds are chosen to maximize it on validation data.  At fusion time,
modalities that are all certain are average-pooled; otherwise the single
modality with the lowest uncertainty wins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .csvio import write_csv
from .errors import ConfigError, ShapeError

UNCERTAINTY_METRICS = ("bald", "entropy")
COMPARISON_MODES = ("raw", "normalized")


@dataclass(frozen=True)
class AvUCounts:
    n_ac: int  # accurate and certain
    n_au: int  # accurate and uncertain
    n_ic: int  # inaccurate and certain
    n_iu: int  # inaccurate and uncertain

    @property
    def total(self) -> int:
        return self.n_ac + self.n_au + self.n_ic + self.n_iu


def _check_avu_inputs(means, labels, uncertainties):
    means = np.asarray(means, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    u = np.asarray(uncertainties, dtype=np.float64)
    if means.ndim != 2:
        raise ShapeError(f"means must be (N, K), got shape {means.shape}")
    n = means.shape[0]
    if labels.shape != (n,) or u.shape != (n,):
        raise ShapeError(
            f"length mismatch: {n} predictions, {labels.shape[0]} labels, {u.shape[0]} uncertainties"
        )
    return means, labels, u


def _tabulate(accurate: np.ndarray, certain: np.ndarray) -> AvUCounts:
    return AvUCounts(
        n_ac=int(np.sum(accurate & certain)),
        n_au=int(np.sum(accurate & ~certain)),
        n_ic=int(np.sum(~accurate & certain)),
        n_iu=int(np.sum(~accurate & ~certain)),
    )


def avu_counts(means, labels, uncertainties, threshold: float) -> AvUCounts:
    """Confusion counts of correctness against certainty at one threshold."""
    if threshold < 0:
        raise ConfigError(f"threshold must be >= 0, got {threshold}")
    means, labels, u = _check_avu_inputs(means, labels, uncertainties)
    accurate = means.argmax(axis=1) == labels
    return _tabulate(accurate, u <= threshold)


def avu(counts: AvUCounts) -> float:
    """(n_ac + n_iu) / total: how often certainty agrees with correctness."""
    if counts.total <= 0:
        raise ConfigError("AvU is undefined for empty counts")
    return (counts.n_ac + counts.n_iu) / counts.total


@dataclass(frozen=True)
class ThresholdSearch:
    threshold: float
    avu: float
    candidates: list[float]
    curve: list[tuple[float, float, AvUCounts]]  # (threshold, avu, counts)
    degenerate: bool = False

    def curve_to_csv(self, path) -> None:
        write_csv(
            path,
            ["threshold", "avu", "n_ac", "n_au", "n_ic", "n_iu"],
            [
                [th, a, c.n_ac, c.n_au, c.n_ic, c.n_iu]
                for th, a, c in self.curve
            ],
        )


def optimal_threshold(means, labels, uncertainties) -> ThresholdSearch:
    """Scan candidate thresholds and return the AvU-maximizing one.

    Candidates are the midpoints between consecutive distinct uncertainty
    values plus one candidate below the minimum and one above the maximum.
    Ties pick the lowest threshold.  If every uncertainty is identical the
    scan is meaningless: the above-max candidate is returned with the
    degenerate flag set.
    """
    means, labels, u = _check_avu_inputs(means, labels, uncertainties)
    if len(u) < 2:
        raise ConfigError("threshold search needs at least 2 samples")
    accurate = means.argmax(axis=1) == labels

    distinct = np.unique(u)
    candidates = (
        [float(distinct[0] - 1.0)]
        + [float(m) for m in (distinct[:-1] + distinct[1:]) / 2.0]
        + [float(distinct[-1] + 1.0)]
    )
    curve = []
    for th in candidates:
        counts = _tabulate(accurate, u <= th)
        curve.append((th, avu(counts), counts))

    if len(distinct) == 1:
        th, score, _ = curve[-1]
        return ThresholdSearch(th, score, candidates, curve, degenerate=True)

    best_idx = 0
    for i, (_, score, _) in enumerate(curve):
        if score > curve[best_idx][1]:
            best_idx = i
    th, score, _ = curve[best_idx]
    return ThresholdSearch(th, score, candidates, curve, degenerate=False)


@dataclass
class FusionPolicy:
    """Per-modality uncertainty thresholds and the gating configuration."""

    metric: str = "bald"
    mode: str = "raw"
    modalities: list[str] = field(default_factory=list)  # tie-break order
    thresholds: dict[str, float] = field(default_factory=dict)
    degenerate: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if self.metric not in UNCERTAINTY_METRICS:
            raise ConfigError(f"metric must be one of {UNCERTAINTY_METRICS}, got {self.metric!r}")
        if self.mode not in COMPARISON_MODES:
            raise ConfigError(f"mode must be one of {COMPARISON_MODES}, got {self.mode!r}")
        for name, th in self.thresholds.items():
            if th < 0:
                raise ConfigError(f"threshold for '{name}' must be >= 0, got {th}")

    def save(self, path) -> None:
        payload = {
            "metric": self.metric,
            "mode": self.mode,
            "modalities": self.modalities,
            "thresholds": self.thresholds,
            "degenerate": self.degenerate,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "FusionPolicy":
        payload = json.loads(Path(path).read_text())
        return cls(
            metric=payload["metric"],
            mode=payload["mode"],
            modalities=list(payload["modalities"]),
            thresholds={k: float(v) for k, v in payload["thresholds"].items()},
            degenerate={k: bool(v) for k, v in payload.get("degenerate", {}).items()},
        )


def fit_fusion_policy(
    means_by_modality: dict[str, np.ndarray],
    uncertainties_by_modality: dict[str, np.ndarray],
    labels,
    metric: str = "bald",
    mode: str = "raw",
) -> tuple[FusionPolicy, dict[str, ThresholdSearch]]:
    """Fit per-modality thresholds independently on validation predictions.

    Negative sentinel candidates (possible when the below-min candidate
    wins) are clamped to zero so the policy invariant holds.
    """
    searches = {}
    thresholds = {}
    degenerate = {}
    for name in means_by_modality:
        search = optimal_threshold(
            means_by_modality[name], labels, uncertainties_by_modality[name]
        )
        searches[name] = search
        thresholds[name] = max(search.threshold, 0.0)
        degenerate[name] = search.degenerate
    policy = FusionPolicy(
        metric=metric,
        mode=mode,
        modalities=list(means_by_modality),
        thresholds=thresholds,
        degenerate=degenerate,
    )
    return policy, searches


def _mean_of(pred) -> np.ndarray:
    if isinstance(pred, np.ndarray):
        return np.asarray(pred, dtype=np.float64)
    return np.asarray(getattr(pred, "mean", pred), dtype=np.float64)


def fuse(preds, uncertainties, policy: FusionPolicy) -> tuple[np.ndarray, str]:
    """Gate one sample's per-modality predictions through the policy.

    All modalities at or below their thresholds: average the predictive
    means (tag ``averaged``).  Otherwise return the mean of the modality
    with the smallest comparison value, raw uncertainty by default or
    u/threshold in normalized mode; ties go to the earliest modality in
    policy order.
    """
    names = policy.modalities
    if len(names) < 2:
        raise ConfigError("fusion needs at least 2 modalities")
    if len(preds) != len(names) or len(uncertainties) != len(names):
        raise ShapeError(
            f"expected {len(names)} predictions/uncertainties, got {len(preds)}/{len(uncertainties)}"
        )
    means = [_mean_of(p) for p in preds]
    k = means[0].shape[0]
    for name, m in zip(names, means):
        if m.shape != (k,):
            raise ShapeError(f"modality '{name}' has {m.shape[0]} classes, expected {k}")

    u = np.asarray(uncertainties, dtype=np.float64)
    ths = np.array([policy.thresholds[name] for name in names])
    if np.all(u <= ths):
        fused = np.mean(means, axis=0)
        return fused, "averaged"

    if policy.mode == "normalized":
        with np.errstate(divide="ignore", invalid="ignore"):
            compare = np.where(ths > 0, u / ths, np.where(u == 0, 0.0, np.inf))
    else:
        compare = u
    winner = int(np.argmin(compare))  # argmin keeps the first index on ties
    return means[winner].copy(), names[winner]
