"""Monte Carlo predictive distributions and uncertainty estimators.

Prediction runs T stochastic forward passes per input and keeps the full
T x K sample matrix.  Predictive entropy is the entropy of the sample mean
(total uncertainty); the mutual-information score subtracts the average
per-pass entropy, leaving the disagreement between weight draws (epistemic
part).  Natural logarithms throughout, so both are bounded by ln K.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .csvio import read_csv, write_csv
from .data import TENSOR_MAGIC
from .errors import ConfigError, DataFormatError, DataLengthError, ValidationError
from .heads import DeterministicHead, VariationalHead, relu
from .linalg import RngStream, softmax_rows

DEFAULT_MC_PASSES = 40

_PREDICT_SID = 0x50524544


@dataclass
class PredictiveDistribution:
    """T per-pass categorical samples for one input, plus their mean."""

    samples: np.ndarray  # (T, K)
    mean: np.ndarray = field(init=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise ValidationError(f"samples must be (T, K) with T,K >= 1, got {s.shape}")
        if np.any(s < 0):
            raise ValidationError("sample probabilities must be nonnegative")
        if not np.allclose(s.sum(axis=1), 1.0, atol=1e-9):
            raise ValidationError("every sample row must sum to 1 within 1e-9")
        self.samples = s
        self.mean = s.mean(axis=0)

    @property
    def num_passes(self) -> int:
        return self.samples.shape[0]

    @property
    def num_classes(self) -> int:
        return self.samples.shape[1]

    def confidence(self) -> float:
        """Max of the predictive mean (the histogrammed confidence measure).

        An alternative definition, mean of the per-pass max, is not used
        here but can be derived from ``samples`` directly.
        """
        return float(self.mean.max())

    def top1(self) -> int:
        return int(self.mean.argmax())


def _entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy along the last axis with 0*log(0) = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def predictive_entropy(pred: PredictiveDistribution) -> float:
    """Entropy of the predictive mean; total uncertainty in [0, ln K]."""
    return float(_entropy(pred.mean))


def bald(pred: PredictiveDistribution) -> float:
    """Predictive entropy minus mean per-pass entropy, clamped at zero.

    The difference is nonnegative in exact arithmetic; the clamp only
    removes MC round-off of order 1e-15.
    """
    value = float(_entropy(pred.mean) - _entropy(pred.samples).mean())
    return max(value, 0.0)


def _sampled_passes_one_row(head: VariationalHead, x_row: np.ndarray, row_stream: RngStream, t: int):
    """T independent posterior passes for one input, vectorized over passes.

    Uses the exact local reparameterization of a sampled-weight pass: for a
    single input row, z = h W + b with W, b drawn entrywise Gaussian has
    law N(h mu + b_mu, h^2 sigma_w^2 + sigma_b^2) conditional on h, so the
    output perturbation is drawn directly.  Per pass and per layer this is
    the same distribution a full weight draw induces, at a fraction of the
    sampling cost.
    """
    h = np.broadcast_to(x_row, (t, x_row.shape[0])).copy()
    last = len(head.layers) - 1
    for li, layer in enumerate(head.layers):
        c = row_stream.child(li)
        eps = c.normal(t, layer.out_dim)
        var = h**2 @ layer.weight_sigma() ** 2 + layer.bias_sigma() ** 2
        z = h @ layer.weight_mu + layer.bias_mu + np.sqrt(var) * eps
        h = z if li == last else relu(z)
    return softmax_rows(h)


def _dropout_passes_one_row(head: DeterministicHead, x_row: np.ndarray, row_stream: RngStream, t: int):
    h = np.broadcast_to(x_row, (t, x_row.shape[0])).copy()
    keep = 1.0 - head.dropout_p
    last = len(head.layers) - 1
    for li, layer in enumerate(head.layers):
        z = h @ layer.weight + layer.bias
        h = z if li == last else relu(z)
        if head.dropout_p > 0.0:
            mask = (row_stream.child(li).uniform(t, layer.out_dim) >= head.dropout_p).astype(
                np.float64
            )
            h = h * mask / keep
    return softmax_rows(h)


def _check_predict_args(head, x, t: int) -> np.ndarray:
    if t < 1:
        raise ConfigError(f"number of MC passes must be >= 1, got {t}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != head.in_dim:
        raise ConfigError(f"input has {x.shape[1]} features, head expects {head.in_dim}")
    return x


def mc_predict(
    head: VariationalHead, x, t: int = DEFAULT_MC_PASSES, stream: RngStream | None = None
) -> list[PredictiveDistribution]:
    """Predictive distributions from T sampled-weight passes per input row.

    Per-row noise is keyed by the row index, so a sample's prediction does
    not depend on which other rows share the batch.
    """
    x = _check_predict_args(head, x, t)
    stream = stream if stream is not None else RngStream(0, _PREDICT_SID)
    return [
        PredictiveDistribution(_sampled_passes_one_row(head, x[i], stream.child(i), t))
        for i in range(x.shape[0])
    ]


def mc_dropout_predict(
    head: DeterministicHead, x, t: int = DEFAULT_MC_PASSES, stream: RngStream | None = None
) -> list[PredictiveDistribution]:
    """Predictive distributions from T dropout-active passes per input row."""
    x = _check_predict_args(head, x, t)
    stream = stream if stream is not None else RngStream(0, _PREDICT_SID)
    return [
        PredictiveDistribution(_dropout_passes_one_row(head, x[i], stream.child(i), t))
        for i in range(x.shape[0])
    ]


def single_pass_predict(head: DeterministicHead, x) -> list[PredictiveDistribution]:
    """Plain softmax forward as a T=1 distribution (non-Bayesian baseline)."""
    from .heads import forward_deterministic

    x = _check_predict_args(head, x, 1)
    probs = forward_deterministic(head, x, dropout_active=False)
    return [PredictiveDistribution(probs[i : i + 1]) for i in range(x.shape[0])]


# ---------------------------------------------------------------------------
# Prediction dumps: summary CSV plus the full T x K sample block.


@dataclass
class PredictionSet:
    sample_ids: list[str]
    labels: np.ndarray  # (N,)
    samples: np.ndarray  # (N, T, K)

    @property
    def means(self) -> np.ndarray:
        return self.samples.mean(axis=1)

    def distributions(self) -> list[PredictiveDistribution]:
        return [PredictiveDistribution(self.samples[i]) for i in range(len(self.sample_ids))]

    def uncertainties(self, metric: str) -> np.ndarray:
        if metric == "bald":
            return np.array([bald(p) for p in self.distributions()])
        if metric == "entropy":
            return np.array([predictive_entropy(p) for p in self.distributions()])
        raise ConfigError(f"unknown uncertainty metric {metric!r}")


def write_prediction_dump(
    csv_path, bin_path, sample_ids, labels, preds: list[PredictiveDistribution]
) -> None:
    rows = []
    for sid, label, p in zip(sample_ids, labels, preds):
        rows.append(
            [sid, int(label), p.top1(), p.confidence(), predictive_entropy(p), bald(p)]
        )
    write_csv(
        csv_path,
        ["sample_id", "label", "pred_top1", "confidence", "entropy", "bald"],
        rows,
    )
    stacked = np.concatenate([p.samples for p in preds], axis=0)
    with open(bin_path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<II", stacked.shape[0], stacked.shape[1]))
        f.write(np.ascontiguousarray(stacked, dtype="<f4").tobytes())


def load_prediction_dump(csv_path, bin_path) -> PredictionSet:
    """Read a dump back.  Sample rows are renormalized after the float32
    storage round trip so the exact row-sum invariant holds again."""
    header, rows = read_csv(csv_path)
    if header[:2] != ["sample_id", "label"]:
        raise DataFormatError(f"{csv_path}: unexpected header {header}")
    ids = [r[0] for r in rows]
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)

    blob = Path(bin_path).read_bytes()
    if len(blob) < 16 or blob[:8] != TENSOR_MAGIC:
        raise DataFormatError(f"{bin_path}: bad or missing tensor magic")
    count, k = struct.unpack("<II", blob[8:16])
    expected = 16 + count * k * 4
    if len(blob) != expected:
        raise DataLengthError(f"{bin_path}: {len(blob)} bytes, header needs {expected}")
    flat = np.frombuffer(blob, dtype="<f4", offset=16).astype(np.float64).reshape(count, k)
    flat = flat / flat.sum(axis=1, keepdims=True)
    n = len(ids)
    if n == 0 or count % n != 0:
        raise DataLengthError(f"{bin_path}: {count} sample rows do not divide into {n} inputs")
    t = count // n
    return PredictionSet(sample_ids=ids, labels=labels, samples=flat.reshape(n, t, k))
