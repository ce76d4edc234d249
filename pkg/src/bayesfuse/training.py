"""Objectives, exact manual gradients, SGD with momentum, plateau LR decay,
and the training loop.

Gradients are reverse-mode and exact at the sampled noise: the Gaussian and
sign draws of a Flipout pass (and the dropout masks of the baseline) are
held fixed, so finite differences of the loss agree with the analytic
gradients to first order.  KL gradients use the closed form with the
softplus chain factor sigmoid(rho).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .csvio import write_csv
from .data import MultimodalDataset
from .errors import ConfigError, ShapeError
from .heads import (
    DeterministicHead,
    VariationalHead,
    _check_input,
    dropout_masks,
    flipout_layer_noise,
    forward_deterministic,
    forward_mean,
    kl_to_prior,
    relu,
    sigmoid,
)
from .linalg import RngStream, softmax_rows

_TRAIN_SID = 0x54524E31

LOG_CLAMP = 1e-12
PLATEAU_MIN_IMPROVEMENT = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0001
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 40
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    kl_scale: float | None = None  # None: batch_size / train_set_size per minibatch
    mc_train_samples: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not (0.0 < self.plateau_factor < 1.0):
            raise ConfigError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if self.mc_train_samples < 1:
            raise ConfigError("mc_train_samples must be >= 1")
        if self.kl_scale is not None and self.kl_scale < 0:
            raise ConfigError("kl_scale must be >= 0")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    nll: float
    kl: float
    val_loss: float
    val_top1: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        write_csv(
            path,
            ["epoch", "train_loss", "nll", "kl", "val_loss", "val_top1", "lr"],
            [
                [r.epoch, r.train_loss, r.nll, r.kl, r.val_loss, r.val_top1, r.lr]
                for r in self.records
            ],
        )


@dataclass(frozen=True)
class ElboTerms:
    loss: float
    nll: float
    kl: float


def _check_labels(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {y.shape}")
    if y.size == 0:
        raise ConfigError("empty batch")
    if y.min() < 0 or y.max() >= num_classes:
        raise ConfigError(f"labels must lie in [0, {num_classes}), got {int(y.min())}..{int(y.max())}")
    return y


def _nll_from_logits(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y)
    nll = -float(log_probs[np.arange(n), y].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), y] -= 1.0
    return nll, dlogits / n


def _flipout_forward_cached(head: VariationalHead, x: np.ndarray, stream: RngStream):
    """Flipout pass keeping per-layer intermediates for the backward sweep."""
    caches = []
    h = x
    last = len(head.layers) - 1
    for li, layer in enumerate(head.layers):
        eps_w, s_in, s_out, eps_b = flipout_layer_noise(layer, h.shape[0], stream.child(li))
        sigma_w = layer.weight_sigma()
        signed_in = h * s_in
        z = (
            h @ layer.weight_mu
            + layer.bias_mu
            + (signed_in @ (sigma_w * eps_w)) * s_out
            + layer.bias_sigma() * eps_b
        )
        caches.append((h, z, eps_w, s_in, s_out, eps_b, sigma_w))
        h = z if li == last else relu(z)
    return h, caches


def elbo_loss(
    head: VariationalHead, batch_x, batch_y, kl_scale: float, stream: RngStream
) -> ElboTerms:
    """Negative ELBO on one minibatch: mean NLL of a Flipout pass plus
    kl_scale times the closed-form KL to the prior."""
    x = _check_input(head, batch_x)
    y = _check_labels(batch_y, head.num_classes)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"batch has {x.shape[0]} rows but {y.shape[0]} labels")
    logits, _ = _flipout_forward_cached(head, x, stream)
    nll, _ = _nll_from_logits(logits, y)
    kl = kl_scale * kl_to_prior(head)
    return ElboTerms(loss=nll + kl, nll=nll, kl=kl)


def grad_elbo(
    head: VariationalHead, batch_x, batch_y, kl_scale: float, stream: RngStream
) -> tuple[ElboTerms, list[np.ndarray]]:
    """Loss terms and exact gradients w.r.t. every mu and rho.

    Gradients are returned in ``head.parameters()`` order (per layer:
    weight_mu, weight_rho, bias_mu, bias_rho), evaluated at the noise the
    stream yields, so repeated calls with one stream are deterministic.
    """
    x = _check_input(head, batch_x)
    y = _check_labels(batch_y, head.num_classes)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"batch has {x.shape[0]} rows but {y.shape[0]} labels")

    logits, caches = _flipout_forward_cached(head, x, stream)
    nll, dz = _nll_from_logits(logits, y)

    grads: list[np.ndarray | None] = [None] * (4 * len(head.layers))
    for li in range(len(head.layers) - 1, -1, -1):
        layer = head.layers[li]
        a_in, z, eps_w, s_in, s_out, eps_b, sigma_w = caches[li]
        if li != len(head.layers) - 1:
            dz = dz * (z > 0.0)  # back through the rectifier of layer li

        d_wmu = a_in.T @ dz
        d_bmu = dz.sum(axis=0)
        dz_signed = dz * s_out
        d_sigma_w = (a_in * s_in).T @ dz_signed * eps_w
        d_wrho = d_sigma_w * sigmoid(layer.weight_rho)
        d_sigma_b = (dz * eps_b).sum(axis=0)
        d_brho = d_sigma_b * sigmoid(layer.bias_rho)

        # KL path, closed form scaled by kl_scale.
        if kl_scale != 0.0:
            sp2 = layer.prior_sigma**2
            d_wmu = d_wmu + kl_scale * (layer.weight_mu - layer.prior_mean) / sp2
            d_bmu = d_bmu + kl_scale * (layer.bias_mu - layer.prior_mean) / sp2
            d_wrho = d_wrho + kl_scale * (-1.0 / sigma_w + sigma_w / sp2) * sigmoid(
                layer.weight_rho
            )
            sigma_b = layer.bias_sigma()
            d_brho = d_brho + kl_scale * (-1.0 / sigma_b + sigma_b / sp2) * sigmoid(
                layer.bias_rho
            )

        grads[4 * li : 4 * li + 4] = [d_wmu, d_wrho, d_bmu, d_brho]
        if li > 0:
            dz = dz @ layer.weight_mu.T + (dz_signed @ (sigma_w * eps_w).T) * s_in

    kl = kl_scale * kl_to_prior(head)
    return ElboTerms(loss=nll + kl, nll=nll, kl=kl), grads  # type: ignore[return-value]


def cross_entropy_loss(probs, batch_y) -> float:
    """Mean negative log probability of the true class, clamped at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"probs must be 2-D, got shape {p.shape}")
    y = _check_labels(batch_y, p.shape[1])
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ConfigError("probability rows must sum to 1")
    picked = np.maximum(p[np.arange(len(y)), y], LOG_CLAMP)
    return -float(np.log(picked).mean())


def grad_cross_entropy(
    head: DeterministicHead, batch_x, batch_y, stream: RngStream
) -> tuple[float, list[np.ndarray]]:
    """Cross-entropy loss and gradients at fixed dropout masks.

    Masks are sampled from the stream (training-mode dropout); with p == 0
    they are trivial and the plain softmax/cross-entropy gradients emerge.
    Returned in ``head.parameters()`` order (per layer: weight, bias).
    """
    x = _check_input(head, batch_x)
    y = _check_labels(batch_y, head.num_classes)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"batch has {x.shape[0]} rows but {y.shape[0]} labels")

    masks = dropout_masks(head, x.shape[0], stream) if head.dropout_p > 0 else None
    keep = 1.0 - head.dropout_p
    last = len(head.layers) - 1

    activations = [x]
    zs = []
    h = x
    for li, layer in enumerate(head.layers):
        z = h @ layer.weight + layer.bias
        zs.append(z)
        h = z if li == last else relu(z)
        if masks is not None:
            h = h * masks[li] / keep
        activations.append(h)

    loss, dh = _nll_from_logits(activations[-1], y)

    grads: list[np.ndarray | None] = [None] * (2 * len(head.layers))
    for li in range(last, -1, -1):
        layer = head.layers[li]
        if masks is not None:
            dh = dh * masks[li] / keep
        dz = dh if li == last else dh * (zs[li] > 0.0)
        grads[2 * li] = activations[li].T @ dz
        grads[2 * li + 1] = dz.sum(axis=0)
        if li > 0:
            dh = dz @ layer.weight.T
    return loss, grads  # type: ignore[return-value]


def sgd_momentum_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    velocity: list[np.ndarray],
    learning_rate: float,
    momentum: float,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """v <- momentum*v + g; p <- p - lr*v.  Returns fresh arrays."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError("params, grads and velocity must have equal length")
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"shape mismatch: p{p.shape} g{g.shape} v{v.shape}")
        v_next = momentum * v + g
        new_velocity.append(v_next)
        new_params.append(p - learning_rate * v_next)
    return new_params, new_velocity


def plateau_scheduler_step(
    val_losses: list[float],
    patience: int,
    factor: float,
    learning_rate: float,
    min_improvement: float = PLATEAU_MIN_IMPROVEMENT,
) -> float:
    """Decay the rate when the best validation loss stalls.

    An epoch counts as improving only when it beats the best seen so far by
    more than ``min_improvement``; once ``patience`` consecutive epochs fail
    to do that, the rate is multiplied by ``factor`` (and keeps decaying
    every epoch while the plateau persists).
    """
    if patience < 1:
        raise ConfigError("patience must be >= 1")
    best = np.inf
    streak = 0
    for loss in val_losses:
        if loss < best - min_improvement:
            best = loss
            streak = 0
        else:
            streak += 1
    return learning_rate * factor if streak >= patience else learning_rate


def _epoch_batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _validation_metrics(head, x_val, y_val) -> tuple[float, float]:
    """Noise-free validation loss and top-1 accuracy."""
    if isinstance(head, VariationalHead):
        probs = softmax_rows(forward_mean(head, x_val))
    else:
        probs = forward_deterministic(head, x_val, dropout_active=False)
    loss = cross_entropy_loss(probs, y_val)
    top1 = float((probs.argmax(axis=1) == y_val).mean())
    return loss, top1


def train(
    head,
    train_ds: MultimodalDataset,
    val_ds: MultimodalDataset,
    config: TrainConfig,
    modality: str | None = None,
) -> tuple[object, TrainHistory]:
    """Run the minibatch SGD loop and return the best-validation parameters.

    Works for both head kinds: variational heads optimize the negative ELBO
    via Flipout passes (KL weighted by batch/train-set size unless the
    config pins a scale), deterministic heads optimize cross-entropy with
    training-mode dropout.  Bit-reproducible given (config.seed, datasets).
    """
    config.validate()
    if modality is None:
        if len(train_ds.modalities) != 1:
            raise ConfigError("modality must be named for a multimodal dataset")
        modality = train_ds.modalities[0].name
    if modality not in train_ds.features:
        raise ConfigError(f"dataset has no modality '{modality}'")
    x_train = train_ds.features[modality]
    y_train = train_ds.labels
    x_val = val_ds.features[modality]
    y_val = val_ds.labels
    if x_train.shape[1] != head.in_dim:
        raise ConfigError(
            f"modality '{modality}' dim {x_train.shape[1]} != head input dim {head.in_dim}"
        )

    is_variational = isinstance(head, VariationalHead)
    n = x_train.shape[0]
    base = RngStream(config.seed, _TRAIN_SID)
    params = [p.copy() for p in head.parameters()]
    velocity = [np.zeros_like(p) for p in params]
    lr = config.learning_rate
    history = TrainHistory()
    best_loss = np.inf
    best_params = [p.copy() for p in params]
    best_epoch = 0
    val_losses: list[float] = []

    for epoch in range(1, config.max_epochs + 1):
        perm = base.child(1, epoch).permutation(n)
        sums = np.zeros(3)  # loss, nll, kl weighted by batch size
        for step, batch_idx in enumerate(_epoch_batches(n, config.batch_size, perm)):
            xb, yb = x_train[batch_idx], y_train[batch_idx]
            ks = config.kl_scale if config.kl_scale is not None else len(batch_idx) / n
            step_stream = base.child(2, epoch, step)

            acc_terms = np.zeros(3)
            acc_grads = None
            for s in range(config.mc_train_samples):
                if is_variational:
                    terms, grads = grad_elbo(head, xb, yb, ks, step_stream.child(s))
                    acc_terms += (terms.loss, terms.nll, terms.kl)
                else:
                    loss, grads = grad_cross_entropy(head, xb, yb, step_stream.child(s))
                    acc_terms += (loss, loss, 0.0)
                if acc_grads is None:
                    acc_grads = grads
                else:
                    acc_grads = [a + g for a, g in zip(acc_grads, grads)]
            scale = 1.0 / config.mc_train_samples
            acc_terms *= scale
            acc_grads = [g * scale for g in acc_grads]

            params, velocity = sgd_momentum_step(params, acc_grads, velocity, lr, config.momentum)
            head.set_parameters(params)
            sums += acc_terms * len(batch_idx)

        train_loss, train_nll, train_kl = sums / n
        val_loss, val_top1 = _validation_metrics(head, x_val, y_val)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(train_loss),
                nll=float(train_nll),
                kl=float(train_kl),
                val_loss=val_loss,
                val_top1=val_top1,
                lr=lr,
            )
        )
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = [p.copy() for p in params]
            best_epoch = epoch
        val_losses.append(val_loss)
        lr = plateau_scheduler_step(
            val_losses, config.plateau_patience, config.plateau_factor, lr
        )

    head.set_parameters(best_params)
    head._best_epoch = best_epoch  # consumed by checkpoint metadata
    head._best_val_loss = float(best_loss)
    return head, history
