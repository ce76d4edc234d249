"""Classification heads: mean-field Gaussian variational stacks and a
dropout baseline, with closed-form KL to the prior and checkpoint IO.

Weight posteriors are parameterized as sigma = softplus(rho) so that
unconstrained updates can never drive sigma negative.  The standard
classifier is three dense layers with rectifier activations between them;
layer counts other than three are permitted for diagnostics and tests.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, DataLengthError, ShapeError
from .linalg import RngStream, softmax_rows

CHECKPOINT_MAGIC = b"BAYH0001"
_KIND_DETERMINISTIC = 0
_KIND_VARIATIONAL = 1

_INIT_SID = 0x48494E49


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    return np.log(np.expm1(y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class VariationalDenseLayer:
    """Dense layer whose weights and biases are independent Gaussians."""

    weight_mu: np.ndarray  # (in, out)
    weight_rho: np.ndarray  # (in, out); sigma = softplus(rho)
    bias_mu: np.ndarray  # (out,)
    bias_rho: np.ndarray  # (out,)
    prior_mean: float = 0.0
    prior_sigma: float = 1.0

    @property
    def in_dim(self) -> int:
        return self.weight_mu.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight_mu.shape[1]

    def weight_sigma(self) -> np.ndarray:
        return softplus(self.weight_rho)

    def bias_sigma(self) -> np.ndarray:
        return softplus(self.bias_rho)


@dataclass
class VariationalHead:
    """Stack of variational dense layers with rectifiers between them."""

    layers: list[VariationalDenseLayer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(
                    f"layer dims do not chain: {a.out_dim} -> {b.in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list: per layer weight_mu, weight_rho, bias_mu, bias_rho."""
        out = []
        for l in self.layers:
            out.extend([l.weight_mu, l.weight_rho, l.bias_mu, l.bias_rho])
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        if len(params) != 4 * len(self.layers):
            raise ShapeError(f"expected {4 * len(self.layers)} arrays, got {len(params)}")
        for i, l in enumerate(self.layers):
            l.weight_mu, l.weight_rho, l.bias_mu, l.bias_rho = (
                np.array(p, dtype=np.float64) for p in params[4 * i : 4 * i + 4]
            )


@dataclass
class DenseLayer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class DeterministicHead:
    """Point-weight stack with inverted dropout after every layer."""

    layers: list[DenseLayer]
    dropout_p: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.dropout_p < 1.0):
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out.extend([l.weight, l.bias])
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * len(self.layers):
            raise ShapeError(f"expected {2 * len(self.layers)} arrays, got {len(params)}")
        for i, l in enumerate(self.layers):
            l.weight, l.bias = (np.array(p, dtype=np.float64) for p in params[2 * i : 2 * i + 2])


def init_variational_head(
    dims: list[int],
    init_seed: int,
    prior_sigma: float = 1.0,
    prior_mean: float = 0.0,
) -> VariationalHead:
    """Build the three-layer variational classifier for dims [in, h1, h2, K].

    weight_mu ~ N(0, 2/in_dim) per layer; every rho starts at
    softplus_inv(0.05 * prior_sigma); bias means start at zero.
    """
    if len(dims) != 4:
        raise ConfigError(f"dims must be [in, h1, h2, K], got {dims}")
    return _build_variational(dims, init_seed, prior_sigma, prior_mean)


def _build_variational(
    dims: list[int], init_seed: int, prior_sigma: float, prior_mean: float
) -> VariationalHead:
    if any(d <= 0 for d in dims):
        raise ConfigError(f"all dims must be positive, got {dims}")
    if prior_sigma <= 0:
        raise ConfigError(f"prior_sigma must be > 0, got {prior_sigma}")
    stream = RngStream(init_seed, _INIT_SID)
    rho0 = float(softplus_inv(0.05 * prior_sigma))
    layers = []
    for li, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        c = stream.child(li)
        layers.append(
            VariationalDenseLayer(
                weight_mu=c.normal(d_in, d_out) * np.sqrt(2.0 / d_in),
                weight_rho=np.full((d_in, d_out), rho0),
                bias_mu=np.zeros(d_out),
                bias_rho=np.full(d_out, rho0),
                prior_mean=prior_mean,
                prior_sigma=prior_sigma,
            )
        )
    return VariationalHead(layers)


def init_deterministic_head(
    dims: list[int], init_seed: int, dropout_p: float = 0.5
) -> DeterministicHead:
    """Point-weight counterpart with the same topology and init scale."""
    if len(dims) != 4:
        raise ConfigError(f"dims must be [in, h1, h2, K], got {dims}")
    if any(d <= 0 for d in dims):
        raise ConfigError(f"all dims must be positive, got {dims}")
    stream = RngStream(init_seed, _INIT_SID)
    layers = [
        DenseLayer(
            weight=stream.child(li).normal(d_in, d_out) * np.sqrt(2.0 / d_in),
            bias=np.zeros(d_out),
        )
        for li, (d_in, d_out) in enumerate(zip(dims, dims[1:]))
    ]
    return DeterministicHead(layers, dropout_p=dropout_p)


def kl_to_prior(head: VariationalHead) -> float:
    """Closed-form KL(q || prior) summed over every weight and bias.

    Per entry: ln(sigma_p/sigma) + (sigma^2 + (mu - mu_p)^2) / (2 sigma_p^2) - 1/2.
    """
    total = 0.0
    for l in head.layers:
        for mu, sigma in ((l.weight_mu, l.weight_sigma()), (l.bias_mu, l.bias_sigma())):
            total += float(
                np.sum(
                    np.log(l.prior_sigma / sigma)
                    + (sigma**2 + (mu - l.prior_mean) ** 2) / (2.0 * l.prior_sigma**2)
                    - 0.5
                )
            )
    return total


def _check_input(head, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {x.shape}")
    if x.shape[1] != head.in_dim:
        raise ShapeError(f"batch has {x.shape[1]} features, head expects {head.in_dim}")
    return x


def flipout_layer_noise(layer: VariationalDenseLayer, batch_size: int, stream: RngStream):
    """Noise block for one Flipout pass: shared eps, per-example signs, bias eps."""
    c = stream.clone()
    eps_w = c.normal(layer.in_dim, layer.out_dim)
    sign_in = c.rademacher(batch_size, layer.in_dim)
    sign_out = c.rademacher(batch_size, layer.out_dim)
    eps_b = c.normal(batch_size, layer.out_dim)
    return eps_w, sign_in, sign_out, eps_b


def forward_flipout(head: VariationalHead, batch, stream: RngStream) -> np.ndarray:
    """Training-time stochastic forward pass returning final-layer logits.

    Each example sees a pseudo-independent weight perturbation: one Gaussian
    draw per layer is shared across the minibatch and sign-flipped per
    example on both sides; bias noise is drawn per example directly.
    """
    x = _check_input(head, batch)
    h = x
    last = len(head.layers) - 1
    for li, layer in enumerate(head.layers):
        eps_w, s_in, s_out, eps_b = flipout_layer_noise(layer, h.shape[0], stream.child(li))
        mean_term = h @ layer.weight_mu + layer.bias_mu
        perturb = ((h * s_in) @ (layer.weight_sigma() * eps_w)) * s_out
        z = mean_term + perturb + layer.bias_sigma() * eps_b
        h = z if li == last else relu(z)
    return h


def forward_mean(head: VariationalHead, batch) -> np.ndarray:
    """Logits of the mu-only (noise-free) forward pass."""
    x = _check_input(head, batch)
    h = x
    last = len(head.layers) - 1
    for li, layer in enumerate(head.layers):
        z = h @ layer.weight_mu + layer.bias_mu
        h = z if li == last else relu(z)
    return h


def forward_sampled(head: VariationalHead, batch, stream: RngStream) -> np.ndarray:
    """One stochastic pass with directly sampled weights; softmax output.

    Samples a full weight matrix and bias per layer once for the call, so
    every row of the batch shares the same weight draw.
    """
    x = _check_input(head, batch)
    h = x
    last = len(head.layers) - 1
    for li, layer in enumerate(head.layers):
        c = stream.child(li)
        w = layer.weight_mu + layer.weight_sigma() * c.normal(layer.in_dim, layer.out_dim)
        b = layer.bias_mu + layer.bias_sigma() * c.normal(layer.out_dim)
        z = h @ w + b
        h = z if li == last else relu(z)
    return softmax_rows(h)


def dropout_masks(head: DeterministicHead, batch_size: int, stream: RngStream) -> list[np.ndarray]:
    """Keep masks (1.0 keep / 0.0 drop) for one pass, one per layer."""
    masks = []
    for li, layer in enumerate(head.layers):
        u = stream.child(li).uniform(batch_size, layer.out_dim)
        masks.append((u >= head.dropout_p).astype(np.float64))
    return masks


def forward_deterministic(
    head: DeterministicHead,
    batch,
    dropout_active: bool,
    stream: RngStream | None = None,
) -> np.ndarray:
    """Softmax output of the point-weight head.

    With dropout active, every post-activation unit (including final-layer
    logits) is zeroed with probability p and survivors are scaled by
    1/(1-p).  Inactive dropout gives the plain forward pass.
    """
    x = _check_input(head, batch)
    if dropout_active and head.dropout_p > 0.0:
        if stream is None:
            raise ConfigError("dropout_active=True requires an RNG stream")
        masks = dropout_masks(head, x.shape[0], stream)
    else:
        masks = None
    logits = _deterministic_logits(head, x, masks)
    return softmax_rows(logits)


def _deterministic_logits(
    head: DeterministicHead, x: np.ndarray, masks: list[np.ndarray] | None
) -> np.ndarray:
    keep = 1.0 - head.dropout_p
    h = x
    last = len(head.layers) - 1
    for li, layer in enumerate(head.layers):
        z = h @ layer.weight + layer.bias
        h = z if li == last else relu(z)
        if masks is not None:
            h = h * masks[li] / keep
    return h


# ---------------------------------------------------------------------------
# Checkpoints: magic, kind byte, dims, float32 parameter blocks, JSON trailer.


def save_checkpoint(head, path, metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    if isinstance(head, VariationalHead):
        kind = _KIND_VARIATIONAL
        dims = [head.in_dim] + [l.out_dim for l in head.layers]
        blocks = head.parameters()
        meta.setdefault("prior_mean", head.layers[0].prior_mean)
        meta.setdefault("prior_sigma", head.layers[0].prior_sigma)
    elif isinstance(head, DeterministicHead):
        kind = _KIND_DETERMINISTIC
        dims = [head.in_dim] + [l.out_dim for l in head.layers]
        blocks = head.parameters()
        meta.setdefault("dropout_p", head.dropout_p)
    else:
        raise ConfigError(f"cannot checkpoint object of type {type(head).__name__}")
    meta.setdefault("epoch", 0)
    meta.setdefault("best_val_loss", None)

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<BI", kind, len(dims) - 1))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        for arr in blocks:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        trailer = json.dumps(meta, sort_keys=True).encode()
        f.write(struct.pack("<I", len(trailer)))
        f.write(trailer)


def load_checkpoint(path, expect_kind: str | None = None):
    """Load a head checkpoint; returns (head, metadata).

    ``expect_kind`` ('variational' or 'deterministic') turns a mismatching
    kind byte into an error instead of a surprise type.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 13:
        raise DataLengthError(f"{path}: checkpoint shorter than its fixed header")
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:8]!r}, expected {CHECKPOINT_MAGIC!r}")
    kind, n_layers = struct.unpack("<BI", blob[8:13])
    if kind not in (_KIND_DETERMINISTIC, _KIND_VARIATIONAL):
        raise DataFormatError(f"{path}: unknown head kind byte {kind}")
    kind_name = "variational" if kind == _KIND_VARIATIONAL else "deterministic"
    if expect_kind is not None and expect_kind != kind_name:
        raise DataFormatError(f"{path}: checkpoint holds a {kind_name} head, expected {expect_kind}")
    off = 13
    dims = struct.unpack(f"<{n_layers + 1}I", blob[off : off + 4 * (n_layers + 1)])
    off += 4 * (n_layers + 1)

    def take(shape) -> np.ndarray:
        nonlocal off
        n = int(np.prod(shape))
        end = off + 4 * n
        if end > len(blob):
            raise DataLengthError(f"{path}: truncated parameter block at byte {off}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off = end
        return arr.astype(np.float64)

    per_layer = 4 if kind == _KIND_VARIATIONAL else 2
    raw_layers = []
    for d_in, d_out in zip(dims, dims[1:]):
        shapes = [(d_in, d_out), (d_in, d_out), (d_out,), (d_out,)] if per_layer == 4 else [
            (d_in, d_out),
            (d_out,),
        ]
        raw_layers.append([take(s) for s in shapes])
    if off + 4 > len(blob):
        raise DataLengthError(f"{path}: missing metadata trailer")
    (trailer_len,) = struct.unpack("<I", blob[off : off + 4])
    off += 4
    if off + trailer_len != len(blob):
        raise DataLengthError(
            f"{path}: trailer length {trailer_len} inconsistent with file size"
        )
    meta = json.loads(blob[off : off + trailer_len].decode())

    if kind == _KIND_VARIATIONAL:
        head = VariationalHead(
            [
                VariationalDenseLayer(
                    weight_mu=w_mu,
                    weight_rho=w_rho,
                    bias_mu=b_mu,
                    bias_rho=b_rho,
                    prior_mean=float(meta.get("prior_mean", 0.0)),
                    prior_sigma=float(meta.get("prior_sigma", 1.0)),
                )
                for w_mu, w_rho, b_mu, b_rho in raw_layers
            ]
        )
    else:
        head = DeterministicHead(
            [DenseLayer(weight=w, bias=b) for w, b in raw_layers],
            dropout_p=float(meta.get("dropout_p", 0.0)),
        )
    return head, meta
