import math

import numpy as np
import pytest

from bayesfuse.data import SplitSpec, SynthModality, SynthSpec, generate_synthetic, split
from bayesfuse.errors import ConfigError, ShapeError
from bayesfuse.heads import (
    DenseLayer,
    DeterministicHead,
    VariationalDenseLayer,
    VariationalHead,
    _deterministic_logits,
    dropout_masks,
    init_deterministic_head,
    init_variational_head,
    softplus_inv,
)
from bayesfuse.linalg import RngStream
from bayesfuse.training import (
    TrainConfig,
    cross_entropy_loss,
    elbo_loss,
    grad_cross_entropy,
    grad_elbo,
    plateau_scheduler_step,
    sgd_momentum_step,
    train,
)

FD_STEP = 1e-4


def finite_difference_grads(loss_fn, params):
    """Central-difference oracle over every entry of every parameter array."""
    grads = [np.zeros_like(p) for p in params]
    for p, g in zip(params, grads):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = p[ix]
            p[ix] = orig + FD_STEP
            up = loss_fn()
            p[ix] = orig - FD_STEP
            down = loss_fn()
            p[ix] = orig
            g[ix] = (up - down) / (2 * FD_STEP)
    return grads


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def gradcheck_head():
    head = init_variational_head([3, 4, 4, 2], init_seed=11)
    for li, l in enumerate(head.layers):
        l.weight_rho = l.weight_rho + RngStream(5, li).normal(*l.weight_rho.shape) * 0.3
    return head


class TestElboLoss:
    def test_perfect_fit_limit(self):
        # sigma ~ 0 and a mu-forward that puts ~all probability on the label
        layer = VariationalDenseLayer(
            weight_mu=np.array([[30.0, -30.0]]),
            weight_rho=np.full((1, 2), softplus_inv(1e-12)),
            bias_mu=np.zeros(2),
            bias_rho=np.full(2, softplus_inv(1e-12)),
        )
        head = VariationalHead([layer])
        x = np.array([[1.0]])
        terms = elbo_loss(head, x, np.array([0]), kl_scale=0.0, stream=RngStream(1))
        assert terms.loss == pytest.approx(0.0, abs=1e-9)

    def test_uniform_logits_k4(self):
        layer = VariationalDenseLayer(
            weight_mu=np.zeros((3, 4)),
            weight_rho=np.full((3, 4), softplus_inv(1e-12)),
            bias_mu=np.zeros(4),
            bias_rho=np.full(4, softplus_inv(1e-12)),
        )
        head = VariationalHead([layer])
        x = RngStream(2).normal(6, 3)
        y = np.array([0, 1, 2, 3, 0, 1])
        terms = elbo_loss(head, x, y, kl_scale=0.0, stream=RngStream(1))
        assert terms.loss == pytest.approx(math.log(4.0), abs=1e-9)
        assert terms.kl == 0.0

    def test_prior_matching_adds_zero_kl(self):
        layer = VariationalDenseLayer(
            weight_mu=np.zeros((3, 4)),
            weight_rho=np.full((3, 4), softplus_inv(1.0)),
            bias_mu=np.zeros(4),
            bias_rho=np.full(4, softplus_inv(1.0)),
        )
        head = VariationalHead([layer])
        x = np.zeros((5, 3))  # zero inputs: logits = bias noise, uniform in expectation?
        # zero input rows make the weight perturbation vanish; bias noise remains,
        # so pin bias sigma tiny and rely on weight KL being exactly zero
        layer.bias_rho = np.full(4, softplus_inv(1e-12))
        y = np.array([0, 1, 2, 3, 0])
        terms = elbo_loss(head, x, y, kl_scale=1.0, stream=RngStream(1))
        weight_kl = 0.0  # weights exactly at the prior
        bias_kl = 4 * (math.log(1.0 / 1e-12) + (1e-24) / 2 - 0.5)
        assert terms.nll == pytest.approx(math.log(4.0), abs=1e-9)
        assert terms.kl == pytest.approx(weight_kl + bias_kl, rel=1e-9)

    def test_decomposition_exact(self):
        head = gradcheck_head()
        x = RngStream(2).normal(6, 3)
        y = np.array([0, 1, 0, 1, 1, 0])
        terms = elbo_loss(head, x, y, kl_scale=0.7, stream=RngStream(3))
        assert terms.loss == terms.nll + terms.kl

    def test_empty_batch_rejected(self):
        head = gradcheck_head()
        with pytest.raises(ConfigError):
            elbo_loss(head, np.zeros((0, 3)), np.zeros(0, dtype=int), 1.0, RngStream(0))


class TestGradElbo:
    def test_matches_finite_differences(self):
        head = gradcheck_head()
        x = RngStream(2, 3).normal(6, 3)
        y = np.array([0, 1, 0, 1, 1, 0])
        stream = RngStream(9, 4)
        _, grads = grad_elbo(head, x, y, kl_scale=0.37, stream=stream)
        numeric = finite_difference_grads(
            lambda: elbo_loss(head, x, y, 0.37, stream).loss, head.parameters()
        )
        assert max_relative_error(grads, numeric) < 1e-4

    def test_kl_scale_zero_rho_grads_only_from_likelihood(self):
        head = gradcheck_head()
        x = RngStream(2).normal(6, 3)
        y = np.array([0, 1, 0, 1, 1, 0])
        stream = RngStream(9)
        _, g0 = grad_elbo(head, x, y, kl_scale=0.0, stream=stream)
        _, g1 = grad_elbo(head, x, y, kl_scale=1.0, stream=stream)
        for li, l in enumerate(head.layers):
            sig = l.weight_sigma()
            kl_path = (-1.0 / sig + sig) * (1.0 / (1.0 + np.exp(-l.weight_rho)))
            np.testing.assert_allclose(g1[4 * li + 1] - g0[4 * li + 1], kl_path, atol=1e-12)

    def test_kl_mu_gradient_single_weight(self):
        from tests_helpers_inline import noop  # noqa: F401  (placeholder never used)

    def test_kl_scale_doubling_doubles_kl_term(self):
        head = gradcheck_head()
        x = RngStream(2).normal(6, 3)
        y = np.array([0, 1, 0, 1, 1, 0])
        t1, g1 = grad_elbo(head, x, y, kl_scale=0.5, stream=RngStream(7))
        t2, g2 = grad_elbo(head, x, y, kl_scale=1.0, stream=RngStream(7))
        assert t2.kl == pytest.approx(2.0 * t1.kl, rel=1e-12)
        # gradient difference from the KL path also doubles
        _, g0 = grad_elbo(head, x, y, kl_scale=0.0, stream=RngStream(7))
        for a, b, z in zip(g1, g2, g0):
            np.testing.assert_allclose(b - z, 2.0 * (a - z), atol=1e-10)


class TestGradCrossEntropy:
    def test_matches_finite_differences(self):
        head = init_deterministic_head([3, 4, 4, 2], init_seed=12, dropout_p=0.4)
        x = RngStream(2, 3).normal(6, 3)
        y = np.array([0, 1, 0, 1, 1, 0])
        stream = RngStream(21, 8)
        loss, grads = grad_cross_entropy(head, x, y, stream)

        def loss_at():
            masks = dropout_masks(head, x.shape[0], stream)
            logits = _deterministic_logits(head, x, masks)
            z = logits - logits.max(axis=1, keepdims=True)
            log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            return -float(log_probs[np.arange(len(y)), y].mean())

        numeric = finite_difference_grads(loss_at, head.parameters())
        assert max_relative_error(grads, numeric) < 1e-4

    def test_softmax_ce_identity_last_layer(self):
        head = init_deterministic_head([3, 4, 4, 2], init_seed=12, dropout_p=0.0)
        x = RngStream(2).normal(6, 3)
        y = np.array([0, 1, 0, 1, 1, 0])
        _, grads = grad_cross_entropy(head, x, y, RngStream(0))
        masks = None
        logits = _deterministic_logits(head, x, masks)
        # recompute the final hidden activations
        h = x
        for li, layer in enumerate(head.layers[:-1]):
            h = np.maximum(h @ layer.weight + layer.bias, 0.0)
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        onehot = np.zeros_like(probs)
        onehot[np.arange(len(y)), y] = 1.0
        expected = h.T @ (probs - onehot) / len(y)
        np.testing.assert_allclose(grads[-2], expected, atol=1e-12)

    def test_zero_input_batch(self):
        head = init_deterministic_head([3, 4, 4, 2], init_seed=12, dropout_p=0.0)
        x = np.zeros((4, 3))
        y = np.array([0, 1, 0, 1])
        _, grads = grad_cross_entropy(head, x, y, RngStream(0))
        np.testing.assert_array_equal(grads[0], 0.0)
        assert np.abs(grads[1]).max() > 0.0


class TestCrossEntropyLoss:
    def test_one_hot_correct(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert cross_entropy_loss(probs, np.array([0, 1])) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_k10(self):
        probs = np.full((3, 10), 0.1)
        assert cross_entropy_loss(probs, np.array([0, 5, 9])) == pytest.approx(
            math.log(10.0), abs=1e-12
        )

    def test_analytic_value(self):
        probs = np.array([[0.25, 0.75]])
        assert cross_entropy_loss(probs, np.array([1])) == pytest.approx(
            -math.log(0.75), abs=1e-12
        )

    def test_label_out_of_range(self):
        with pytest.raises(ConfigError):
            cross_entropy_loss(np.array([[0.5, 0.5]]), np.array([2]))

    def test_clamp_at_boundary(self):
        probs = np.array([[1.0, 0.0]])
        val = cross_entropy_loss(probs, np.array([1]))
        assert val == pytest.approx(-math.log(1e-12))


class TestSgdMomentum:
    def test_no_momentum_is_plain_step(self):
        p = [np.array([1.0, 2.0])]
        g = [np.array([0.5, -0.5])]
        v = [np.zeros(2)]
        new_p, new_v = sgd_momentum_step(p, g, v, learning_rate=0.1, momentum=0.0)
        np.testing.assert_allclose(new_p[0], [0.95, 2.05])
        np.testing.assert_allclose(new_v[0], g[0])

    def test_two_step_hand_recursion(self):
        p, v = [np.array([0.0])], [np.array([0.0])]
        g = [np.array([1.0])]
        p, v = sgd_momentum_step(p, g, v, 1.0, 0.9)
        p, v = sgd_momentum_step(p, g, v, 1.0, 0.9)
        assert p[0][0] == pytest.approx(-2.9)

    def test_zero_grad_zero_velocity_fixed_point(self):
        p = [np.array([3.0])]
        new_p, new_v = sgd_momentum_step(p, [np.zeros(1)], [np.zeros(1)], 0.5, 0.9)
        np.testing.assert_array_equal(new_p[0], p[0])
        np.testing.assert_array_equal(new_v[0], 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_momentum_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1, 0.9)


class TestPlateauScheduler:
    def test_improving_run_keeps_rate(self):
        assert plateau_scheduler_step([1.0, 0.9, 0.8], 2, 0.1, 0.05) == 0.05

    def test_constant_losses_decay(self):
        assert plateau_scheduler_step([1.0, 1.0, 1.0], 2, 0.1, 0.05) == pytest.approx(0.005)

    def test_tiny_improvement_counts_as_plateau(self):
        losses = [1.0, 1.0 - 1e-5, 1.0 - 2e-5]
        assert plateau_scheduler_step(losses, 2, 0.1, 0.05) == pytest.approx(0.005)

    def test_improvement_above_threshold_resets(self):
        losses = [1.0, 1.0, 0.5]
        assert plateau_scheduler_step(losses, 2, 0.1, 0.05) == 0.05

    def test_patience_validated(self):
        with pytest.raises(ConfigError):
            plateau_scheduler_step([1.0], 0, 0.1, 0.05)


def separable_dataset(seed=5):
    spec = SynthSpec(
        num_classes=4,
        samples_per_class=60,
        modalities=(SynthModality("m", 12, 6.0, 0.5, 0.0),),
        seed=seed,
    )
    ds = generate_synthetic(spec)
    return split(ds, SplitSpec(0.7, 0.15, 0.15, seed=seed))


class TestTrainLoop:
    def test_variational_reaches_high_accuracy(self):
        tr, va, te = separable_dataset()
        head = init_variational_head([12, 16, 16, 4], init_seed=0)
        cfg = TrainConfig(learning_rate=0.01, batch_size=32, max_epochs=30, seed=1)
        head, history = train(head, tr, va, cfg)
        assert history.records[-1].val_top1 >= 0.95
        assert len(history.records) == 30

    def test_deterministic_reaches_high_accuracy(self):
        tr, va, te = separable_dataset()
        head = init_deterministic_head([12, 16, 16, 4], init_seed=0, dropout_p=0.2)
        cfg = TrainConfig(learning_rate=0.01, batch_size=32, max_epochs=30, seed=1)
        head, history = train(head, tr, va, cfg)
        assert history.records[-1].val_top1 >= 0.95

    def test_loss_mostly_decreases_early(self):
        tr, va, te = separable_dataset()
        head = init_variational_head([12, 16, 16, 4], init_seed=0)
        cfg = TrainConfig(learning_rate=0.01, batch_size=32, max_epochs=5, seed=1)
        _, history = train(head, tr, va, cfg)
        losses = [r.train_loss for r in history.records]
        drops = sum(1 for a, b in zip(losses, losses[1:]) if b <= a)
        assert drops >= 3  # non-increasing in most of the first transitions

    def test_bit_reproducible(self):
        tr, va, te = separable_dataset()
        cfg = TrainConfig(learning_rate=0.01, batch_size=32, max_epochs=8, seed=42)
        h1, hist1 = train(init_variational_head([12, 16, 16, 4], init_seed=0), tr, va, cfg)
        h2, hist2 = train(init_variational_head([12, 16, 16, 4], init_seed=0), tr, va, cfg)
        assert hist1.records == hist2.records
        for a, b in zip(h1.parameters(), h2.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_dim_mismatch_rejected(self):
        tr, va, te = separable_dataset()
        head = init_variational_head([13, 16, 16, 4], init_seed=0)
        with pytest.raises(ConfigError):
            train(head, tr, va, TrainConfig(seed=0))

    def test_history_csv_layout(self, tmp_path):
        tr, va, te = separable_dataset()
        head = init_variational_head([12, 16, 16, 4], init_seed=0)
        cfg = TrainConfig(learning_rate=0.01, batch_size=32, max_epochs=2, seed=1)
        _, history = train(head, tr, va, cfg)
        history.to_csv(tmp_path / "hist.csv")
        lines = (tmp_path / "hist.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,nll,kl,val_loss,val_top1,lr"
        assert len(lines) == 3
