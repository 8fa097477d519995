import math

import numpy as np
import pytest

from core import BatchError, ConfigError, DomainError
from learncore import (
    GemParams,
    ProjectorShape,
    ScheduleConfig,
    SmoothConfig,
    TripletConfig,
    ce_label_smooth,
    check_projector,
    gem_pool,
    learning_rate,
    lr_ratio,
    pk_sample,
    schedule_rows,
    triplet_hard_loss,
)


def central_difference(fn, x, h=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (fn(up) - fn(down)) / (2 * h)
    return grad


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def mining_slack(x, labels, cfg):
    """Smallest distance from a tie in the mined pairs or from a hinge kink, over all anchors."""
    if cfg.normalize:
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
    dist = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
    same = labels[:, None] == labels[None, :]
    slack = np.inf
    for a in range(len(x)):
        pos = np.sort(dist[a][same[a] & (np.arange(len(x)) != a)])[::-1]
        neg = np.sort(dist[a][~same[a]])
        slack = min(slack, pos[0] - pos[1], neg[1] - neg[0], abs(pos[0] - neg[0] + cfg.margin))
    return slack


class TestSchedule:
    @pytest.mark.parametrize("epoch, expected", [
        (0, 0.01),
        (2, 0.99 * 2 / 5 + 0.01),
        (5, 1.0),
        (7, 1.0),
        (10, 1.0),
        (17.5, 0.5),
        (24.999, 0.5 * (math.cos(14.999 / 15 * math.pi) + 1)),
    ])
    def test_matches_closed_form(self, epoch, expected):
        assert lr_ratio(epoch) == pytest.approx(expected, abs=1e-12)

    def test_continuity_at_boundaries(self):
        eps = 1e-12
        assert lr_ratio(5 - eps) == pytest.approx(lr_ratio(5), abs=1e-11)
        assert lr_ratio(10 - eps) == pytest.approx(lr_ratio(10), abs=1e-12)
        assert lr_ratio(25 - 1e-9) < 1e-12

    @pytest.mark.parametrize("epoch", [-0.1, 25, 30])
    def test_out_of_range(self, epoch):
        with pytest.raises(DomainError):
            lr_ratio(epoch)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            ScheduleConfig(warmup_end=10, hold_end=5)

    def test_learning_rate_scales_ratio(self):
        assert learning_rate(0) == pytest.approx(3.5e-4 * 0.01)
        rows = schedule_rows()
        assert len(rows) == 25
        assert all(ratio == lr_ratio(e) for e, ratio, _ in rows)


class TestGem:
    def test_p1_is_mean(self):
        x = np.array([[1.0, 2.0, 6.0]])
        np.testing.assert_allclose(gem_pool(x, GemParams(p=1.0)), [3.0], rtol=1e-15)

    def test_constant_cells(self):
        assert gem_pool(np.full(9, 0.7), GemParams(p=4.0)) == pytest.approx(0.7)

    def test_worked_value(self):
        assert gem_pool([1e-6, 2.0], GemParams(p=2.0)) == pytest.approx(math.sqrt(2), abs=1e-5)

    def test_bounds_and_monotonicity(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            x = rng.uniform(0.01, 5.0, size=int(rng.integers(1, 20)))
            p_lo, p_hi = sorted(rng.uniform(1.0, 8.0, 2))
            lo, hi = gem_pool(x, GemParams(p=p_lo)), gem_pool(x, GemParams(p=p_hi))
            n = len(x)
            assert x.max() * (1 / n) ** (1 / p_hi) <= hi + 1e-12
            assert hi <= x.max() + 1e-12
            assert lo <= hi + 1e-12

    def test_rejects_nonpositive_p(self):
        with pytest.raises(ConfigError):
            GemParams(p=0.0)


class TestTripletLoss:
    def test_inactive_hinges(self):
        loss, grad = triplet_hard_loss([0.0, 0.1, 1.0, 0.9], ["A", "A", "B", "B"], TripletConfig(0.3))
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros(4))

    def test_worked_batch(self):
        loss, _ = triplet_hard_loss([0.0, 1.0, 0.5, 0.6], ["A", "A", "B", "B"], TripletConfig(0.3))
        assert loss == pytest.approx(0.425)

    def test_zero_margin_separated(self):
        loss, _ = triplet_hard_loss([[0, 0], [0, 0.1], [5, 5], [5, 5.1]], [0, 0, 1, 1], TripletConfig(0.0))
        assert loss == 0.0

    def test_singleton_identity_rejected(self):
        with pytest.raises(BatchError):
            triplet_hard_loss([0.0, 1.0, 2.0], [0, 0, 1])

    def test_single_identity_rejected(self):
        with pytest.raises(BatchError):
            triplet_hard_loss([0.0, 1.0], [0, 0])

    @pytest.mark.parametrize("normalize", [False, True])
    def test_gradient_matches_finite_differences(self, normalize):
        rng = np.random.default_rng(42)
        labels = np.repeat(np.arange(3), 3)
        cfg = TripletConfig(margin=1.0, normalize=normalize)
        checked = 0
        for _ in range(60):
            x = rng.normal(size=(9, 4))
            if mining_slack(x, labels, cfg) < 1e-3:
                continue
            _, grad = triplet_hard_loss(x, labels, cfg)
            numeric = central_difference(lambda v: triplet_hard_loss(v, labels, cfg)[0], x)
            assert relative_error(grad, numeric) < 1e-4
            checked += 1
        assert checked >= 20


class TestLabelSmoothing:
    def test_uniform_logits(self):
        cfg = SmoothConfig(classes=5, epsilon=0.3)
        loss, _ = ce_label_smooth(np.zeros(5), 2, cfg)
        assert loss == pytest.approx(math.log(5))

    def test_zero_epsilon_is_cross_entropy(self):
        z = np.array([2.0, -1.0, 0.5])
        loss, _ = ce_label_smooth(z, 0, SmoothConfig(classes=3, epsilon=0.0))
        assert loss == pytest.approx(-(z[0] - np.log(np.exp(z).sum())))

    def test_worked_value(self):
        loss, _ = ce_label_smooth(np.array([math.log(3), 0.0]), 0, SmoothConfig(classes=2, epsilon=0.1))
        expected = -(0.95 * math.log(0.75) + 0.05 * math.log(0.25))
        assert loss == pytest.approx(expected, abs=1e-12)
        assert loss == pytest.approx(0.34261, abs=1e-5)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        cfg = SmoothConfig(classes=6, epsilon=0.1)
        for _ in range(100):
            z = rng.normal(scale=2.0, size=6)
            target = int(rng.integers(6))
            _, grad = ce_label_smooth(z, target, cfg)
            numeric = central_difference(lambda v: ce_label_smooth(v, target, cfg)[0], z)
            assert relative_error(grad, numeric) < 1e-4

    def test_loss_bounded_by_target_entropy(self):
        cfg = SmoothConfig(classes=4, epsilon=0.2)
        q = np.full(4, 0.05)
        q[1] += 0.8
        entropy = -np.sum(q * np.log(q))
        loss, grad = ce_label_smooth(np.log(q), 1, cfg)
        assert loss == pytest.approx(entropy, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)
        rng = np.random.default_rng(1)
        for _ in range(50):
            assert ce_label_smooth(rng.normal(size=4), 1, cfg)[0] >= entropy - 1e-12

    def test_needs_two_classes(self):
        with pytest.raises(ConfigError):
            SmoothConfig(classes=1)


class TestPkSampling:
    def test_full_batch(self):
        labels = np.repeat(np.arange(40), 5)
        batch = pk_sample(labels, 32, 4, rng=0)
        assert len(batch) == 128
        assert len(set(batch)) == 128
        _, counts = np.unique(labels[batch], return_counts=True)
        assert len(counts) == 32 and set(counts) == {4}

    def test_exhaustion(self):
        assert sorted(pk_sample(["a", "a"], 1, 2, rng=0)) == [0, 1]

    def test_deterministic_for_seed(self):
        labels = np.repeat(np.arange(10), 4)
        assert pk_sample(labels, 4, 2, rng=5) == pk_sample(labels, 4, 2, rng=5)

    def test_insufficient_identities(self):
        with pytest.raises(BatchError):
            pk_sample(np.repeat(np.arange(3), 4), 4, 4, rng=0)


class TestProjector:
    def test_shape_contract(self):
        pytest.importorskip("torch")
        assert check_projector(ProjectorShape(), batch=2) == (2, 8192)

    def test_hidden_layers(self):
        pytest.importorskip("torch")
        assert check_projector(ProjectorShape(16, 64, hidden=(32,)), batch=3) == (3, 64)

    def test_must_widen(self):
        with pytest.raises(ConfigError):
            ProjectorShape(8192, 2048)
