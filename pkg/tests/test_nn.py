import numpy as np
import pytest

from dpfedsim import nn
from dpfedsim.rng import philox


def random_net(rng, max_dim=200):
    """Random small architecture plus matching parameters and batch."""
    while True:
        depth = rng.integers(2, 5)
        widths = tuple(int(rng.integers(2, 12)) for _ in range(depth))
        arch = nn.MlpArchitecture(widths)
        if arch.param_count <= max_dim:
            break
    w = rng.normal(scale=0.7, size=arch.param_count)
    n = int(rng.integers(1, 9))
    batch = nn.Batch(
        rng.normal(size=(n, arch.input_dim)),
        rng.integers(0, arch.output_dim, size=n),
        arch.output_dim,
    )
    return arch, w, batch


def finite_difference_grad(w, arch, batch, step=1e-5):
    grad = np.zeros_like(w)
    for i in range(len(w)):
        wp, wm = w.copy(), w.copy()
        wp[i] += step
        wm[i] -= step
        lp, _ = nn.loss_and_grad(wp, arch, batch)
        lm, _ = nn.loss_and_grad(wm, arch, batch)
        grad[i] = (lp - lm) / (2 * step)
    return grad


class TestArchitecture:
    def test_param_count(self):
        assert nn.MlpArchitecture((2, 3, 2)).param_count == 17

    def test_bad_widths(self):
        with pytest.raises(ValueError):
            nn.MlpArchitecture((0, 3))
        with pytest.raises(ValueError):
            nn.MlpArchitecture((5,))

    def test_layer_slices_cover_vector(self):
        arch = nn.MlpArchitecture((4, 7, 3, 2))
        slices = arch.layer_slices()
        assert slices[0][0] == 0
        assert slices[-1][2] == arch.param_count
        for (_, _, end, _, _), (start, _, _, _, _) in zip(slices, slices[1:]):
            assert end == start


class TestInit:
    def test_deterministic(self):
        arch = nn.MlpArchitecture((5, 4, 3))
        a = nn.init_params(arch, 42)
        b = nn.init_params(arch, 42)
        assert np.array_equal(a, b)

    def test_seed_changes_values(self):
        arch = nn.MlpArchitecture((5, 4, 3))
        assert not np.array_equal(nn.init_params(arch, 1), nn.init_params(arch, 2))

    def test_scale(self):
        arch = nn.MlpArchitecture((100, 50))
        w = nn.init_params(arch, 0)
        a = np.sqrt(6.0 / 150)
        assert np.all(np.abs(w) <= a)
        assert np.all(np.isfinite(w))


class TestLossAndGrad:
    def test_uniform_logits_loss(self):
        arch = nn.MlpArchitecture((3, 4, 5))
        batch = nn.Batch(np.ones((1, 3)), np.array([2]), 5)
        loss, _ = nn.loss_and_grad(np.zeros(arch.param_count), arch, batch)
        assert loss == pytest.approx(np.log(5), abs=1e-12)

    def test_matches_finite_differences(self):
        rng = philox(7)
        arch, w, batch = random_net(rng)
        _, grad = nn.loss_and_grad(w, arch, batch)
        fd = finite_difference_grad(w, arch, batch)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-8)

    def test_duplication_invariance(self):
        rng = philox(9)
        arch, w, batch = random_net(rng)
        doubled = nn.Batch(
            np.tile(batch.inputs, (2, 1)), np.tile(batch.labels, 2), batch.num_classes
        )
        l1, g1 = nn.loss_and_grad(w, arch, batch)
        l2, g2 = nn.loss_and_grad(w, arch, doubled)
        assert l2 == pytest.approx(l1, rel=1e-13)
        np.testing.assert_allclose(g2, g1, rtol=1e-12, atol=1e-15)

    def test_permutation_invariance(self):
        # gemm accumulates in memory order; a row permutation can move the
        # reductions by a few ulps, so the check is near-exact, not bitwise.
        rng = philox(11)
        arch = nn.MlpArchitecture((6, 5, 4))
        w = rng.normal(size=arch.param_count)
        batch = nn.Batch(rng.normal(size=(10, 6)), rng.integers(0, 4, 10), 4)
        perm = rng.permutation(10)
        shuffled = nn.Batch(batch.inputs[perm], batch.labels[perm], 4)
        l1, g1 = nn.loss_and_grad(w, arch, batch)
        l2, g2 = nn.loss_and_grad(w, arch, shuffled)
        assert l2 == pytest.approx(l1, rel=1e-13)
        np.testing.assert_allclose(g2, g1, rtol=1e-11, atol=1e-15)
        _, acc1 = nn.evaluate(w, arch, batch)
        _, acc2 = nn.evaluate(w, arch, shuffled)
        assert acc1 == acc2

    def test_loss_nonnegative(self):
        rng = philox(13)
        for _ in range(20):
            arch, w, batch = random_net(rng)
            loss, _ = nn.loss_and_grad(w, arch, batch)
            assert loss >= 0.0

    def test_dimension_mismatch(self):
        arch = nn.MlpArchitecture((3, 2))
        batch = nn.Batch(np.ones((2, 4)), np.array([0, 1]), 2)
        with pytest.raises(ValueError):
            nn.loss_and_grad(np.zeros(arch.param_count), arch, batch)


class TestEvaluate:
    def test_perfect_accuracy(self):
        # Linear net with identity-ish weights: label = argmax of input.
        arch = nn.MlpArchitecture((3, 3))
        w = np.zeros(arch.param_count)
        w[: 9] = np.eye(3).ravel() * 5
        inputs = np.eye(3)[[0, 1, 2, 1]]
        batch = nn.Batch(inputs, np.array([0, 1, 2, 1]), 3)
        _, acc = nn.evaluate(w, arch, batch)
        assert acc == 1.0

    def test_empty_dataset_rejected(self):
        arch = nn.MlpArchitecture((3, 2))
        empty = nn.Batch(np.empty((0, 3)), np.empty(0, dtype=int), 2)
        with pytest.raises(ValueError):
            nn.evaluate(np.zeros(arch.param_count), arch, empty)

    def test_deterministic(self):
        rng = philox(17)
        arch, w, batch = random_net(rng)
        assert nn.evaluate(w, arch, batch) == nn.evaluate(w, arch, batch)


def test_grad_eval_counter():
    rng = philox(19)
    arch, w, batch = random_net(rng)
    nn.reset_grad_eval_count()
    nn.loss_and_grad(w, arch, batch)
    nn.loss_and_grad(w, arch, batch)
    assert nn.grad_eval_count() == 2
    nn.reset_grad_eval_count()
