import numpy as np
import pytest

from koopa.errors import ShapeError, StateError
from koopa.neural import (
    AdamState,
    Mlp,
    adam_step,
    glorot_uniform,
    gradient_check,
    mlp_backward,
    mlp_forward,
    seeded_rng,
)


def mse_loss(target):
    def loss_fn(y):
        diff = y - target
        return float((diff**2).mean()), 2.0 * diff / diff.size

    return loss_fn


class TestForward:
    def test_zero_net_outputs_zero(self):
        net = Mlp.init([4, 3, 2], "relu", seeded_rng(0))
        for w in net.weights:
            w[...] = 0.0
        y, _ = mlp_forward(net, np.ones(4))
        assert np.array_equal(y, np.zeros(2))

    def test_single_affine_layer_is_matmul(self):
        net = Mlp.init([3, 2], "relu", seeded_rng(1))
        x = np.array([0.5, -1.0, 2.0])
        y, _ = mlp_forward(net, x)
        assert np.allclose(y, net.weights[0] @ x + net.biases[0], atol=1e-15)

    def test_two_layer_relu_recompute(self):
        net = Mlp.init([4, 5, 3], "relu", seeded_rng(2))
        x = seeded_rng(3).standard_normal(4)
        y, _ = mlp_forward(net, x)
        manual = net.weights[1] @ np.maximum(net.weights[0] @ x + net.biases[0], 0) + net.biases[1]
        assert np.abs(y - manual).max() <= 1e-12

    def test_batched_matches_per_row(self):
        net = Mlp.init([3, 6, 2], "tanh", seeded_rng(4))
        xs = seeded_rng(5).standard_normal((7, 3))
        ys, _ = mlp_forward(net, xs)
        for i in range(7):
            yi, _ = mlp_forward(net, xs[i])
            assert np.allclose(ys[i], yi, atol=1e-14)

    def test_wrong_input_dim(self):
        net = Mlp.init([3, 2], "relu", seeded_rng(6))
        with pytest.raises(ShapeError):
            mlp_forward(net, np.ones(4))


class TestBackward:
    def test_identity_net_passes_gradient_through(self):
        net = Mlp.init([3, 3], "relu", seeded_rng(7))
        net.weights[0][...] = np.eye(3)
        net.biases[0][...] = 0.0
        _, tape = mlp_forward(net, np.array([1.0, -2.0, 0.5]))
        dy = np.array([0.1, 0.2, 0.3])
        dx, _, _ = mlp_backward(net, tape, dy)
        assert np.array_equal(dx, dy)

    def test_affine_weight_gradient_closed_form(self):
        net = Mlp.init([3, 2], "relu", seeded_rng(8))
        x = np.array([1.0, 2.0, -1.0])
        _, tape = mlp_forward(net, x)
        dy = np.array([0.3, -0.7])
        _, dws, dbs = mlp_backward(net, tape, dy)
        assert np.allclose(dws[0], np.outer(dy, x), atol=1e-15)
        assert np.allclose(dbs[0], dy, atol=1e-15)

    def test_linear_in_upstream_gradient(self):
        net = Mlp.init([4, 6, 3], "tanh", seeded_rng(9))
        x = seeded_rng(10).standard_normal(4)
        _, tape = mlp_forward(net, x)
        dy = seeded_rng(11).standard_normal(3)
        dx1, dw1, db1 = mlp_backward(net, tape, dy)
        dx2, dw2, db2 = mlp_backward(net, tape, 2.0 * dy)
        assert np.array_equal(dx2, 2.0 * dx1)
        for a, b in zip(dw1 + db1, dw2 + db2):
            assert np.array_equal(b, 2.0 * a)

    def test_stale_tape_rejected(self):
        net = Mlp.init([3, 2], "relu", seeded_rng(12))
        _, tape = mlp_forward(net, np.ones(3))
        with pytest.raises(StateError):
            mlp_backward(net, tape, np.ones(3))


class TestGradientCheck:
    def test_linear_net_with_mse_is_nearly_exact(self):
        net = Mlp.init([4, 3], "relu", seeded_rng(13))
        x = seeded_rng(14).standard_normal(4)
        target = seeded_rng(15).standard_normal(3)
        assert gradient_check(net, x, mse_loss(target)) < 1e-6

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    @pytest.mark.parametrize("dims", [[5, 8, 3], [6, 16, 12, 4], [4, 64, 8, 8, 2]])
    def test_architecture_grid(self, activation, dims):
        net = Mlp.init(dims, activation, seeded_rng(sum(dims)))
        x = seeded_rng(99).standard_normal(dims[0])
        target = seeded_rng(100).standard_normal(dims[-1])
        assert gradient_check(net, x, mse_loss(target)) < 1e-4


class TestAdam:
    def test_zero_gradient_leaves_params_untouched(self):
        params = [np.ones((2, 2)), np.zeros(3)]
        before = [p.copy() for p in params]
        adam_step(params, [np.zeros((2, 2)), np.zeros(3)], AdamState.init(params))
        for p, b in zip(params, before):
            assert np.array_equal(p, b)

    def test_first_step_closed_form(self):
        # after one step: m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps)
        g = np.array([[0.5, -2.0], [3.0, -0.25]])
        params = [np.zeros((2, 2))]
        state = AdamState.init(params, lr=0.01)
        adam_step(params, [g], state)
        expected = -0.01 * g / (np.abs(g) + state.eps)
        assert np.allclose(params[0], expected, atol=1e-12)

    def test_quadratic_descent(self):
        w = [np.array([0.0])]
        state = AdamState.init(w, lr=0.3)
        for _ in range(100):
            adam_step(w, [2.0 * (w[0] - 3.0)], state)
        assert abs(w[0][0] - 3.0) <= 1e-2

    def test_shape_mismatch(self):
        params = [np.zeros((2, 2))]
        with pytest.raises(ShapeError):
            adam_step(params, [np.zeros(3)], AdamState.init(params))

    def test_step_counter_increases(self):
        params = [np.zeros(2)]
        state = AdamState.init(params)
        for expected in (1, 2, 3):
            adam_step(params, [np.ones(2)], state)
            assert state.step == expected


class TestDeterminism:
    def test_same_seed_same_trajectory(self):
        def run():
            net = Mlp.init([4, 8, 2], "relu", seeded_rng(42))
            params = net.weights + net.biases
            state = AdamState.init(params, lr=0.01)
            x = seeded_rng(43).standard_normal((16, 4))
            target = seeded_rng(44).standard_normal((16, 2))
            losses = []
            for _ in range(5):
                y, tape = mlp_forward(net, x)
                diff = y - target
                losses.append(float((diff**2).mean()))
                _, dws, dbs = mlp_backward(net, tape, 2 * diff / diff.size)
                adam_step(params, dws + dbs, state)
            return losses, [p.copy() for p in params]

        l1, p1 = run()
        l2, p2 = run()
        assert l1 == l2
        for a, b in zip(p1, p2):
            assert np.array_equal(a, b)

    def test_streams_are_independent(self):
        a = seeded_rng(5, stream=0).standard_normal(4)
        b = seeded_rng(5, stream=1).standard_normal(4)
        assert not np.allclose(a, b)
        assert np.array_equal(a, seeded_rng(5, stream=0).standard_normal(4))

    def test_glorot_bounds(self):
        w = glorot_uniform(seeded_rng(1), 30, 20)
        lim = np.sqrt(6.0 / 50.0)
        assert np.all(np.abs(w) <= lim)
