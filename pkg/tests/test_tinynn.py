import numpy as np
import pytest

from src.errors import CheckpointError, NumericError
from src.tinynn import (
    AdamState, GaussianHead, Mlp, forward, grad, l2_penalty, load_arrays, numerical_grad, opt_step, save_arrays,
)


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)


class TestForward:
    def test_zero_net_gives_zero(self):
        net = Mlp.zeros([3, 5, 2])
        assert np.array_equal(forward(net, np.array([1.0, -2.0, 0.5])), np.zeros(2))

    def test_identity_linear_layer(self):
        net = Mlp([3, 3], weights=[np.eye(3)], biases=[np.zeros(3)])
        v = np.array([0.3, -1.2, 4.0])
        assert np.array_equal(forward(net, v), v)

    def test_matches_straight_line_arithmetic(self):
        net = Mlp([4, 6, 5, 2], rng=np.random.default_rng(1))
        x = np.random.default_rng(2).normal(size=4)
        h = x
        for i in range(3):
            z = [sum(h[r] * net.weights[i][r, c] for r in range(len(h))) + net.biases[i][c]
                 for c in range(net.widths[i + 1])]
            h = np.array(z) if i == 2 else np.tanh(np.array(z))
        assert np.allclose(forward(net, x), h, rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward(Mlp([3, 2]), np.zeros(4))

    def test_nan_names_the_layer(self):
        with pytest.raises(NumericError) as err:
            forward(Mlp([2, 3, 1]), np.array([np.nan, 0.0]))
        assert err.value.where == "layer 0"


class TestGrad:
    def test_quadratic_penalty(self):
        net = Mlp([3, 4, 2], rng=np.random.default_rng(0))
        _, grads = l2_penalty(net.params, 1.0)
        for g, p in zip(grads, net.params):
            assert np.array_equal(g, p)

    def test_single_linear_unit(self):
        net = Mlp([3, 1], rng=np.random.default_rng(4))
        x = np.array([[0.5, -1.0, 2.0]])
        y = np.array([[0.7]])
        y_hat = forward(net, x)

        def loss_fn(out):
            err = out - y
            return float(0.5 * np.sum(err * err)), err

        _, grads = grad(net, x, loss_fn)
        assert np.allclose(grads[0][:, 0], (y_hat - y)[0, 0] * x[0], atol=1e-14)
        assert np.allclose(grads[1], (y_hat - y)[0], atol=1e-14)

    def test_gaussian_nll_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        net = Mlp([5, 8, 8, 6], rng=rng)
        head = GaussianHead(3)
        x = rng.normal(size=(16, 5))
        target = rng.normal(size=(16, 3))

        _, grads = grad(net, x, lambda out: head.nll(out, target))
        analytic = Mlp.flatten(grads)

        def loss_at(theta):
            trial = net.copy()
            trial.set_flat(theta)
            return head.nll(trial.forward(x), target)[0]

        idx = rng.choice(net.n_params, size=20, replace=False)
        numeric = numerical_grad(loss_at, net.get_flat(), idx)
        assert np.max(relative_error(analytic[idx], numeric)) < 1e-4


class TestOptStep:
    def test_zero_gradient_is_a_no_op(self):
        p = [np.array([1.0, -2.0])]
        before = p[0].copy()
        opt_step(p, [np.zeros(2)], AdamState.for_params(p), lr=0.1)
        assert np.array_equal(p[0], before)

    def test_constant_gradient_moves_monotonically(self):
        p = [np.array([0.0])]
        state = AdamState.for_params(p)
        previous = p[0][0]
        for _ in range(1000):
            opt_step(p, [np.array([1.0])], state, lr=1e-3)
            assert p[0][0] < previous
            previous = p[0][0]

    def test_quadratic_bowl_converges(self):
        p = [np.array([1.0])]
        state = AdamState.for_params(p)
        for _ in range(500):
            opt_step(p, [p[0].copy()], state, lr=0.01)
        assert abs(p[0][0]) < 1e-3

    def test_non_finite_gradient_leaves_params_untouched(self):
        p = [np.array([1.0, 2.0]), np.array([3.0])]
        state = AdamState.for_params(p)
        with pytest.raises(NumericError):
            opt_step(p, [np.array([0.1, 0.1]), np.array([np.inf])], state, lr=0.1)
        assert p[0].tolist() == [1.0, 2.0]
        assert state.t == 0


class TestCheckpoints:
    def test_arrays_reload_exactly(self, tmp_path):
        net = Mlp([3, 4, 2], rng=np.random.default_rng(9))
        save_arrays(tmp_path / "net", net.state_dict("actor."), {"widths": net.widths})
        named, meta = load_arrays(tmp_path / "net")
        again = Mlp.from_state_dict(meta["widths"], named, "actor.")
        assert np.array_equal(again.get_flat(), net.get_flat())
        assert (tmp_path / "net.bin").stat().st_size == 8 * net.n_params

    def test_truncated_file(self, tmp_path):
        save_arrays(tmp_path / "net", Mlp([3, 2]).state_dict())
        data = (tmp_path / "net.bin").read_bytes()
        (tmp_path / "net.bin").write_bytes(data[:-8])
        with pytest.raises(CheckpointError):
            load_arrays(tmp_path / "net")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_arrays(tmp_path / "absent")
