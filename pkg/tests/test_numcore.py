"""Engine-level checks: backprop against finite differences, optimizer
behavior, and exact checkpoint round trips."""

import math

import numpy as np
import pytest

import feat.numcore as nc
from feat.errors import NumericsError, ParseError, ShapeError


def _loss_value(net, x, t, target):
    diff = net.forward(x, t) - target
    return float(np.sum(diff * diff)) / x.shape[0]


def _loss_node(net, x, t, target, params):
    feats = np.concatenate([x, nc.time_features(t)], axis=1)
    out = net.traced_forward(feats, params)
    return nc.scale(nc.sum_all(nc.square(nc.sub(out, nc.leaf(target)))),
                    1.0 / x.shape[0])


class TestMlpForward:
    def test_zero_final_layer_gives_zero_output(self):
        net = nc.build_mlp(3, [16], seed=0, zero_final=True)
        out = net.forward(np.array([0.4, -1.2, 2.0]), 0.3)
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_linear_identity_net(self):
        # single affine layer embedding the identity on the spatial block
        widths = [2 + nc.TIME_EMBED_WIDTH, 2]
        w = np.zeros((widths[0], 2))
        w[0, 0] = 1.0
        w[1, 1] = 1.0
        bias = np.array([0.25, -0.5])
        net = nc.Mlp(widths, [w], [bias])
        out = net.forward(np.array([1.0, 0.0]), 0.7)
        np.testing.assert_allclose(out, np.array([1.25, -0.5]))

    def test_deterministic(self):
        net = nc.build_mlp(4, [8, 8], seed=3, zero_final=False)
        x = np.random.default_rng(1).standard_normal(4)
        a = net.forward(x, 0.42)
        b = net.forward(x, 0.42)
        np.testing.assert_array_equal(a, b)

    def test_shape_error(self):
        net = nc.build_mlp(3, [8], seed=0)
        with pytest.raises(ShapeError):
            net.forward(np.zeros(5), 0.5)

    def test_traced_matches_plain(self):
        rng = np.random.default_rng(7)
        net = nc.build_mlp(3, [6, 6], seed=11, zero_final=False)
        x = rng.standard_normal((5, 3))
        t = rng.uniform(0, 1, 5)
        feats = np.concatenate([x, nc.time_features(t)], axis=1)
        traced = net.traced_forward(feats, net.param_leaves())
        np.testing.assert_array_equal(traced.value, net.forward(x, t))

    def test_param_count_invariant(self):
        net = nc.build_mlp(5, [32, 16], seed=2)
        widths = net.widths
        expected = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
        assert net.n_params == expected


class TestGradParams:
    def test_quadratic_gradient_is_theta(self):
        theta = nc.leaf(np.array([1.5, -2.0, 0.25]))
        loss = nc.scale(nc.sum_all(nc.square(theta)), 0.5)
        (g,) = nc.grad_params(loss, [theta])
        np.testing.assert_allclose(g, theta.value)

    def test_linear_gradient_is_coefficients(self):
        coef = np.array([2.0, -1.0, 3.5])
        theta = nc.leaf(np.zeros(3))
        loss = nc.sum_all(nc.mul(nc.leaf(coef), theta))
        (g,) = nc.grad_params(loss, [theta])
        np.testing.assert_allclose(g, coef)

    def test_gradient_matches_finite_differences(self):
        # randomized trials across every primitive the networks use
        rng = np.random.default_rng(42)
        worst = 0.0
        for trial in range(100):
            act = "gelu" if trial % 2 == 0 else "softplus"
            net = nc.build_mlp(2, [5], seed=trial, zero_final=False,
                               activation=act)
            x = rng.standard_normal((3, 2))
            t = rng.uniform(0.1, 0.9, 3)
            target = rng.standard_normal((3, 2))
            params = net.param_leaves()
            grads = nc.grad_params(_loss_node(net, x, t, target, params),
                                   params)
            arrays = net.params()
            k = trial % len(arrays)
            arr, g = arrays[k], grads[k]
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            step = 1e-5
            orig = arr[idx]
            arr[idx] = orig + step
            up = _loss_value(net, x, t, target)
            arr[idx] = orig - step
            down = _loss_value(net, x, t, target)
            arr[idx] = orig
            fd = (up - down) / (2.0 * step)
            rel = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8)
            worst = max(worst, rel)
        assert worst <= 1e-5

    def test_scalar_loss_required(self):
        theta = nc.leaf(np.ones(3))
        with pytest.raises(ShapeError):
            nc.grad_params(nc.square(theta), [theta])

    def test_jvp_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        net = nc.build_mlp(3, [7, 7], seed=9, zero_final=False)
        x = rng.standard_normal((4, 3))
        t = rng.uniform(0, 1, 4)
        u = rng.standard_normal(3)
        step = 1e-6
        fd = (net.forward(x + step * u, t) - net.forward(x - step * u, t)) / (2 * step)
        np.testing.assert_allclose(net.jvp(x, t, u), fd, atol=1e-7)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        params = [np.array([1.0, 2.0])]
        state = nc.AdamState.for_params(params)
        out = nc.adam_step(state, params, [np.zeros(2)])
        np.testing.assert_array_equal(out[0], params[0])

    def test_constant_gradient_moves_against_it(self):
        params = [np.array([0.0])]
        state = nc.AdamState.for_params(params, lr=0.01)
        g = [np.array([3.0])]
        for _ in range(25):
            params = nc.adam_step(state, params, g)
        assert params[0][0] < 0.0

    def test_quadratic_bowl_matches_scalar_recurrence(self):
        # independent scalar simulation of the update recurrence
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        p_ref, m, v = 4.0, 0.0, 0.0
        ref_losses = []
        for step in range(1, 11):
            g = p_ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p_ref -= lr * (m / (1 - b1**step)) / (
                math.sqrt(v / (1 - b2**step)) + eps)
            ref_losses.append(0.5 * p_ref**2)

        params = [np.array([4.0])]
        state = nc.AdamState.for_params(params, lr=0.05)
        losses = []
        for _ in range(10):
            params = nc.adam_step(state, params, [params[0].copy()])
            losses.append(0.5 * float(params[0][0]) ** 2)
        np.testing.assert_allclose(losses, ref_losses, rtol=1e-12)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_rejects_non_finite_gradient(self):
        params = [np.array([1.0])]
        state = nc.AdamState.for_params(params)
        with pytest.raises(NumericsError):
            nc.adam_step(state, params, [np.array([np.nan])])

    def test_finite_parameters_always(self):
        rng = np.random.default_rng(5)
        params = [rng.standard_normal((4, 4))]
        state = nc.AdamState.for_params(params, lr=0.5)
        for _ in range(200):
            params = nc.adam_step(state, params,
                                  [1e6 * rng.standard_normal((4, 4))])
        assert np.all(np.isfinite(params[0]))


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        net = nc.build_mlp(3, [9, 5], seed=1, zero_final=False)
        path = tmp_path / "model.txt"
        nc.save_model(path, net, "score")
        loaded, kind = nc.load_model(path)
        assert kind == "score"
        assert loaded.widths == net.widths
        for a, b in zip(net.params(), loaded.params()):
            np.testing.assert_array_equal(a, b)

    def test_header_format(self, tmp_path):
        net = nc.build_mlp(2, [4], seed=0)
        path = tmp_path / "model.txt"
        nc.save_model(path, net, "velocity")
        header = path.read_text().splitlines()[0]
        assert header == "feat-model v1 kind=velocity dim=2 layers=10,4,2"

    def test_corrupt_header_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("feat-model v2 kind=velocity dim=2 layers=10,4,2\n")
        with pytest.raises(ParseError):
            nc.load_model(path)

    def test_non_default_activation_rejected(self, tmp_path):
        net = nc.build_mlp(2, [4], seed=0, activation="softplus")
        with pytest.raises(ShapeError):
            nc.save_model(tmp_path / "m.txt", net, "velocity")

    def test_wrong_value_count_names_problem(self, tmp_path):
        net = nc.build_mlp(2, [4], seed=0)
        path = tmp_path / "model.txt"
        nc.save_model(path, net, "velocity")
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-2]) + "\n")
        with pytest.raises(ParseError):
            nc.load_model(path)
