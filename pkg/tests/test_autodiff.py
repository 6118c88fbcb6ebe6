"""Backward-pass contracts and finite-difference checks for every primitive."""

import numpy as np
import pytest

from lwposr import tensor as T
from lwposr.gradcheck import (
    analytic_gradients,
    compare_gradients,
    grad_check,
    numeric_gradients,
)

from oracles import fd_gradient, rel_errors

TOL = 1e-4
STEP = 1e-5


class TestBackwardContract:
    def test_weighted_sum_gradient_is_input(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 3))
        w = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        loss = T.mean_all(T.mul(w, T.Tensor(x)))
        loss.backward()
        assert np.max(np.abs(w.grad - x / x.size)) < 1e-15

    def test_unused_parameter_gets_no_gradient(self):
        w = T.Tensor(np.ones((2, 2)), requires_grad=True)
        unused = T.Tensor(np.ones(3), requires_grad=True)
        loss = T.mean_all(w)
        loss.backward()
        assert unused.grad is None
        assert w.grad is not None

    def test_backward_requires_scalar(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        out = T.relu(w)
        with pytest.raises(T.AutodiffError):
            out.backward()

    def test_backward_twice_rejected(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        loss = T.mean_all(T.relu(w))
        loss.backward()
        with pytest.raises(T.AutodiffError):
            loss.backward()

    def test_no_grad_builds_no_graph(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            out = T.relu(w)
        assert out._parents == ()
        assert not out.requires_grad

    def test_diamond_graph_accumulates(self):
        w = T.Tensor(np.array([2.0]), requires_grad=True)
        a = T.mul(w, T.Tensor(np.array([3.0])))
        b = T.mul(w, T.Tensor(np.array([5.0])))
        loss = T.mean_all(T.add(a, b))
        loss.backward()
        assert abs(w.grad[0] - 8.0) < 1e-15

    def test_shared_buffer_aliasing_is_safe(self):
        # add hands the same gradient buffer to both parents; a later
        # accumulation into one must not corrupt the other
        w1 = T.Tensor(np.array([1.0]), requires_grad=True)
        w2 = T.Tensor(np.array([1.0]), requires_grad=True)
        s = T.add(w1, w2)
        loss = T.mean_all(T.add(s, T.mul(w1, T.Tensor(np.array([10.0])))))
        loss.backward()
        assert abs(w1.grad[0] - 11.0) < 1e-15
        assert abs(w2.grad[0] - 1.0) < 1e-15

    def test_composite_graph_matches_independent_fd_oracle(self):
        rng = np.random.default_rng(17)
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(4)
        x = rng.standard_normal((5, 3))

        wt = T.Tensor(w, requires_grad=True)
        bt = T.Tensor(b, requires_grad=True)

        def forward():
            h = T.tanh(T.add(T.matmul(T.Tensor(x), wt), bt))
            return T.mean_all(T.mul(h, h))

        loss = forward()
        loss.backward()
        analytic = [wt.grad.copy(), bt.grad.copy()]

        def loss_value():
            with T.no_grad():
                return float(forward().data)

        numeric = fd_gradient(loss_value, [w, b], step=STEP)
        # wt/bt share buffers with w/b, so the oracle perturbs the same data
        for a, n in zip(analytic, numeric):
            assert rel_errors(a, n).max() < TOL


def _proj(shape, seed):
    return T.Tensor(np.random.default_rng(seed).standard_normal(shape))


def _check(loss_fn, params, tol=TOL):
    report = grad_check(loss_fn, params, step=STEP, tolerance=tol)
    assert report.passed, "\n".join(report.format_lines())


class TestPrimitiveGradients:
    def test_conv2d_standard(self):
        rng = np.random.default_rng(101)
        x = T.Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True)
        proj = _proj((2, 4, 6, 6), 1)
        _check(
            lambda: T.mean_all(T.mul(T.conv2d_standard(x, w, 1, 1), proj)),
            [("x", x), ("w", w)],
        )

    def test_conv2d_standard_strided(self):
        rng = np.random.default_rng(102)
        x = T.Tensor(rng.standard_normal((2, 2, 7, 7)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
        proj = _proj((2, 3, 3, 3), 2)
        _check(
            lambda: T.mean_all(T.mul(T.conv2d_standard(x, w, 2, 0), proj)),
            [("x", x), ("w", w)],
        )

    def test_conv2d_depthwise(self):
        rng = np.random.default_rng(103)
        x = T.Tensor(rng.standard_normal((2, 4, 6, 6)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((4, 3, 3)) * 0.5, requires_grad=True)
        proj = _proj((2, 4, 6, 6), 3)
        _check(
            lambda: T.mean_all(T.mul(T.conv2d_depthwise(x, w, 1, 1), proj)),
            [("x", x), ("w", w)],
        )

    def test_conv2d_pointwise(self):
        rng = np.random.default_rng(104)
        x = T.Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((6, 3)) * 0.5, requires_grad=True)
        proj = _proj((2, 6, 5, 5), 4)
        _check(
            lambda: T.mean_all(T.mul(T.conv2d_pointwise(x, w), proj)),
            [("x", x), ("w", w)],
        )

    def test_bias_channels(self):
        rng = np.random.default_rng(105)
        x = T.Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        b = T.Tensor(rng.standard_normal(3), requires_grad=True)
        proj = _proj((2, 3, 4, 4), 5)
        _check(
            lambda: T.mean_all(T.mul(T.bias_channels(x, b), proj)),
            [("x", x), ("b", b)],
        )

    def test_batch_norm_train(self):
        rng = np.random.default_rng(106)
        x = T.Tensor(rng.standard_normal((4, 3, 4, 4)), requires_grad=True)
        gamma = T.Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
        beta = T.Tensor(rng.standard_normal(3), requires_grad=True)
        proj = _proj((4, 3, 4, 4), 6)

        def loss():
            state = T.BatchNormState(3)
            out = T.batch_norm(x, gamma, beta, state, "train", eps=1e-5)
            return T.mean_all(T.mul(out, proj))

        _check(loss, [("x", x), ("gamma", gamma), ("beta", beta)])

    def test_batch_norm_eval(self):
        rng = np.random.default_rng(107)
        x = T.Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        gamma = T.Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
        beta = T.Tensor(rng.standard_normal(3), requires_grad=True)
        state = T.BatchNormState(3)
        state.running_mean = rng.standard_normal(3)
        state.running_var = rng.uniform(0.5, 2.0, 3)
        state.initialized = True
        proj = _proj((2, 3, 4, 4), 7)
        _check(
            lambda: T.mean_all(T.mul(T.batch_norm(x, gamma, beta, state, "eval"), proj)),
            [("x", x), ("gamma", gamma), ("beta", beta)],
        )

    def test_layer_norm(self):
        rng = np.random.default_rng(108)
        x = T.Tensor(rng.standard_normal((5, 8)), requires_grad=True)
        gamma = T.Tensor(rng.uniform(0.5, 1.5, 8), requires_grad=True)
        beta = T.Tensor(rng.standard_normal(8), requires_grad=True)
        proj = _proj((5, 8), 8)
        _check(
            lambda: T.mean_all(T.mul(T.layer_norm(x, gamma, beta), proj)),
            [("x", x), ("gamma", gamma), ("beta", beta)],
        )

    def test_linear(self):
        rng = np.random.default_rng(109)
        x = T.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((3, 6)) * 0.5, requires_grad=True)
        b = T.Tensor(rng.standard_normal(3), requires_grad=True)
        proj = _proj((4, 3), 9)
        _check(
            lambda: T.mean_all(T.mul(T.linear(x, w, b), proj)),
            [("x", x), ("w", w), ("b", b)],
        )

    def test_softmax(self):
        rng = np.random.default_rng(110)
        x = T.Tensor(rng.standard_normal((4, 7)) * 2.0, requires_grad=True)
        proj = _proj((4, 7), 10)
        _check(lambda: T.mean_all(T.mul(T.softmax(x), proj)), [("x", x)])

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(111)
        vals = rng.standard_normal((3, 5))
        vals[np.abs(vals) < 0.01] = 0.5
        x = T.Tensor(vals, requires_grad=True)
        proj = _proj((3, 5), 11)
        _check(lambda: T.mean_all(T.mul(T.relu(x), proj)), [("x", x)])

    def test_tanh(self):
        rng = np.random.default_rng(112)
        x = T.Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        proj = _proj((3, 5), 12)
        _check(lambda: T.mean_all(T.mul(T.tanh(x), proj)), [("x", x)])

    def test_gelu(self):
        rng = np.random.default_rng(113)
        x = T.Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        proj = _proj((3, 5), 13)
        _check(lambda: T.mean_all(T.mul(T.gelu(x), proj)), [("x", x)])

    @pytest.mark.parametrize("kind", ["avg", "max"])
    def test_pool2d(self, kind):
        rng = np.random.default_rng(114)
        x = T.Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        proj = _proj((2, 3, 3, 3), 14)
        _check(lambda: T.mean_all(T.mul(T.pool2d(x, kind), proj)), [("x", x)])

    def test_attention(self):
        rng = np.random.default_rng(115)
        q = T.Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
        k = T.Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
        v = T.Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
        proj = _proj((2, 5, 4), 15)
        _check(
            lambda: T.mean_all(T.mul(T.attention(q, k, v, 1.0 / np.sqrt(3.0)), proj)),
            [("q", q), ("k", k), ("v", v)],
        )

    def test_matmul_batched(self):
        rng = np.random.default_rng(116)
        a = T.Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        proj = _proj((2, 4, 5), 16)
        _check(lambda: T.mean_all(T.mul(T.matmul(a, b), proj)), [("a", a), ("b", b)])

    def test_reshape_transpose_concat_narrow(self):
        rng = np.random.default_rng(117)
        a = T.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        proj = _proj((2, 4, 3), 17)

        def loss():
            joined = T.concat([a, b], axis=2)
            part = T.narrow(joined, 2, 2, 4)
            moved = T.transpose(part, (0, 2, 1))
            flat = T.reshape(moved, (2, 12))
            back = T.reshape(flat, (2, 4, 3))
            return T.mean_all(T.mul(back, proj))

        _check(loss, [("a", a), ("b", b)])

    def test_absolute_away_from_kink(self):
        rng = np.random.default_rng(118)
        vals = rng.standard_normal((4, 4))
        vals[np.abs(vals) < 0.01] = -0.7
        x = T.Tensor(vals, requires_grad=True)
        _check(lambda: T.mean_all(T.absolute(x)), [("x", x)])


class TestGradCheckTool:
    def _setup(self):
        rng = np.random.default_rng(200)
        w = T.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        proj = _proj((3, 3), 20)
        loss_fn = lambda: T.mean_all(T.mul(T.tanh(w), proj))
        return loss_fn, [("w", w)]

    def test_reports_pass_for_correct_gradients(self):
        loss_fn, params = self._setup()
        report = grad_check(loss_fn, params, step=STEP, tolerance=TOL)
        assert report.passed
        assert len(report.entries) == 1
        assert report.max_error < TOL

    def test_corrupted_gradient_detected(self):
        loss_fn, params = self._setup()
        analytic = analytic_gradients(loss_fn, params)
        analytic["w"][0, 0] += 0.25
        numeric = numeric_gradients(loss_fn, params, step=STEP)
        report = compare_gradients(analytic, numeric, tolerance=TOL)
        assert not report.passed
        assert report.max_error > TOL

    def test_non_finite_rejected(self):
        loss_fn, params = self._setup()
        analytic = analytic_gradients(loss_fn, params)
        numeric = numeric_gradients(loss_fn, params, step=STEP)
        analytic["w"][0, 0] = np.nan
        with pytest.raises(T.NumericError):
            compare_gradients(analytic, numeric, tolerance=TOL)
