import csv
import math
import os

import numpy as np
import pytest

from tfrcast.nn import AdamState, RngStream, ShapeError, adam_step, constant, parameter, step_lr
from tfrcast.nn import autograd as ag
from tfrcast.nn.gradcheck import grad_check
from tfrcast.nn.rng import derive_seed

GOLDEN = os.path.join(os.path.dirname(__file__), "data", "rng_golden.csv")


def _numeric_grad(f, x, step=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        plus = f(x)
        x[idx] = orig - step
        minus = f(x)
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * step)
    return grad


class TestAutograd:
    def test_matmul_add_gradients(self, rng):
        a_val = rng.normal(size=(3, 4))
        w_val = rng.normal(size=(4, 2))
        b_val = rng.normal(size=(1, 2))

        a, w, b = parameter(a_val), parameter(w_val), parameter(b_val)
        out = ag.total(ag.tanh(ag.add(ag.matmul(a, w), b)))
        out.backward()

        def f(wv):
            return np.sum(np.tanh(a_val @ wv + b_val))

        np.testing.assert_allclose(w.grad, _numeric_grad(f, w_val.copy()), atol=1e-6)
        assert b.grad.shape == (1, 2)
        assert a.grad.shape == (3, 4)

    def test_gru_style_blend(self, rng):
        u_val = rng.normal(size=(2, 3))
        h_val = rng.normal(size=(2, 3))
        c_val = rng.normal(size=(2, 3))
        u, h, c = parameter(u_val), parameter(h_val), parameter(c_val)
        gate = ag.sigmoid(u)
        out = ag.total(ag.add(ag.hadamard(gate, h), ag.hadamard(ag.one_minus(gate), c)))
        out.backward()

        def f(uv):
            s = 1 / (1 + np.exp(-uv))
            return np.sum(s * h_val + (1 - s) * c_val)

        np.testing.assert_allclose(u.grad, _numeric_grad(f, u_val.copy()), atol=1e-6)

    def test_shared_node_accumulates(self):
        x = parameter(np.array([[2.0]]))
        y = ag.total(ag.hadamard(x, x))
        y.backward()
        np.testing.assert_allclose(x.grad, [[4.0]])

    def test_constants_get_no_gradient(self):
        c = constant(np.ones((2, 2)))
        p = parameter(np.ones((2, 2)))
        ag.total(ag.hadamard(c, p)).backward()
        assert c.grad is None
        np.testing.assert_allclose(p.grad, np.ones((2, 2)))

    def test_sigmoid_extremes_are_finite(self):
        out = ag.sigmoid(constant(np.array([-1000.0, 0.0, 1000.0])))
        np.testing.assert_allclose(out.value, [0.0, 0.5, 1.0])

    def test_concat_and_column(self, rng):
        a = parameter(rng.normal(size=(2, 2)))
        b = parameter(rng.normal(size=(2, 3)))
        joined = ag.concat([a, b], axis=1)
        assert joined.shape == (2, 5)
        ag.total(ag.column(joined, 3)).backward()
        np.testing.assert_allclose(a.grad, np.zeros((2, 2)))
        np.testing.assert_allclose(b.grad, [[0, 1, 0], [0, 1, 0]])

    def test_gather_rows_accumulates_repeats(self):
        table = parameter(np.arange(6, dtype=float).reshape(3, 2))
        rows = ag.gather_rows(table, np.array([0, 2, 0]))
        ag.total(rows).backward()
        np.testing.assert_allclose(table.grad, [[2, 2], [0, 0], [1, 1]])

    def test_gather_rows_out_of_range(self):
        with pytest.raises(ShapeError):
            ag.gather_rows(parameter(np.zeros((2, 2))), np.array([2]))

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            ag.matmul(parameter(np.zeros((2, 3))), parameter(np.zeros((2, 3))))

    def test_pinball_sum_value_and_slope(self):
        pred = parameter(np.array([[0.0, 2.0]]))
        loss = ag.pinball_sum(pred, np.array([1.0]), np.array([0.1, 0.9]))
        # under-prediction: 0.1 * 1; over-prediction: (1 - 0.9) * 1
        assert loss.value == pytest.approx(0.2)
        loss.backward()
        np.testing.assert_allclose(pred.grad, [[-0.1, 0.1]])


class TestAdam:
    def test_first_step_moves_by_lr(self):
        params = {"w": np.array([1.0, -1.0])}
        grads = {"w": np.array([0.5, -3.0])}
        state = AdamState(lr=0.01)
        updated = adam_step(params, grads, state)
        np.testing.assert_allclose(updated["w"], [0.99, -0.99], atol=1e-6)
        assert state.step == 1
        np.testing.assert_allclose(params["w"], [1.0, -1.0])

    def test_weight_decay_enters_gradient(self):
        state = AdamState(lr=0.01, weight_decay=0.1)
        updated = adam_step({"w": np.array([2.0])}, {"w": np.array([0.0])}, state)
        assert updated["w"][0] == pytest.approx(1.99, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())

    def test_minimizes_quadratic(self):
        params = {"w": np.array([3.0, -2.0])}
        state = AdamState(lr=0.1)
        for _ in range(500):
            params = adam_step(params, {"w": 2 * params["w"]}, state)
        np.testing.assert_allclose(params["w"], 0.0, atol=0.1)

    @pytest.mark.parametrize(
        "epoch, expected", [(0, 1.0), (9, 1.0), (10, 0.5), (25, 0.25)]
    )
    def test_step_lr(self, epoch, expected):
        assert step_lr(epoch, 1.0, 10, 0.5) == pytest.approx(expected)

    def test_step_lr_validation(self):
        with pytest.raises(ValueError):
            step_lr(1, 1.0, 0, 0.5)
        with pytest.raises(ValueError):
            step_lr(1, 1.0, 10, 0.0)


class TestRngStream:
    def test_derive_seed_matches_golden(self):
        with open(GOLDEN, newline="") as f:
            rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
        header, body = rows[0], rows[1:]
        assert header == ["seed", "label", "child_hex"]
        assert body
        for seed, label, child_hex in body:
            assert derive_seed(int(seed), label) == int(child_hex, 16)

    def test_same_seed_same_draws(self):
        a, b = RngStream(7), RngStream(7)
        np.testing.assert_array_equal(a.normal(size=5), b.normal(size=5))
        assert a.counter == b.counter == 5

    def test_split_is_independent_of_parent_state(self):
        parent = RngStream(7)
        first = parent.split("init").uniform(size=3)
        parent.uniform(size=10)
        again = parent.split("init").uniform(size=3)
        np.testing.assert_array_equal(first, again)
        assert parent.counter == 10

    def test_labels_give_different_streams(self):
        root = RngStream(0)
        assert root.split("shuffle").seed != root.split("init").seed

    def test_choice_and_random(self):
        s = RngStream(1)
        assert s.choice(["a", "b", "c"]) in ("a", "b", "c")
        assert 0.0 <= s.random() < 1.0
        assert s.counter == 2


class TestGradCheck:
    def test_correct_gradient_passes(self):
        a = np.array([1.0, 2.0, 3.0])

        def closure(p):
            w = p["w"]
            return float(np.sum(a * w**2)), {"w": 2 * a * w}

        report = grad_check(closure, {"w": np.array([0.5, -1.0, 2.0])})
        assert report.passed
        assert report.checked == 3
        assert "ok" in report.summary()

    def test_wrong_gradient_fails(self):
        def closure(p):
            w = p["w"]
            return float(np.sum(w**3)), {"w": 2 * w}

        report = grad_check(closure, {"w": np.array([1.0, 2.0])})
        assert not report.passed
        assert report.failures[0][0] == "w"

    def test_sampling_respects_budget(self):
        def closure(p):
            return float(np.sum(p["big"])) + float(np.sum(p["small"])), {
                "big": np.ones_like(p["big"]),
                "small": np.ones_like(p["small"]),
            }

        params = {"big": np.zeros((50, 50)), "small": np.zeros(2)}
        report = grad_check(closure, params, n_coords=20)
        assert 20 <= report.checked <= 22
        assert report.passed


def _relative_error(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return np.max(np.abs(analytic - numeric) / scale)


def _pinball_inputs(rng):
    y = rng.normal(size=4)
    offsets = rng.uniform(0.1, 1.0, size=(4, 3)) * rng.choice([-1.0, 1.0], size=(4, 3))
    return [y[:, None] + offsets], y


PRIMITIVES = {
    "matmul": (lambda t: ag.matmul(t[0], t[1]), [(3, 4), (4, 2)]),
    "add": (lambda t: ag.add(t[0], t[1]), [(3, 2), (1, 2)]),
    "add_vector": (lambda t: ag.add(t[0], t[1]), [(3, 2), (2,)]),
    "sub": (lambda t: ag.sub(t[0], t[1]), [(3, 2), (1, 2)]),
    "hadamard": (lambda t: ag.hadamard(t[0], t[1]), [(3, 2), (3, 1)]),
    "one_minus": (lambda t: ag.one_minus(t[0]), [(2, 3)]),
    "sigmoid": (lambda t: ag.sigmoid(t[0]), [(2, 3)]),
    "tanh": (lambda t: ag.tanh(t[0]), [(2, 3)]),
    "scale": (lambda t: ag.scale(t[0], 1.7), [(2, 3)]),
    "concat": (lambda t: ag.concat([t[0], t[1], t[2]]), [(2, 1), (2, 3), (2, 2)]),
    "concat_rows": (lambda t: ag.concat([t[0], t[1]], axis=0), [(1, 3), (2, 3)]),
    "column": (lambda t: ag.column(t[0], 2), [(3, 4)]),
    "gather_rows": (lambda t: ag.gather_rows(t[0], np.array([0, 2, 0, 1])), [(3, 2)]),
    "total": (lambda t: ag.total(t[0]), [(2, 3)]),
}


class TestPrimitiveGradients:
    def _check(self, build, values, rng, step=1e-5):
        weights = rng.normal(size=build([constant(v) for v in values]).shape)

        def loss_of(vals):
            out = build([constant(v) for v in vals])
            return float(np.sum(out.value * weights))

        leaves = [parameter(v) for v in values]
        ag.total(ag.hadamard(build(leaves), constant(weights))).backward()
        for i, leaf in enumerate(leaves):

            def f(x, i=i):
                return loss_of(values[:i] + [x] + values[i + 1 :])

            numeric = _numeric_grad(f, values[i].copy(), step=step)
            assert leaf.grad.shape == values[i].shape
            assert _relative_error(leaf.grad, numeric) < 1e-6

    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_matches_finite_differences(self, name, rng):
        build, shapes = PRIMITIVES[name]
        self._check(build, [rng.normal(size=shape) for shape in shapes], rng)

    def test_pinball_sum_matches_finite_differences(self, rng):
        values, y = _pinball_inputs(rng)
        levels = np.array([0.1, 0.5, 0.9])
        self._check(lambda t: ag.pinball_sum(t[0], y, levels), values, rng)

    def test_sigmoid_slope_at_zero(self):
        x = parameter(np.zeros(3))
        ag.total(ag.sigmoid(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.25, 0.25, 0.25])

    def test_backward_is_linear_in_the_loss(self, rng):
        x_val = rng.normal(size=(4, 3))
        w_val = rng.normal(size=(3, 3))
        values, y = _pinball_inputs(rng)
        levels = np.array([0.05, 0.5, 0.95])

        def losses(w):
            hidden = ag.tanh(ag.matmul(constant(x_val), w))
            first = ag.total(ag.hadamard(hidden, hidden))
            second = ag.pinball_sum(ag.add(hidden, constant(values[0])), y, levels)
            return first, second

        grads = []
        for pick in (0, 1):
            w = parameter(w_val)
            losses(w)[pick].backward()
            grads.append(w.grad)

        w = parameter(w_val)
        first, second = losses(w)
        ag.add(first, ag.scale(second, 0.3)).backward()
        np.testing.assert_allclose(w.grad, grads[0] + 0.3 * grads[1], rtol=1e-12, atol=1e-12)


class TestAdamTrajectory:
    def test_matches_scalar_reference(self):
        lr, beta1, beta2, eps, decay = 0.05, 0.9, 0.999, 1e-8, 0.01
        start = np.array([1.5, -0.7, 0.2, 3.0])
        target = np.array([0.3, 0.3, -1.0, 2.0])

        def gradient(w):
            return 2.0 * (w - target) + np.sin(3.0 * w)

        state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=decay)
        params = {"w": start.copy()}
        trajectory = []
        for _ in range(100):
            params = adam_step(params, {"w": gradient(params["w"])}, state)
            trajectory.append(params["w"])

        for j in range(len(start)):
            w, m, v = float(start[j]), 0.0, 0.0
            for t in range(1, 101):
                g = 2.0 * (w - target[j]) + math.sin(3.0 * w) + decay * w
                m = beta1 * m + (1.0 - beta1) * g
                v = beta2 * v + (1.0 - beta2) * g * g
                m_hat = m / (1.0 - beta1**t)
                v_hat = v / (1.0 - beta2**t)
                w = w - lr * m_hat / (math.sqrt(v_hat) + eps)
                assert abs(trajectory[t - 1][j] - w) < 1e-10
        assert state.step == 100
