"""Tensor engine: forward semantics and gradients against finite differences."""

import math

import numpy as np
import pytest

from vitnas import autograd as ag
from vitnas.errors import ShapeError

from oracles import finite_diff_grad, relerr

# Frozen from a 50-digit mpmath evaluation of each closed form at x = 1.
GELU1_TANH = 0.84119199060827670478
GELU1_ERF = 0.84134474606854294859


def check_grads(build_loss, arrays, tol, h=1e-5):
    """FD-check the gradient of build_loss() w.r.t. every array in `arrays`.

    build_loss re-reads the arrays each call, so in-place perturbation works.
    """
    tensors = {}

    def run():
        tensors.clear()
        for name, arr in arrays.items():
            tensors[name] = ag.Tensor(arr, requires_grad=True)
        return build_loss(tensors)

    loss = run()
    loss.backward()
    analytic = {name: tensors[name].grad.copy() for name in arrays}
    for name, arr in arrays.items():
        numeric = finite_diff_grad(lambda: run().item(), arr, h=h)
        assert relerr(analytic[name], numeric) < tol, f"gradient mismatch for {name}"


class TestMatmul:
    def test_identity(self):
        out = ag.matmul(ag.Tensor([[1.0, 0.0], [0.0, 1.0]]), ag.Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_allclose(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_scalar_case(self):
        out = ag.matmul(ag.Tensor([[2.0]]), ag.Tensor([[3.0]]))
        np.testing.assert_allclose(out.data, [[6.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(ag.Tensor(np.zeros((2, 3))), ag.Tensor(np.zeros((2, 3))))

    def test_backward_matches_finite_differences(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        check_grads(lambda t: ag.matmul(t["a"], t["b"]).sum(), {"a": a, "b": b}, tol=1e-6)

    def test_batched_backward(self, rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(2, 4, 3))
        check_grads(lambda t: ag.matmul(t["a"], t["b"]).sum(), {"a": a, "b": b}, tol=1e-6)

    def test_mac_counter(self, rng):
        with ag.MacCounter() as mc:
            ag.matmul(ag.Tensor(rng.normal(size=(5, 3, 4))), ag.Tensor(rng.normal(size=(5, 4, 7))))
        assert mc.total == 5 * 3 * 4 * 7


class TestSoftmax:
    def test_symmetry(self):
        out = ag.softmax_rows(ag.Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_large_inputs_no_overflow(self):
        out = ag.softmax_rows(ag.Tensor([[1000.0, 1000.0]]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_nan_propagates(self):
        out = ag.softmax_rows(ag.Tensor([[np.nan, 0.0], [1.0, 2.0]])).data
        assert np.isnan(out[0]).all()
        assert np.isfinite(out[1]).all()

    def test_rows_sum_to_one(self, rng):
        for _ in range(50):
            x = rng.normal(scale=rng.uniform(0.1, 50.0), size=(4, 6))
            y = ag.softmax_rows(ag.Tensor(x)).data
            assert (y >= 0).all()
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)

    def test_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=(2, 3))
        w = rng.normal(size=(2, 3))  # random projection makes the loss non-trivial
        check_grads(lambda t: ag.mul(ag.softmax_rows(t["x"]), ag.Tensor(w)).sum(),
                    {"x": x}, tol=1e-5)


class TestLayernorm:
    def test_constant_row_is_zero(self):
        x = ag.Tensor(np.full((2, 5), 3.0))
        out = ag.layernorm(x, ag.Tensor(np.ones(5)), ag.Tensor(np.zeros(5)), eps=1e-6)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_standardizes_pair(self):
        out = ag.layernorm(ag.Tensor([[1.0, 3.0]]), ag.Tensor(np.ones(2)),
                           ag.Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_normalized_moments(self, rng):
        x = rng.normal(size=(3, 4, 8)) * 7.0 + 2.0
        out = ag.layernorm(ag.Tensor(x), ag.Tensor(np.ones(8)), ag.Tensor(np.zeros(8)), 1e-9)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-5)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            ag.layernorm(ag.Tensor([[1.0]]), ag.Tensor([1.0]), ag.Tensor([0.0]), eps=0.0)

    def test_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=(2, 5))
        gamma = rng.normal(size=5)
        beta = rng.normal(size=5)
        w = rng.normal(size=(2, 5))
        check_grads(
            lambda t: ag.mul(ag.layernorm(t["x"], t["gamma"], t["beta"], 1e-5), ag.Tensor(w)).sum(),
            {"x": x, "gamma": gamma, "beta": beta}, tol=1e-4)


class TestGelu:
    def test_zero(self):
        assert ag.gelu(ag.Tensor([0.0])).data[0] == 0.0

    def test_large_asymptote(self):
        x = np.array([12.0, 30.0])
        for form in ("tanh", "erf"):
            np.testing.assert_allclose(ag.gelu(ag.Tensor(x), form).data, x, rtol=1e-7)

    @pytest.mark.parametrize("form,expected", [("tanh", GELU1_TANH), ("erf", GELU1_ERF)])
    def test_value_at_one(self, form, expected):
        got = ag.gelu(ag.Tensor([1.0]), form).data[0]
        assert abs(got - expected) < 1e-6

    def test_unknown_form_rejected(self):
        with pytest.raises(ValueError):
            ag.gelu(ag.Tensor([1.0]), form="relu")

    @pytest.mark.parametrize("form", ["tanh", "erf"])
    def test_backward_matches_finite_differences(self, form, rng):
        x = rng.normal(size=(3, 4))
        check_grads(lambda t: ag.gelu(t["x"], form).sum(), {"x": x}, tol=1e-5)


class TestCrossEntropy:
    def test_uniform_logits_give_log_c(self):
        for c in (2, 3, 10):
            loss = ag.cross_entropy(ag.Tensor(np.zeros((4, c))), np.zeros(4, dtype=int), 0.0)
            assert abs(loss.item() - math.log(c)) < 1e-9

    def test_confident_correct_is_near_zero(self):
        logits = np.zeros((2, 3))
        logits[0, 1] = 50.0
        logits[1, 2] = 50.0
        loss = ag.cross_entropy(ag.Tensor(logits), np.array([1, 2]), 0.0)
        assert loss.item() < 1e-8

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            ag.cross_entropy(ag.Tensor(np.zeros((2, 3))), np.array([0, 3]), 0.0)

    def test_bad_smoothing(self):
        with pytest.raises(ValueError):
            ag.cross_entropy(ag.Tensor(np.zeros((2, 3))), np.array([0, 1]), 1.0)

    def test_smoothing_zero_equals_nll(self, rng):
        z = rng.normal(size=(4, 5))
        labels = rng.integers(0, 5, size=4)
        loss = ag.cross_entropy(ag.Tensor(z), labels, 0.0).item()
        logp = z - np.log(np.exp(z - z.max(1, keepdims=True)).sum(1, keepdims=True)) - z.max(1, keepdims=True)
        assert abs(loss - (-logp[np.arange(4), labels].mean())) < 1e-9

    @pytest.mark.parametrize("smoothing", [0.0, 0.1])
    def test_backward_matches_finite_differences(self, smoothing, rng):
        z = rng.normal(size=(2, 3))
        labels = np.array([2, 0])
        check_grads(lambda t: ag.cross_entropy(t["z"], labels, smoothing),
                    {"z": z}, tol=1e-5)


class TestStructuralOps:
    """Movement/elementwise ops used by the transformer forward."""

    def test_grads(self, rng):
        x = rng.normal(size=(2, 3, 4))
        y = rng.normal(size=(2, 3, 4))
        row = rng.normal(size=(1, 1, 4))

        cases = [
            (lambda t: (t["x"] + t["y"]).sum(), ("x", "y")),
            (lambda t: (t["x"] + t["row"]).sum(), ("x", "row")),
            (lambda t: ag.mul(t["x"], t["y"]).mean(), ("x", "y")),
            (lambda t: (-t["x"]).sum(), ("x",)),
            (lambda t: (t["x"] * 2.5).sum(), ("x",)),
            (lambda t: ag.reshape(t["x"], (6, 4)).sum(), ("x",)),
            (lambda t: ag.transpose(t["x"], (2, 0, 1)).sum(), ("x",)),
            (lambda t: t["x"][:, 0].sum(), ("x",)),
            (lambda t: t["x"][:, 1:3, :2].mean(), ("x",)),
            (lambda t: ag.concat([t["x"], t["y"]], axis=1).sum(), ("x", "y")),
            (lambda t: ag.broadcast_to(t["row"], (2, 3, 4)).sum(), ("row",)),
        ]
        pool = {"x": x, "y": y, "row": row}
        for fn, names in cases:
            check_grads(fn, {k: pool[k] for k in names}, tol=1e-6)

    def test_grad_accumulates_across_uses(self, rng):
        x = ag.Tensor(rng.normal(size=(3,)), requires_grad=True)
        ((x + x) + x).sum().backward()
        np.testing.assert_allclose(x.grad, 3.0)

    def test_float32_stays_float32(self):
        x = ag.Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)
        y = ag.gelu(ag.layernorm(x + 1.0, ag.Tensor(np.ones(2, dtype=np.float32)),
                                 ag.Tensor(np.zeros(2, dtype=np.float32)), 1e-6)) * 0.5
        assert y.dtype == np.float32
        y.sum().backward()
        assert x.grad.dtype == np.float32

    def test_backward_requires_scalar(self):
        with pytest.raises(ShapeError):
            ag.Tensor(np.zeros(3), requires_grad=True).backward()

    def test_forward_deterministic(self, rng):
        x = rng.normal(size=(4, 4))
        a = ag.softmax_rows(ag.matmul(ag.Tensor(x), ag.Tensor(x))).data
        b = ag.softmax_rows(ag.matmul(ag.Tensor(x.copy()), ag.Tensor(x.copy()))).data
        assert np.array_equal(a, b)


class TestRandomizedGradientProperty:
    """Analytic vs central FD on randomized shapes <= 8x8 for every diff op."""

    @pytest.mark.parametrize("seed", range(6))
    def test_all_ops(self, seed):
        r = np.random.default_rng(seed)
        m, n = int(r.integers(2, 9)), int(r.integers(2, 9))
        k = int(r.integers(2, 9))
        x = r.normal(size=(m, n))
        proj1 = ag.Tensor(r.normal(size=x.shape))
        proj2 = ag.Tensor(r.normal(size=x.shape))
        labels = r.integers(0, n, size=m)
        losses = {
            "matmul": ({"a": r.normal(size=(m, k)), "b": r.normal(size=(k, n))},
                       lambda t: ag.matmul(t["a"], t["b"]).mean()),
            "softmax": ({"x": x.copy()},
                        lambda t: ag.mul(ag.softmax_rows(t["x"]), proj1).sum()),
            "layernorm": ({"x": x.copy(), "g": r.normal(size=n), "b": r.normal(size=n)},
                          lambda t: ag.mul(ag.layernorm(t["x"], t["g"], t["b"], 1e-5),
                                           proj2).sum()),
            "gelu": ({"x": x.copy()}, lambda t: ag.gelu(t["x"]).sum()),
            "xent": ({"z": r.normal(size=(m, n))},
                     lambda t: ag.cross_entropy(t["z"], labels, 0.1)),
        }
        for name, (arrays, fn) in losses.items():
            check_grads(fn, arrays, tol=1e-4)


class TestAdamW:
    def test_zero_grad_no_decay_leaves_params(self):
        w = np.array([1.0, -2.0, 3.0], dtype=np.float32)
        opt = ag.AdamW(lr=0.1, weight_decay=0.0)
        opt.step([("w", w, (slice(None),), np.zeros(3, dtype=np.float32), False)])
        np.testing.assert_array_equal(w, [1.0, -2.0, 3.0])

    def test_first_step_is_minus_lr(self):
        w = np.zeros(1)
        opt = ag.AdamW(lr=0.05)
        opt.step([("w", w, (slice(None),), np.ones(1), False)])
        assert abs(w[0] + 0.05) < 1e-7  # bias-corrected first step

    def test_quadratic_descent(self):
        w = np.array([3.0])
        opt = ag.AdamW(lr=0.2)
        losses = []
        for _ in range(10):
            losses.append(0.5 * float(w[0] ** 2))
            opt.step([("w", w, (slice(None),), w.copy(), False)])
        losses.append(0.5 * float(w[0] ** 2))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_slice_restricted_state(self):
        w = np.zeros((4, 4), dtype=np.float32)
        opt = ag.AdamW(lr=0.1)
        region = (slice(0, 2), slice(0, 3))
        g = np.ones((2, 3), dtype=np.float32)
        opt.step([("w", w, region, g, False)])
        state = opt.state["w"]
        assert (state["t"][region] == 1).all()
        outside = np.ones((4, 4), dtype=bool)
        outside[region] = False
        assert (state["t"][outside] == 0).all()
        assert (state["m"][outside] == 0).all()
        assert (w[outside] == 0).all()
        assert (w[region] != 0).all()

    def test_decay_shrinks_weights(self):
        w = np.array([10.0])
        opt = ag.AdamW(lr=0.1, weight_decay=0.5)
        opt.step([("w", w, (slice(None),), np.zeros(1), True)])
        assert w[0] == 10.0 - 0.1 * 0.5 * 10.0
