import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vegn import autodiff as ad
from vegn.autodiff import Parameter, Tape, Tensor
from vegn.errors import ContractError, DimensionError, EmptyNeighborhoodError, NonFiniteError, StaleTapeError


def numeric_grad(f, x, step=1e-5):
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def reverse_grad(loss_fn, params):
    ad.zero_grad(params)
    with Tape() as tape:
        loss = loss_fn()
    ad.backward(loss, tape)
    return [p.grad.copy() for p in params]


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_dot_product(self):
        assert ad.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_matches_finite_differences(self, rng):
        a = Parameter(rng.uniform(-1, 1, (3, 4)), "a")
        b = Parameter(rng.uniform(-1, 1, (4, 2)), "b")
        w = rng.uniform(-1, 1, (3, 2))
        loss = lambda: ad.sum(ad.matmul(a, b) * Tensor(w))  # noqa: E731
        ga, gb = reverse_grad(loss, [a, b])
        assert ad.relative_error(ga, numeric_grad(lambda: loss().item(), a.data)) < 1e-6
        assert ad.relative_error(gb, numeric_grad(lambda: loss().item(), b.data)) < 1e-6


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ad.elementwise("sigmoid", Tensor(0.0)).item() == 0.5

    def test_leaky_relu_negative(self):
        assert ad.elementwise("leaky_relu", Tensor(-2.0), slope=0.2).item() == pytest.approx(-0.4, abs=1e-15)

    def test_exp_gradient_at_one(self):
        x = Parameter(np.array([1.0]), "x")
        (g,) = reverse_grad(lambda: ad.sum(ad.elementwise("exp", x)), [x])
        num = numeric_grad(lambda: float(np.exp(x.data).sum()), x.data)
        assert ad.relative_error(g, num) < 1e-6
        assert g[0] == pytest.approx(math.e, rel=1e-15)

    def test_sigmoid_extremes_are_finite(self):
        out = ad.sigmoid(Tensor([-800.0, 800.0]))
        assert out.data[0] == 0.0 and out.data[1] == 1.0

    def test_binary_needs_two_operands(self):
        with pytest.raises(ContractError):
            ad.elementwise("add", Tensor(1.0))

    def test_row_and_column_broadcast(self):
        m = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal((m + Tensor([[1.0, 2.0, 3.0]])).data, [[1, 3, 5], [4, 6, 8]])
        np.testing.assert_array_equal((m * Tensor([[2.0], [0.0]])).data, [[0, 2, 4], [0, 0, 0]])

    @pytest.mark.parametrize("shapes", [((2, 3), (3, 2)), ((2, 3), (2,)), ((2, 3), (1, 2))])
    def test_non_broadcastable_shapes(self, shapes):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.ones(shapes[0])), Tensor(np.ones(shapes[1])))

    def test_non_finite_forward_is_an_error(self):
        with pytest.raises(NonFiniteError):
            ad.log(Tensor([0.0]))


class TestSoftmaxRows:
    def test_equal_logits_uniform(self):
        np.testing.assert_allclose(ad.softmax_rows(Tensor([[2.5, 2.5, 2.5]])).data, [[1 / 3] * 3], rtol=1e-15)

    def test_large_logits_do_not_overflow(self):
        np.testing.assert_array_equal(ad.softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])

    def test_matches_direct_evaluation(self):
        direct = [math.exp(x) / sum(math.exp(y) for y in (1, 2, 3)) for x in (1, 2, 3)]
        np.testing.assert_allclose(ad.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0], direct, atol=1e-12)

    def test_masked_entries_are_exactly_zero(self):
        out = ad.softmax_rows(Tensor([[1.0, 5.0, 2.0]]), mask=[[True, False, True]]).data
        assert out[0, 1] == 0.0
        assert out.sum() == pytest.approx(1.0, abs=1e-15)

    def test_fully_masked_row_raises(self):
        with pytest.raises(EmptyNeighborhoodError):
            ad.softmax_rows(Tensor([[1.0, 2.0]]), mask=[[False, False]])

    def test_flagged_empty_row_is_zero(self):
        out = ad.softmax_rows(Tensor([[1.0, 2.0], [0.0, 1.0]]), mask=[[False, False], [True, True]],
                              allow_empty=True).data
        np.testing.assert_array_equal(out[0], [0.0, 0.0])

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-50, 50, allow_nan=False)))
    def test_rows_are_distributions(self, x):
        out = ad.softmax_rows(Tensor(x)).data
        assert np.all(out >= 0) and np.all(out <= 1)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


class TestBackward:
    def test_square(self):
        x = Parameter(np.array(3.0), "x")
        (g,) = reverse_grad(lambda: x * x, [x])
        assert g == 6.0

    def test_sigmoid_of_linear_map(self, rng):
        W = Parameter(rng.uniform(-1, 1, (2, 2)), "W")
        x = Tensor(rng.uniform(-1, 1, (2, 1)))
        loss = lambda: ad.sum(ad.sigmoid(W @ x))  # noqa: E731
        (g,) = reverse_grad(loss, [W])
        assert ad.relative_error(g, numeric_grad(lambda: loss().item(), W.data)) < 1e-6

    def test_constant_loss_leaves_gradients_zero(self):
        p = Parameter(np.ones(3), "p")
        with Tape() as tape:
            loss = ad.sum(Tensor([1.0, 2.0]))
        ad.backward(loss, tape)
        assert not p.grad.any()

    def test_non_scalar_loss(self):
        p = Parameter(np.ones(3), "p")
        with Tape() as tape:
            out = p * 2.0
        with pytest.raises(ContractError):
            ad.backward(out, tape)

    def test_twice_is_stale(self):
        p = Parameter(np.ones(2), "p")
        with Tape() as tape:
            loss = ad.sum(p * p)
        ad.backward(loss, tape)
        with pytest.raises(StaleTapeError):
            ad.backward(loss, tape)

    def test_accumulates_until_zero_grad(self):
        p = Parameter(np.array([2.0]), "p")
        for _ in range(2):
            with Tape() as tape:
                loss = ad.sum(p * p)
            ad.backward(loss, tape)
        assert p.grad[0] == 8.0
        p.zero_grad()
        assert not p.grad.any() and p.grad.shape == p.data.shape

    def test_reused_intermediate_sums_paths(self):
        p = Parameter(np.array([1.5]), "p")
        with Tape() as tape:
            y = ad.exp(p)
            loss = ad.sum(y * y)
        ad.backward(loss, tape)
        assert p.grad[0] == pytest.approx(2 * math.exp(3.0), rel=1e-14)

    def test_tape_order_is_topological(self):
        a = Parameter(np.ones((2, 2)), "a")
        with Tape() as tape:
            b = a @ a
            c = ad.sigmoid(b)
            ad.sum(c + b)
        produced = set()
        for node in tape.nodes:
            for t in node.inputs:
                assert not t.requires_grad or isinstance(t, Parameter) or id(t) in produced
            produced.add(id(node.out))

    def test_no_tape_means_no_recording(self):
        p = Parameter(np.ones(2), "p")
        out = ad.sum(p * 3.0)
        assert not out.requires_grad


def _ops(rng):
    """(name, forward builder over params, params) for each registered operation."""
    A = lambda *s: Parameter(rng.uniform(-1, 1, s), "a")  # noqa: E731
    B = lambda *s: Parameter(rng.uniform(-1, 1, s), "b")  # noqa: E731
    seg = np.array([0, 2, 2, 1, 0])
    a1, b1 = A(3, 4), B(3, 4)
    a2, b2 = A(3, 4), B(1, 4)
    a3, b3 = A(3, 4), B(3, 1)
    a4, b4 = A(3, 4), Parameter(rng.uniform(1, 2, (3, 4)), "b")
    a5 = Parameter(rng.uniform(1, 2, (3, 4)), "a")
    a6, b6 = A(3, 4), B(4, 2)
    a7 = A(5, 3)
    a8 = A(5, 2)
    a9 = A(4, 5)
    a10, b10 = A(3, 2), B(3, 3)
    mask = rng.random((4, 5)) < 0.6
    return [
        ("add", lambda: a1 + b1, [a1, b1]),
        ("add_row", lambda: a2 + b2, [a2, b2]),
        ("mul_col", lambda: a3 * b3, [a3, b3]),
        ("sub", lambda: a1 - b1, [a1, b1]),
        ("div", lambda: a4 / b4, [a4, b4]),
        ("neg", lambda: -a1, [a1]),
        ("exp", lambda: ad.exp(a1), [a1]),
        ("log", lambda: ad.log(a5), [a5]),
        ("sigmoid", lambda: ad.sigmoid(a1), [a1]),
        ("leaky_relu", lambda: ad.leaky_relu(a1), [a1]),
        ("matmul", lambda: a6 @ b6, [a6, b6]),
        ("transpose", lambda: ad.transpose(a1), [a1]),
        ("sum_axis", lambda: ad.sum(a1, axis=1, keepdims=True), [a1]),
        ("mean", lambda: ad.mean(a1, axis=0), [a1]),
        ("concat", lambda: ad.concat([a10, b10], axis=1), [a10, b10]),
        ("slice_cols", lambda: ad.slice_cols(a1, 1, 3), [a1]),
        ("take_rows", lambda: ad.take_rows(a7, [4, 0, 0, 2]), [a7]),
        ("segment_sum", lambda: ad.segment_sum(a8, seg, 4), [a8]),
        ("segment_softmax", lambda: ad.segment_softmax(a8, seg, 4), [a8]),
        ("softmax_rows", lambda: ad.softmax_rows(a9), [a9]),
        ("softmax_rows_masked", lambda: ad.softmax_rows(a9, mask=mask, allow_empty=True), [a9]),
        ("clip", lambda: ad.clip(a1, -0.5, 0.5), [a1]),
    ]


@pytest.mark.parametrize("index", range(22))
def test_every_operation_matches_finite_differences(index):
    rng = np.random.default_rng(index)
    name, fn, params = _ops(rng)[index]
    weights = {}

    def loss():
        out = fn()
        w = weights.setdefault("w", rng.uniform(-1, 1, out.shape))
        return ad.sum(out * Tensor(w))

    report = ad.grad_check(loss, params, step=1e-5, tolerance=1e-4)
    assert report.passed, (name, report.errors)


def test_grad_check_linear_layer(rng):
    W = Parameter(rng.uniform(-1, 1, (4, 3)), "W")
    b = Parameter(rng.uniform(-1, 1, (1, 3)), "b")
    x = Tensor(rng.uniform(-1, 1, (6, 4)))
    report = ad.grad_check(lambda: ad.sum(x @ W + b), [W, b], step=1e-5, tolerance=1e-6)
    assert report.passed and report.max_error < 1e-6


def test_grad_check_empty():
    report = ad.grad_check(lambda: Tensor(1.0), [])
    assert len(report) == 0 and report.passed


def test_forward_is_bitwise_deterministic(given_model, toy):
    a = given_model.forward(toy).data
    b = given_model.forward(toy).data
    assert a.tobytes() == b.tobytes()
