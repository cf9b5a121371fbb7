"""Elementwise/reduction/shape ops and the backward machinery."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvstereo import autodiff as ad


class TestMatmul:
    def test_identity(self, f64, rng):
        b = ad.tensor(rng.standard_normal((3, 3)))
        out = ad.matmul(ad.tensor(np.eye(3)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_permutation_matrix(self, f64):
        a = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
        b = ad.tensor([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[2.0, 1.0], [4.0, 3.0]])

    def test_gradient_matches_finite_differences(self, f64, rng):
        a = ad.tensor(rng.standard_normal((4, 5)), requires_grad=True)
        b = ad.tensor(rng.standard_normal((5, 3)), requires_grad=True)
        c = ad.tensor(rng.standard_normal((4, 3)))
        worst = ad.gradcheck(lambda a, b: ad.sum_(ad.matmul(a, b) * c), [a, b],
                             max_entries=None)
        assert worst < 1e-4

    def test_batched_broadcast(self, f64, rng):
        a = ad.tensor(rng.standard_normal((6, 4, 5)), requires_grad=True)
        b = ad.tensor(rng.standard_normal((5, 3)), requires_grad=True)
        c = ad.tensor(rng.standard_normal((6, 4, 3)))
        out = ad.matmul(a, b)
        assert out.shape == (6, 4, 3)
        worst = ad.gradcheck(lambda a, b: ad.sum_(ad.matmul(a, b) * c), [a, b],
                             max_entries=16)
        assert worst < 1e-4

    def test_shape_mismatch_reports_both_shapes(self, f64):
        with pytest.raises(ad.DimensionError, match=r"4, 5.*3, 2"):
            ad.matmul(ad.tensor(np.zeros((4, 5))), ad.tensor(np.zeros((3, 2))))


class TestElementwise:
    def test_elu_at_zero_and_positive(self, f64):
        out = ad.elu(ad.tensor([0.0, 1.5, -1.0]))
        assert out.data[0] == 0.0
        assert out.data[1] == 1.5
        np.testing.assert_allclose(out.data[2], np.expm1(-1.0))

    def test_softmax_of_zeros_is_uniform(self, f64):
        for d in (1, 3, 7):
            out = ad.softmax(ad.tensor(np.zeros(d)), axis=0)
            np.testing.assert_allclose(out.data, np.full(d, 1.0 / d), atol=1e-12)

    def test_max_with_argmax(self, f64):
        values, idx = ad.max_with_argmax(ad.tensor([0.1, 0.9, 0.3]), axis=0)
        assert values.data == pytest.approx(0.9)
        assert idx == 1

    def test_axis_out_of_range(self, f64):
        with pytest.raises(ad.DimensionError, match="axis"):
            ad.sum_(ad.tensor(np.zeros((2, 3))), axis=5)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=12))
    def test_softmax_is_probability_vector(self, xs):
        """Non-negative entries summing to 1 for any finite input."""
        with ad.precision("float64"):
            out = ad.softmax(ad.tensor(np.array(xs)), axis=0).data
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) < 1e-6

    def test_maximum_routes_gradient(self, f64):
        a = ad.tensor([1.0, 5.0], requires_grad=True)
        out = ad.sum_(ad.maximum(a, 3.0))
        out.backward()
        np.testing.assert_array_equal(a.grad, [0.0, 1.0])

    def test_division_and_pow(self, f64, rng):
        x = ad.tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        y = ad.tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        c = ad.tensor(rng.standard_normal((3, 4)))
        worst = ad.gradcheck(
            lambda x, y: ad.sum_((x / y + ad.pow_const(x, 2.5)) * c), [x, y],
            max_entries=None)
        assert worst < 1e-4


class TestShapeOps:
    def test_flatten_reshape_transpose_roundtrip(self, f64, rng):
        x = ad.tensor(rng.standard_normal((2, 3, 4)))
        flat = ad.flatten(x)
        assert flat.shape == (24,)
        back = ad.reshape(flat, (2, 3, 4))
        np.testing.assert_array_equal(back.data, x.data)
        tr = ad.transpose(x, (2, 0, 1))
        assert tr.shape == (4, 2, 3)
        np.testing.assert_array_equal(ad.transpose(tr, (1, 2, 0)).data, x.data)

    def test_getitem_slice_gradient(self, f64, rng):
        x = ad.tensor(rng.standard_normal((4, 6)), requires_grad=True)
        out = ad.sum_(x[1:3, ::2])
        out.backward()
        expected = np.zeros((4, 6))
        expected[1:3, ::2] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_concat_and_stack_gradients(self, f64, rng):
        a = ad.tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = ad.tensor(rng.standard_normal((2, 5)), requires_grad=True)
        c = ad.tensor(rng.standard_normal((2, 8)))
        worst = ad.gradcheck(lambda a, b: ad.sum_(ad.concat([a, b], axis=1) * c),
                             [a, b], max_entries=None)
        assert worst < 1e-4


class TestBackward:
    def test_sum_gives_ones(self, f64, rng):
        x = ad.tensor(rng.standard_normal((3, 4)), requires_grad=True)
        ad.sum_(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_half_square_gives_x(self, f64, rng):
        x = ad.tensor(rng.standard_normal(7), requires_grad=True)
        (ad.sum_(x * x) * 0.5).backward()
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-12)

    def test_repeated_backward_accumulates(self, f64):
        x = ad.tensor([2.0], requires_grad=True)
        loss = ad.sum_(x * 3.0)
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_non_scalar_loss_rejected(self, f64):
        x = ad.tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ad.ContractError, match="scalar"):
            (x * 2.0).backward()

    def test_addition_backward_distributes(self, f64, rng):
        a = ad.tensor(rng.standard_normal(5), requires_grad=True)
        b = ad.tensor(rng.standard_normal(5), requires_grad=True)
        ad.sum_((a + b) * 2.0).backward()
        np.testing.assert_array_equal(a.grad, b.grad)

    def test_diamond_graph_fanout(self, f64):
        """A value consumed at two different graph depths accumulates fully."""
        x = ad.tensor([2.0], requires_grad=True)
        a = x * 3.0
        (a + a * a).backward()
        np.testing.assert_allclose(x.grad, [3.0 + 2.0 * 6.0 * 3.0])


class TestTape:
    def test_topological_order(self, f64, rng):
        x = ad.tensor(rng.standard_normal(4), requires_grad=True)
        a = x * 2.0
        b = a + 1.0
        loss = ad.sum_(a * b)
        tape = ad.Tape.trace(loss)
        positions = {id(node): i for i, node in enumerate(tape.nodes)}
        for node in tape.nodes:
            for inp in node.inputs:
                if inp.node is not None:
                    assert positions[id(inp.node)] < positions[id(node)]

    def test_each_node_visited_once(self, f64, rng):
        x = ad.tensor(rng.standard_normal(4), requires_grad=True)
        a = x * 2.0
        loss = ad.sum_(a * a + a)
        tape = ad.Tape.trace(loss)
        assert len({id(n) for n in tape.nodes}) == len(tape.nodes)

    def test_no_grad_records_nothing(self, f64, rng):
        x = ad.tensor(rng.standard_normal(4), requires_grad=True)
        with ad.no_grad():
            out = ad.sum_(x * x)
        assert out.node is None and not out.requires_grad


class TestPrecisionAndChecks:
    def test_global_dtype_switch(self):
        with ad.precision("float32"):
            assert ad.tensor([1.0]).dtype == np.float32
        with ad.precision("float64"):
            assert ad.tensor([1.0]).dtype == np.float64

    def test_nan_debug_check(self, f64):
        ad.set_nan_checks(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError, match="log"):
                ad.log(ad.tensor([-1.0]))
        finally:
            ad.set_nan_checks(False)

    def test_nan_checks_off_by_default(self, f64):
        with np.errstate(invalid="ignore"):
            out = ad.log(ad.tensor([-1.0]))  # release mode: propagates quietly
        assert np.isnan(out.data).all()
