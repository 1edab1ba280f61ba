"""Tensor core: arithmetic, broadcasting, reductions, tape backward, grad_check."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dusklab.tensor import (
    PRIMITIVE_CHECKS,
    ShapeMismatch,
    Tape,
    TapeError,
    Tensor,
    backward,
    broadcast_shape,
    concat,
    elementwise,
    grad_check,
    matmul,
    ntt_bytes,
    ntt_from_bytes,
    read_ntt,
    reduce,
    write_ntt,
)


class TestElementwise:
    def test_mul_values(self):
        out = elementwise("mul", Tensor([1.0, 2.0, 3.0]), Tensor([4.0, 5.0, 6.0]))
        assert np.array_equal(out.data, [4.0, 10.0, 18.0])

    def test_add_zero_is_identity_bitwise(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
        out = elementwise("add", x, 0.0)
        assert out.data.tobytes() == x.data.tobytes()

    def test_mul_gradient_matches_finite_differences(self):
        # d/da of sum(a*b) with upstream ones = b
        b = Tensor([3.0, 4.0])
        with Tape() as tape:
            a = Tensor([1.0, 2.0], requires_grad=True)
            loss = (a * b).sum()
        assert np.allclose(tape.backward(loss)[a], [3.0, 4.0])
        err = grad_check(lambda t: (t * b).sum(), Tensor([1.0, 2.0]))
        assert err <= 1e-6

    def test_broadcast_trailing_singleton(self):
        a = Tensor(np.ones((2, 3, 4)))
        b = Tensor(np.arange(4.0))
        assert (a * b).shape == (2, 3, 4)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatch, match=r"\(2, 3\).*\(4,\)"):
            elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones(4)))

    def test_log_domain_error(self):
        with pytest.raises(ValueError, match="non-positive"):
            Tensor([1.0, 0.0]).log()

    def test_div_and_pow_gradients(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)))
        assert grad_check(lambda t: (1.0 / t).sum(), x) <= 1e-6
        assert grad_check(lambda t: (t ** -0.5).sum(), x) <= 1e-6


class TestReduce:
    def test_sum_axis(self):
        assert reduce("sum", Tensor([1.0, 2.0, 3.0]), axes=0).item() == 6.0

    def test_mean_all_ones(self):
        assert reduce("mean", Tensor(np.ones((2, 2)))).item() == 1.0

    def test_max_value_and_subgradient(self):
        with Tape() as tape:
            x = Tensor([-1.0, 5.0, 3.0], requires_grad=True)
            m = x.max()
        assert m.item() == 5.0
        assert np.array_equal(tape.backward(m)[x], [0.0, 1.0, 0.0])
        # finite differences agree away from ties
        assert grad_check(lambda t: t.max(), Tensor([-1.0, 5.0, 3.0])) <= 1e-6

    def test_max_tie_routes_to_first(self):
        with Tape() as tape:
            x = Tensor([2.0, 7.0, 7.0], requires_grad=True)
            m = x.max()
        assert np.array_equal(tape.backward(m)[x], [0.0, 1.0, 0.0])

    def test_invalid_axis(self):
        with pytest.raises(ValueError, match="axis"):
            reduce("sum", Tensor([1.0, 2.0]), axes=3)
        with pytest.raises(ValueError, match="duplicate"):
            reduce("sum", Tensor(np.ones((2, 2))), axes=(0, 0))

    def test_keepdims(self):
        out = reduce("sum", Tensor(np.ones((2, 3))), axes=1, keepdims=True)
        assert out.shape == (2, 1)

    def test_reduction_determinism(self):
        buf = np.random.default_rng(11).normal(size=4096)
        a = reduce("sum", Tensor(buf)).item()
        b = reduce("sum", Tensor(buf.copy())).item()
        assert np.float64(a).tobytes() == np.float64(b).tobytes()


class TestMatmul:
    def test_identity(self):
        x = np.random.default_rng(1).normal(size=(3, 3))
        out = matmul(Tensor(np.eye(3)), Tensor(x))
        assert np.array_equal(out.data, x)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_gradient_vs_finite_differences_seed7(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.normal(size=(3, 2)))
        b = Tensor(rng.normal(size=(2, 4)))
        assert grad_check(lambda t: (t @ b).sum(), a) <= 1e-6

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeMismatch, match="inner"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestBackward:
    def test_sum_gives_ones(self):
        with Tape() as tape:
            x = Tensor(np.zeros((2, 3, 2)), requires_grad=True)
            loss = x.sum()
        assert np.array_equal(tape.backward(loss)[x], np.ones((2, 3, 2)))

    def test_square_loss(self):
        with Tape() as tape:
            x = Tensor([1.0, -2.0], requires_grad=True)
            loss = (x * x).sum()
        assert np.allclose(tape.backward(loss)[x], [2.0, -4.0])

    def test_non_scalar_loss_rejected(self):
        with Tape() as tape:
            x = Tensor([1.0, 2.0], requires_grad=True)
            y = x * 2.0
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(y)

    def test_backward_twice_without_reset(self):
        with Tape() as tape:
            x = Tensor([1.0], requires_grad=True)
            loss = (x * x).sum()
        tape.backward(loss)
        with pytest.raises(TapeError, match="consumed"):
            tape.backward(loss)
        tape.reset()
        assert tape.nodes == []

    def test_off_tape_loss_rejected(self):
        with pytest.raises(TapeError):
            backward(Tensor(3.0))

    def test_linearity_of_tape(self):
        rng = np.random.default_rng(5)
        x0 = rng.normal(size=(4,))

        def l1(t):
            return (t * t).sum()

        def l2(t):
            return (t.exp()).sum()

        with Tape() as tape:
            x = Tensor(x0, requires_grad=True)
            total = l1(x) + l2(x)
        g_joint = tape.backward(total)[x]

        gs = []
        for f in (l1, l2):
            with Tape() as tape:
                x = Tensor(x0, requires_grad=True)
                gs.append(tape.backward(f(x))[x])
        assert np.allclose(g_joint, gs[0] + gs[1], rtol=0, atol=1e-15)

    def test_values_from_other_tapes_are_constants(self):
        with Tape():
            a = Tensor([1.0, 2.0], requires_grad=True)
            y = a * 3.0
        with Tape() as tape2:
            b = Tensor([1.0, 1.0], requires_grad=True)
            loss = (y * b).sum()
        grads = tape2.backward(loss)
        assert a not in grads
        assert np.allclose(grads[b], y.data)


class TestGradCheck:
    def test_linear_function_is_exact(self):
        # small magnitudes keep the central-difference cancellation under 1e-10
        err = grad_check(lambda t: t.sum(), Tensor(np.random.default_rng(2).normal(size=(3, 3)) * 0.05))
        assert err <= 1e-10

    def test_sum_exp(self):
        assert grad_check(lambda t: t.exp().sum(), Tensor([0.0, 1.0])) <= 1e-6

    def test_rejects_non_scalar(self):
        with pytest.raises(ValueError, match="scalar"):
            grad_check(lambda t: t * 2.0, Tensor([1.0, 2.0]))

    @pytest.mark.parametrize("seed", range(10))
    def test_every_registered_primitive(self, seed):
        for name, builder in PRIMITIVE_CHECKS:
            f, x = builder(np.random.default_rng(1000 + seed))
            err = grad_check(f, x)
            assert err <= 1e-5, f"{name}: {err}"


_dims = st.integers(min_value=1, max_value=4)
_shapes = st.lists(_dims, min_size=0, max_size=4).map(tuple)


@settings(max_examples=200, deadline=None)
@given(_shapes, _shapes, _shapes)
def test_broadcast_associativity(s1, s2, s3):
    def bc(a, b):
        try:
            return broadcast_shape(a, b)
        except ShapeMismatch:
            return None

    left = bc(s1, s2)
    left = bc(left, s3) if left is not None else None
    right = bc(s2, s3)
    right = bc(s1, right) if right is not None else None
    assert left == right


def test_concat_gradient_splits():
    rng = np.random.default_rng(9)
    other = Tensor(rng.normal(size=(2, 3)))
    err = grad_check(lambda t: (concat([t, other], axis=1) ** 2.0).sum(), Tensor(rng.normal(size=(2, 2))))
    assert err <= 1e-5


class TestNtt:
    def test_round_trip_bitwise(self, tmp_path):
        arr = np.random.default_rng(4).normal(size=(2, 3, 4))
        path = tmp_path / "t.ntt"
        write_ntt(path, arr)
        back = read_ntt(path)
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    def test_header_layout(self):
        blob = ntt_bytes(np.zeros((2, 5)))
        assert blob[:4] == b"NTT1"
        assert int.from_bytes(blob[4:8], "little") == 2
        assert int.from_bytes(blob[8:12], "little") == 2
        assert int.from_bytes(blob[12:16], "little") == 5
        assert len(blob) == 16 + 10 * 8

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            ntt_from_bytes(b"XXXX" + b"\0" * 16)

    def test_scalar_and_offset(self):
        blob = ntt_bytes(np.float64(3.5)) + ntt_bytes(np.arange(3.0))
        first, used = ntt_from_bytes(blob)
        assert first.reshape(()) == 3.5
        second, _ = ntt_from_bytes(blob, offset=used)
        assert np.array_equal(second, [0.0, 1.0, 2.0])
