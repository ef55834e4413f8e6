"""Tensor primitives: forward oracles, tape gradients, and RNG streams."""

import math

import numpy as np
import pytest

import flexdiff.numerics as nm
from flexdiff.numerics import NumericsError, Tensor


@pytest.fixture
def x23(rng):
    return Tensor(rng.standard_normal((2, 3)), requires_grad=True)


def fd_check(f, params, rng=None, rtol=1e-3):
    return nm.finite_difference_gradient_check(
        f, params, rng=rng or np.random.default_rng(0), rtol=rtol
    )


class TestForwardOracles:
    def test_matmul_against_triple_loop(self, rng):
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        out = nm.matmul(Tensor(a), Tensor(b)).data
        ref = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    ref[i, j] += a[i, k] * b[k, j]
        assert np.allclose(out, ref, atol=1e-12)

    def test_matmul_batched(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 5))
        out = nm.matmul(Tensor(a), Tensor(b)).data
        assert np.allclose(out, a @ b)

    def test_matmul_inner_dim_mismatch(self):
        with pytest.raises(NumericsError):
            nm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_elementwise_broadcasting(self, rng):
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((3,))
        assert np.allclose(nm.add(Tensor(a), Tensor(b)).data, a + b)
        assert np.allclose(nm.sub(Tensor(a), Tensor(b)).data, a - b)
        assert np.allclose(nm.mul(Tensor(a), Tensor(b)).data, a * b)
        assert np.allclose(nm.div(Tensor(a), Tensor(b)).data, a / b)

    def test_unary_values(self, rng):
        x = rng.standard_normal((4, 4))
        assert np.allclose(nm.exp(Tensor(x)).data, np.exp(x))
        assert np.allclose(nm.tanh(Tensor(x)).data, np.tanh(x))
        assert np.allclose(nm.sqrt(Tensor(np.abs(x) + 0.1)).data,
                           np.sqrt(np.abs(x) + 0.1))
        assert np.allclose(nm.log(Tensor(np.abs(x) + 0.1)).data,
                           np.log(np.abs(x) + 0.1))

    def test_gelu_tanh_form(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        k = math.sqrt(2.0 / math.pi)
        ref = 0.5 * x * (1.0 + np.tanh(k * (x + 0.044715 * x**3)))
        assert np.allclose(nm.gelu(Tensor(x)).data, ref)

    def test_silu_value(self):
        x = np.array([-1.0, 0.0, 3.0])
        assert np.allclose(nm.silu(Tensor(x)).data, x / (1.0 + np.exp(-x)))

    def test_softmax_rows(self, rng):
        x = rng.standard_normal((3, 5)) * 10.0
        out = nm.softmax(Tensor(x)).data
        assert np.allclose(out.sum(axis=-1), 1.0)
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        assert np.allclose(out, e / e.sum(axis=-1, keepdims=True))

    def test_embedding_lookup_rows(self, rng):
        table = rng.standard_normal((5, 4))
        idx = np.array([3, 0, 3])
        out = nm.embedding_lookup(Tensor(table), idx).data
        assert np.array_equal(out, table[idx])

    def test_embedding_index_range(self):
        with pytest.raises(NumericsError):
            nm.embedding_lookup(Tensor(np.ones((3, 2))), np.array([3]))

    def test_reshape_transpose_roundtrip(self, rng):
        x = rng.standard_normal((2, 3, 4))
        y = nm.transpose(nm.reshape(Tensor(x), (6, 4)), (1, 0))
        assert y.shape == (4, 6)
        assert np.allclose(y.data, x.reshape(6, 4).T)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericsError):
            Tensor(np.array([1.0, np.nan]))


class TestGradients:
    """Every differentiable primitive against central differences."""

    def test_arith_chain(self, x23):
        y = Tensor(np.random.default_rng(5).standard_normal((2, 3)) + 2.0,
                   requires_grad=True)
        fd_check(lambda: nm.tsum(nm.div(nm.mul(x23, x23), y) + nm.sub(x23, y)),
                 [x23, y])

    def test_broadcast_add_unbroadcasts(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((3,)), requires_grad=True)
        nm.tsum(nm.add(x, b)).backward()
        assert np.allclose(b.grad, [2.0, 2.0, 2.0])

    @pytest.mark.parametrize("op", [nm.exp, nm.tanh, nm.gelu, nm.silu])
    def test_unary_grads(self, op, rng):
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        fd_check(lambda: nm.tsum(op(x)), [x])

    def test_log_sqrt_pow_grads(self, rng):
        x = Tensor(rng.random((3, 3)) + 0.5, requires_grad=True)
        fd_check(lambda: nm.tsum(nm.log(x) + nm.sqrt(x) + nm.pow_const(x, 3.0)),
                 [x])

    def test_matmul_grads(self, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        fd_check(lambda: nm.tsum(nm.mul(nm.matmul(a, b), nm.matmul(a, b))),
                 [a, b])

    def test_softmax_grad(self, rng):
        x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        w = rng.standard_normal((2, 5))
        fd_check(lambda: nm.tsum(nm.mul(nm.softmax(x), w)), [x])

    def test_take_scatters(self, rng):
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        nm.tsum(nm.take(x, (slice(0, 2), slice(None)))).backward()
        assert np.allclose(x.grad[:2], 1.0)
        assert np.allclose(x.grad[2:], 0.0)

    def test_concat_splits(self, rng):
        a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3)), requires_grad=True)
        fd_check(lambda: nm.tsum(nm.mul(nm.concat([a, b]), nm.concat([a, b]))),
                 [a, b])

    def test_embedding_grad_accumulates_repeats(self, rng):
        table = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        nm.tsum(nm.embedding_lookup(table, np.array([1, 1, 2]))).backward()
        assert np.allclose(table.grad[1], 2.0)
        assert np.allclose(table.grad[2], 1.0)
        assert np.allclose(table.grad[0], 0.0)

    def test_mean_sum_axes(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        fd_check(lambda: nm.tsum(nm.mul(nm.tmean(x, axis=1), nm.tmean(x, axis=1))),
                 [x])

    def test_reuse_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = nm.add(nm.mul(x, x), x)  # x^2 + x
        y.backward(np.ones(1))
        assert np.allclose(x.grad, [5.0])

    def test_stop_gradient_blocks(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        nm.tsum(nm.mul(x, nm.stop_gradient(x))).backward()
        # only the live branch contributes
        assert np.allclose(x.grad, [3.0])

    def test_no_grad_context(self):
        x = Tensor(np.ones(3), requires_grad=True)
        assert nm.grad_enabled()
        with nm.no_grad():
            assert not nm.grad_enabled()
            y = nm.mul(x, 2.0)
        assert nm.grad_enabled()
        assert y._parents == ()

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(NumericsError):
            nm.mul(x, 2.0).backward()

    def test_fd_checker_catches_detached_branch(self):
        x = Tensor(np.array([1.5]), requires_grad=True)
        with pytest.raises(NumericsError):
            # analytic grad misses the detached factor; numeric does not
            fd_check(lambda: nm.tsum(nm.mul(x, nm.stop_gradient(x))), [x])


class TestLayerNorm:
    def test_output_statistics(self, rng):
        x = rng.standard_normal((4, 10)) * 3.0 + 1.0
        g = Tensor(np.ones(10))
        b = Tensor(np.zeros(10))
        out = nm.layer_norm(Tensor(x), g, b).data
        assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_matches_direct_formula(self, rng):
        x = rng.standard_normal((2, 6))
        g = rng.standard_normal(6)
        b = rng.standard_normal(6)
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        ref = (x - mu) / np.sqrt(var + 1e-6) * g + b
        out = nm.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
        assert np.allclose(out, ref, atol=1e-12)

    def test_grads(self, rng):
        x = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
        g = Tensor(rng.standard_normal(6), requires_grad=True)
        b = Tensor(rng.standard_normal(6), requires_grad=True)
        w = rng.standard_normal((2, 6))
        fd_check(lambda: nm.tsum(nm.mul(nm.layer_norm(x, g, b), w)), [x, g, b])


class TestAttention:
    def _oracle(self, q, k, v, bias=None):
        s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
        if bias is not None:
            s = s + bias
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        return (e / e.sum(axis=-1, keepdims=True)) @ v

    def test_matches_oracle(self, rng):
        q = rng.standard_normal((2, 2, 5, 4))
        k = rng.standard_normal((2, 2, 5, 4))
        v = rng.standard_normal((2, 2, 5, 4))
        out = nm.softmax_attention(Tensor(q), Tensor(k), Tensor(v)).data
        assert np.allclose(out, self._oracle(q, k, v), atol=1e-12)

    def test_segments_equal_separate_runs(self, rng):
        """Block-diagonal masking must reproduce per-segment attention."""
        q = rng.standard_normal((1, 7, 4))
        k = rng.standard_normal((1, 7, 4))
        v = rng.standard_normal((1, 7, 4))
        packed = nm.softmax_attention(Tensor(q), Tensor(k), Tensor(v),
                                      segments=[3, 4]).data
        a = self._oracle(q[:, :3], k[:, :3], v[:, :3])
        b = self._oracle(q[:, 3:], k[:, 3:], v[:, 3:])
        assert np.allclose(packed[:, :3], a, atol=1e-12)
        assert np.allclose(packed[:, 3:], b, atol=1e-12)

    def test_mask_bias_layout(self):
        bias = nm.segment_mask_bias([2, 1])
        assert bias.shape == (3, 3)
        assert np.all(bias[:2, :2] == 0.0)
        assert np.all(bias[2, 2] == 0.0)
        assert np.all(bias[2, :2] == nm.MASK_BIAS)

    def test_segments_and_bias_conflict(self, rng):
        q = Tensor(rng.standard_normal((1, 3, 2)))
        with pytest.raises(NumericsError):
            nm.softmax_attention(q, q, q, segments=[3], bias=np.zeros((3, 3)))

    def test_segment_sum_checked(self, rng):
        q = Tensor(rng.standard_normal((1, 3, 2)))
        with pytest.raises(NumericsError):
            nm.softmax_attention(q, q, q, segments=[2, 2])

    def test_attention_grads(self, rng):
        q = Tensor(rng.standard_normal((1, 4, 3)), requires_grad=True)
        k = Tensor(rng.standard_normal((1, 4, 3)), requires_grad=True)
        v = Tensor(rng.standard_normal((1, 4, 3)), requires_grad=True)
        fd_check(
            lambda: nm.tsum(nm.mul(
                nm.softmax_attention(q, k, v, segments=[2, 2]),
                nm.softmax_attention(q, k, v, segments=[2, 2]))),
            [q, k, v],
        )


class TestFFT:
    def test_roundtrip(self, rng):
        x = rng.standard_normal((3, 8, 16))
        back = nm.ifft2(nm.fft2(x))
        assert np.allclose(back.real, x, atol=1e-12)
        assert np.allclose(back.imag, 0.0, atol=1e-12)

    def test_parseval(self, rng):
        # the unitary normalization preserves energy exactly
        x = rng.standard_normal((8, 8))
        f = nm.fft2(x)
        assert np.isclose(np.sum(np.abs(f) ** 2), np.sum(x**2))

    def test_power_of_two_required(self, rng):
        with pytest.raises(NumericsError):
            nm.fft2(rng.standard_normal((6, 8)))
        with pytest.raises(NumericsError):
            nm.ifft2(rng.standard_normal((8, 12)))


class TestPseudoInverse:
    def penrose(self, m, pinv):
        assert np.allclose(m @ pinv @ m, m, atol=1e-9)
        assert np.allclose(pinv @ m @ pinv, pinv, atol=1e-9)
        assert np.allclose((m @ pinv).T, m @ pinv, atol=1e-9)
        assert np.allclose((pinv @ m).T, pinv @ m, atol=1e-9)

    def test_full_rank(self, rng):
        m = rng.standard_normal((6, 4))
        self.penrose(m, nm.pseudo_inverse(m))

    def test_rank_deficient(self, rng):
        cols = rng.standard_normal((5, 2))
        m = cols @ rng.standard_normal((2, 4))  # rank 2 in a 5x4 matrix
        self.penrose(m, nm.pseudo_inverse(m))

    def test_dim_cap(self):
        with pytest.raises(NumericsError):
            nm.pseudo_inverse(np.zeros((1025, 2)))

    def test_needs_2d(self):
        with pytest.raises(NumericsError):
            nm.pseudo_inverse(np.zeros(4))


class TestAdamStep:
    def test_matches_reference(self, rng):
        p = rng.standard_normal(5)
        g = rng.standard_normal(5)
        m = np.zeros(5)
        v = np.zeros(5)
        lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 0.1
        p1, m1, v1 = nm.adam_step(p, g, m, v, 1, lr, b1, b2, eps, wd)
        m_ref = (1 - b1) * g
        v_ref = (1 - b2) * g * g
        mhat = m_ref / (1 - b1)
        vhat = v_ref / (1 - b2)
        ref = p - lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)
        assert np.allclose(p1, ref, atol=1e-15)
        assert np.allclose(m1, m_ref)
        assert np.allclose(v1, v_ref)

    def test_decoupled_decay_moves_zero_grad_param(self):
        p = np.array([2.0])
        p1, _, _ = nm.adam_step(p, np.zeros(1), np.zeros(1), np.zeros(1),
                                1, 0.1, weight_decay=0.5)
        assert p1[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_step_index_starts_at_one(self):
        with pytest.raises(NumericsError):
            nm.adam_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1),
                         0, 0.1)


class TestPhilox:
    def test_reproducible(self):
        a = nm.philox(3, 5, nm.BRANCH_STEP).standard_normal(8)
        b = nm.philox(3, 5, nm.BRANCH_STEP).standard_normal(8)
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        base = nm.philox(3, 5, nm.BRANCH_STEP).standard_normal(8)
        assert not np.array_equal(base, nm.philox(4, 5, nm.BRANCH_STEP).standard_normal(8))
        assert not np.array_equal(base, nm.philox(3, 6, nm.BRANCH_STEP).standard_normal(8))
        assert not np.array_equal(base, nm.philox(3, 5, nm.BRANCH_UNCOND).standard_normal(8))

    def test_branch_ids_distinct(self):
        ids = [nm.BRANCH_INIT, nm.BRANCH_STEP, nm.BRANCH_COND,
               nm.BRANCH_UNCOND, nm.BRANCH_DATA, nm.BRANCH_TRAIN]
        assert ids == [0, 1, 2, 3, 4, 5]

    def test_negative_rejected(self):
        with pytest.raises(NumericsError):
            nm.philox(0, -1, 0)
