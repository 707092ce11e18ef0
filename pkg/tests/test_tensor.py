"""Tensor and autodiff checks against independent oracles."""

import math

import numpy as np
import pytest

import hybridlm.tensor as T
from hybridlm.errors import ContractError, NumericInputError, ShapeError, TokenIndexError


def _rand(shape, seed, std=1.0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape) * std).astype(np.float32)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = T.Tensor(np.eye(2, dtype=np.float32))
    out = T.matmul(a, eye)
    assert np.array_equal(out.data, a.data)


def test_matmul_orthogonal_supports():
    a = T.Tensor([[1.0, 0.0], [0.0, 0.0]])
    b = T.Tensor([[0.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(T.matmul(a, b).data, np.zeros((2, 2), np.float32))


def test_matmul_matches_triple_loop_oracle_exactly():
    a = _rand((3, 4), 1)
    b = _rand((4, 5), 2)
    out = T.matmul(T.Tensor(a), T.Tensor(b))
    assert np.array_equal(out.data, T.matmul_oracle(a, b))


def test_matmul_oracle_exactness_larger():
    # same check at a size where BLAS blocking would definitely diverge
    a = _rand((33, 47), 3)
    b = _rand((47, 29), 4)
    assert np.array_equal(T.matmul_exact(a, b), T.matmul_oracle(a, b))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as ei:
        T.matmul(T.Tensor(np.zeros((2, 3), np.float32)), T.Tensor(np.zeros((4, 2), np.float32)))
    assert "(2, 3)" in str(ei.value) and "(4, 2)" in str(ei.value)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_uniform():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0, 0.0]), axis=0)
    assert np.allclose(out.data, 0.25, atol=1e-7)


def test_softmax_no_overflow():
    out = T.softmax(T.Tensor([1000.0, 0.0]), axis=0)
    assert np.isfinite(out.data).all()
    assert out.data[0] == pytest.approx(1.0, abs=1e-6)


def test_softmax_against_float64_oracle():
    x = np.array([1.0, 2.0, 3.0], np.float32)
    want = np.exp(x.astype(np.float64))
    want /= want.sum()
    got = T.softmax(T.Tensor(x), axis=0).data
    assert np.abs(got - want).max() < 1e-6


def test_softmax_sums_to_one_random():
    for seed in range(20):
        x = _rand((5, 9), seed, std=7.0)
        s = T.softmax(T.Tensor(x), axis=1).data.sum(axis=1)
        assert np.abs(s - 1.0).max() < 1e-6


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericInputError):
        T.softmax(T.Tensor(np.array([np.inf, 0.0], np.float32)), axis=0)


# ---------------------------------------------------------------------------
# rms_norm / silu
# ---------------------------------------------------------------------------


def test_rms_norm_ones():
    x = T.Tensor(np.ones((3, 8), np.float32))
    w = T.Tensor(np.ones(8, np.float32))
    out = T.rms_norm(x, w, eps=0.0)
    assert np.allclose(out.data, 1.0, atol=1e-7)


def test_rms_norm_zeros():
    out = T.rms_norm(T.zeros((2, 4)), T.ones(4), eps=1e-6)
    assert np.array_equal(out.data, np.zeros((2, 4), np.float32))


def test_rms_norm_output_rms_is_one():
    x = T.Tensor(_rand((1, 64), 7, std=3.0))
    out = T.rms_norm(x, T.ones(64)).data
    rms = math.sqrt(float(np.mean(out.astype(np.float64) ** 2)))
    assert abs(rms - 1.0) < 1e-4


def test_silu_values():
    assert T.silu(T.Tensor([0.0])).data[0] == 0.0
    assert T.silu(T.Tensor([40.0])).data[0] == pytest.approx(40.0, rel=1e-6)
    want = 1.0 / (1.0 + math.exp(-1.0))
    assert T.silu(T.Tensor([1.0])).data[0] == pytest.approx(want, abs=1e-6)


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------


def test_cross_entropy_one_hot():
    logits = np.zeros((2, 4), np.float32)
    logits[0, 1] = 1000.0
    logits[1, 2] = 1000.0
    loss = T.cross_entropy(T.Tensor(logits), np.array([1, 2]))
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_uniform():
    loss = T.cross_entropy(T.Tensor(np.zeros((3, 4), np.float32)), np.array([0, 1, 3]))
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-6)


def test_cross_entropy_against_float64_oracle():
    logits = _rand((6, 11), 9, std=2.0)
    targets = np.random.default_rng(10).integers(0, 11, 6)
    z = logits.astype(np.float64)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    want = -np.log(p[np.arange(6), targets]).mean()
    got = T.cross_entropy(T.Tensor(logits), targets).item()
    assert got == pytest.approx(want, abs=1e-5)


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(TokenIndexError):
        T.cross_entropy(T.Tensor(np.zeros((2, 4), np.float32)), np.array([0, 4]))


# ---------------------------------------------------------------------------
# backward mechanics
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = T.Tensor(_rand((3, 4), 11), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(x)
    T.backward(tape, loss)
    assert np.array_equal(x.grad, np.ones((3, 4), np.float32))


def test_backward_product_rule():
    x = T.Tensor([2.0], requires_grad=True)
    y = T.Tensor([3.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(x, y))
    T.backward(tape, loss)
    assert x.grad[0] == 3.0 and y.grad[0] == 2.0


def test_backward_fanout_accumulates():
    x = T.Tensor([5.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.add(x, x))
    T.backward(tape, loss)
    assert x.grad[0] == 2.0


def test_backward_requires_scalar_loss():
    x = T.Tensor(_rand((2, 2), 12), requires_grad=True)
    with T.Tape() as tape:
        y = T.add(x, x)
    with pytest.raises(ContractError):
        T.backward(tape, y)


def test_no_recording_without_tape():
    x = T.Tensor(_rand((2, 2), 13), requires_grad=True)
    y = T.silu(x)
    assert y.requires_grad  # flag propagates
    tape = T.Tape()
    assert len(tape) == 0


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------


def test_grad_check_sum_of_squares():
    x = T.Tensor(_rand((4, 5), 14))
    err = T.grad_check(lambda t: T.sum_all(T.mul(t, t)), x)
    assert err < 1e-4


def test_grad_check_two_layer_mlp_cross_entropy():
    w1 = T.Tensor(_rand((6, 16), 15, std=0.5))
    w2 = T.Tensor(_rand((16, 10), 16, std=0.5))
    targets = np.random.default_rng(17).integers(0, 10, 5)
    x0 = T.Tensor(_rand((5, 6), 18))

    def f(x):
        h = T.silu(T.matmul(x, w1))
        return T.cross_entropy(T.matmul(h, w2), targets)

    assert T.grad_check(f, x0) < 1e-3


def test_grad_check_constant_function():
    x = T.Tensor(_rand((3,), 19))
    err = T.grad_check(lambda t: T.sum_all(T.mul(t, T.zeros(t.shape))), x)
    assert err == 0.0


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def test_slice_concat_roundtrip_and_grads():
    x = T.Tensor(_rand((4, 10), 20), requires_grad=True)
    with T.Tape() as tape:
        left = T.slice_cols(x, 0, 3)
        right = T.slice_cols(x, 3, 10)
        back = T.concat_cols([left, right])
        loss = T.sum_all(back)
    assert np.array_equal(back.data, x.data)
    T.backward(tape, loss)
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_gather_scatter_rows_grads():
    x = T.Tensor(_rand((5, 3), 21), requires_grad=True)
    idx = np.array([0, 2, 2])
    with T.Tape() as tape:
        rows = T.take_rows(x, idx)
        out = T.scatter_rows(rows, idx, 5)
        loss = T.sum_all(out)
    T.backward(tape, loss)
    # row 2 gathered twice -> gradient 2, rows 1,3,4 untouched -> 0
    want = np.zeros((5, 3), np.float32)
    want[0] = 1.0
    want[2] = 2.0
    assert np.array_equal(x.grad, want)


def test_causal_conv1d_matches_manual():
    x = _rand((6, 3), 22)
    w = _rand((4, 3), 23)
    b = _rand((3,), 24)
    out = T.causal_conv1d(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
    xp = np.concatenate([np.zeros((3, 3), np.float32), x], axis=0)
    for t in range(6):
        for c in range(3):
            want = np.float32(b[c] + sum(w[tau, c] * xp[t + tau, c] for tau in range(4)))
            assert out[t, c] == pytest.approx(want, rel=1e-6)


def test_causal_softmax_rows_sum_to_one_and_are_causal():
    s = T.Tensor(_rand((5, 5), 25, std=2.0))
    y = T.causal_softmax(s).data
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-6)
    assert np.array_equal(y[np.triu_indices(5, k=1)], np.zeros(10, np.float32))


def test_grad_check_sequence_ops():
    # composite through causal softmax, conv, and gathers
    w = T.Tensor(_rand((3, 4), 26, std=0.5))

    def f(x):
        s = T.matmul(x, T.transpose2d(x))
        att = T.causal_softmax(s)
        y = T.matmul(att, T.matmul(x, w))
        return T.mean_all(T.mul(y, y))

    x0 = T.Tensor(_rand((5, 3), 27))
    assert T.grad_check(f, x0) < 1e-3


def test_grad_check_mamba_scan():
    t_len, h, p, n = 5, 2, 3, 4
    dt = T.Tensor(np.abs(_rand((t_len, h), 28)) * 0.5 + 0.05)
    a = T.Tensor(-np.abs(_rand((h,), 29)) - 0.1)
    b = T.Tensor(_rand((t_len, n), 30))
    c = T.Tensor(_rand((t_len, n), 31))
    d = T.Tensor(_rand((h,), 32))

    def f_x(x3):
        xr = T.reshape(x3, (t_len, h, p))
        y, _ = T.mamba_scan(xr, dt, a, b, c, d)
        return T.mean_all(T.mul(y, y))

    x0 = T.Tensor(_rand((t_len, h * p), 33))
    assert T.grad_check(f_x, x0) < 1e-3

    x_fixed = T.Tensor(_rand((t_len, h, p), 34))

    def f_dt(dtv):
        y, _ = T.mamba_scan(x_fixed, T.clamp(dtv, 1e-4, 10.0), a, b, c, d)
        return T.mean_all(T.mul(y, y))

    assert T.grad_check(f_dt, dt) < 1e-3

    def f_a(av):
        y, _ = T.mamba_scan(x_fixed, dt, av, b, c, d)
        return T.mean_all(T.mul(y, y))

    assert T.grad_check(f_a, a) < 1e-3

    def f_b(bv):
        y, _ = T.mamba_scan(x_fixed, dt, a, bv, c, d)
        return T.mean_all(T.mul(y, y))

    assert T.grad_check(f_b, b) < 1e-3
