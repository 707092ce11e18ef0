"""Minimal dense tensor type with tape-based reverse-mode differentiation.

Design goals, in order: verifiability, determinism, speed. Reference
precision is float32 throughout. Matrix multiplication uses a fixed
summation order (for each output element, products are accumulated over
the contraction index k in increasing order, one float32 rounding per
add), so results can be compared bit-for-bit against a scalar triple-loop
oracle instead of with tolerances.

Gradients are recorded on an explicit :class:`Tape`. Ops only record when
a tape is active and some input requires gradients, so inference code
pays no bookkeeping cost. Gradients accumulate into ``Tensor.grad``; the
training loop is responsible for zeroing them.

Threading: a tape and the tensors recorded on it belong to one thread.
Independent tapes may run concurrently; there is no shared mutable state.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericInputError, ShapeError, TokenIndexError

# ---------------------------------------------------------------------------
# Exact matmul kernels
# ---------------------------------------------------------------------------
#
# BLAS reorders float32 sums (blocking, SIMD), which breaks bit-exact oracle
# comparisons. The numba kernel below keeps per-element accumulation in
# increasing-k order while letting LLVM vectorize across independent output
# columns. The numpy fallback performs the same per-element rounding sequence.

_USE_NUMBA = os.environ.get("HYBRIDLM_NO_NUMBA", "") == ""

if _USE_NUMBA:
    try:
        from numba import njit

        @njit(cache=True)
        def _mm_kernel(a, b, out):
            m, kk = a.shape
            n = b.shape[1]
            for i in range(m):
                for k in range(kk):
                    aik = a[i, k]
                    for j in range(n):
                        out[i, j] += aik * b[k, j]
            return out

    except ImportError:  # pragma: no cover
        _USE_NUMBA = False

if not _USE_NUMBA:

    def _mm_kernel(a, b, out):
        for k in range(a.shape[1]):
            out += a[:, k : k + 1] * b[k : k + 1, :]
        return out


def matmul_exact(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw float matmul with fixed k-increasing accumulation order."""
    if a.dtype == np.float64 or b.dtype == np.float64:
        # float64 path only serves verification oracles; order is irrelevant
        # there because the extra precision swamps reassociation effects.
        return np.asarray(a, np.float64) @ np.asarray(b, np.float64)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    return _mm_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b), out)


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Scalar triple-loop reference (k innermost), for tests. Slow."""
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for k in range(kk):
                acc = np.float32(acc + np.float32(a[i, k] * b[k, j]))
            out[i, j] = acc
    return out


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Dense row-major float array with optional gradient buffer.

    ``data`` is float32 in normal operation; verification oracles may carry
    float64 through the same ops. ``grad``, when present, matches ``data``
    in shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in forward order, which guarantees every node's
    inputs appear earlier on the tape; the backward pass is a single
    reverse sweep that visits each node exactly once.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._nodes.append((out, inputs, backward))

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _STATE.stack.pop()
        assert popped is self


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _TapeState()


def active_tape() -> Tape | None:
    return _STATE.stack[-1] if _STATE.stack else None


def _make(out_data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording it when gradients are being traced."""
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    tape = active_tape()
    if req and tape is not None:
        tape.record(out, tuple(inputs), backward)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` for every tensor reachable from ``loss``.

    Gradients accumulate across fan-out and across repeated calls; callers
    zero parameter grads explicitly between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.accumulate_grad(np.ones_like(loss.data))
    for out, inputs, bwd in reversed(tape._nodes):
        if out.grad is None:
            continue  # not reachable from the loss
        grads = bwd(out.grad)
        for t, g in zip(inputs, grads):
            if g is not None:
                t.accumulate_grad(g)


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, np.float32), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, np.float32), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(np.float32) * np.float32(std),
                  requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Broadcasting helper
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Core ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with fixed summation order.

    Backward: dA = dC @ B^T, dB = A^T @ dC.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = matmul_exact(a.data, b.data)

    def bwd(dout):
        da = matmul_exact(dout, b.data.T) if a.requires_grad else None
        db = matmul_exact(a.data.T, dout) if b.requires_grad else None
        return da, db

    return _make(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(dout):
        return (_unbroadcast(dout, a.shape) if a.requires_grad else None,
                _unbroadcast(dout, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(dout):
        return (_unbroadcast(dout, a.shape) if a.requires_grad else None,
                _unbroadcast(-dout, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(dout):
        return (_unbroadcast(dout * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(dout * a.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    cc = a.data.dtype.type(c)

    def bwd(dout):
        return (dout * cc,)

    return _make(a.data * cc, (a,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    s = s.astype(x.data.dtype)

    def bwd(dout):
        return (dout * s * (1.0 - s),)

    return _make(s, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = (1.0 / (1.0 + np.exp(-x.data))).astype(x.data.dtype)
    out = x.data * s

    def bwd(dout):
        # d/dx x*s = s + x*s*(1-s)
        return (dout * (s + x.data * s * (1.0 - s)),)

    return _make(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(dout):
        return (dout * out,)

    return _make(out, (x,), bwd)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow for large x."""
    out = np.where(x.data > 30.0, x.data, np.log1p(np.exp(np.minimum(x.data, 30.0))))
    out = out.astype(x.data.dtype)
    s = (1.0 / (1.0 + np.exp(-x.data))).astype(x.data.dtype)

    def bwd(dout):
        return (dout * s,)

    return _make(out, (x,), bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = ((x.data >= lo) & (x.data <= hi)).astype(x.data.dtype)

    def bwd(dout):
        return (dout * mask,)

    return _make(out, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction; total on any finite input."""
    if not np.isfinite(x.data).all():
        raise NumericInputError("softmax requires finite inputs")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(dout):
        inner = (dout * y).sum(axis=axis, keepdims=True)
        return (y * (dout - inner),)

    return _make(y, (x,), bwd)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * weight over the trailing axis."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"rms_norm trailing dim {x.shape[-1]} != weight dim {weight.shape[0]}")
    d = x.shape[-1]
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    r = r.astype(x.data.dtype)
    xn = x.data * r
    out = xn * weight.data

    def bwd(dout):
        dx = None
        if x.requires_grad:
            inner = (dout * weight.data * x.data).sum(axis=-1, keepdims=True)
            dx = dout * weight.data * r - x.data * (r ** 3) * inner / d
        dw = (dout * xn).reshape(-1, d).sum(axis=0) if weight.requires_grad else None
        return dx, dw

    return _make(out, (x, weight), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the target entries. Targets: int ids [T]."""
    targets = np.asarray(targets)
    t, v = logits.shape
    if targets.ndim != 1 or targets.shape[0] != t:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.min(initial=0) < 0 or (targets.size and targets.max() >= v):
        raise TokenIndexError(f"target id out of range for vocab {v}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    sums = e.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(sums)
    rows = np.arange(t)
    out = np.asarray(-logp[rows, targets].mean(), dtype=z.dtype)

    def bwd(dout):
        p = e / sums
        p[rows, targets] -= 1.0
        return (p * (dout / t),)

    return _make(out, (logits,), bwd)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[t] = weight[ids[t]]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise TokenIndexError(f"token id out of range for vocab {weight.shape[0]}")
    out = weight.data[ids]

    def bwd(dout):
        dw = np.zeros_like(weight.data)
        np.add.at(dw, ids, dout)
        return (dw,)

    return _make(out, (weight,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(dout):
        return (np.broadcast_to(dout, x.shape).astype(x.data.dtype),)

    return _make(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def bwd(dout):
        return (np.broadcast_to(dout / n, x.shape).astype(x.data.dtype),)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Shape / indexing ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    def bwd(dout):
        return (dout.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bwd)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d needs a matrix, got shape {x.shape}")

    def bwd(dout):
        return (dout.T,)

    return _make(x.data.T, (x,), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a matrix."""
    out = x.data[:, start:stop]

    def bwd(dout):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = dout
        return (dx,)

    return _make(out, (x,), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def bwd(dout):
        return tuple(
            dout[:, offsets[i] : offsets[i + 1]] if p.requires_grad else None
            for i, p in enumerate(parts)
        )

    return _make(out, tuple(parts), bwd)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)
    out = x.data[idx]

    def bwd(dout):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, dout)
        return (dx,)

    return _make(out, (x,), bwd)


def scatter_rows(vals: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Rows of ``vals`` added into a zero [num_rows, d] matrix at ``idx``."""
    idx = np.asarray(idx)
    out = np.zeros((num_rows, vals.shape[1]), dtype=vals.data.dtype)
    np.add.at(out, idx, vals.data)

    def bwd(dout):
        return (dout[idx],)

    return _make(out, (vals,), bwd)


def gather_cols(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[t, k] = x[t, idx[t, k]] for per-row column indices."""
    idx = np.asarray(idx)
    out = np.take_along_axis(x.data, idx, axis=1)
    rows = np.arange(x.shape[0])[:, None]

    def bwd(dout):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, idx), dout)
        return (dx,)

    return _make(out, (x,), bwd)


def take_elems(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """1-D gather out[i] = x[rows[i], cols[i]]."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = x.data[rows, cols]

    def bwd(dout):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, cols), dout)
        return (dx,)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Sequence ops (attention mask, depthwise conv, state-space scan)
# ---------------------------------------------------------------------------


def causal_softmax(scores: Tensor) -> Tensor:
    """Row-wise softmax over the causal prefix: row t spans columns 0..t.

    Entries above the diagonal are exactly zero in the output and receive
    zero gradient, so no -inf sentinel ever enters the arithmetic.
    """
    t = scores.shape[0]
    if scores.shape != (t, t):
        raise ShapeError(f"causal_softmax needs square scores, got {scores.shape}")
    mask = np.tril(np.ones((t, t), dtype=bool))
    z = scores.data
    zmax = np.where(mask, z, -np.inf).max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z - zmax), 0.0).astype(z.dtype)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(dout):
        inner = (dout * y).sum(axis=1, keepdims=True)
        return (y * (dout - inner),)

    return _make(y, (scores,), bwd)


def causal_conv1d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution along the time axis.

    x: [T, C], w: [K, C], bias: [C]. Output[t, c] = bias[c] +
    sum_tau w[tau, c] * x[t - K + 1 + tau, c], zero-padded on the left.
    """
    t, c = x.shape
    k = w.shape[0]
    if w.shape[1] != c or bias.shape[0] != c:
        raise ShapeError(f"conv channel mismatch: x {x.shape}, w {w.shape}, bias {bias.shape}")
    dtype = np.result_type(x.data, w.data, bias.data)
    xp = np.concatenate([np.zeros((k - 1, c), dtype), x.data.astype(dtype, copy=False)], axis=0)
    out = np.broadcast_to(bias.data, (t, c)).astype(dtype).copy()
    for tau in range(k):
        out += w.data[tau] * xp[tau : tau + t]

    def bwd(dout):
        dx = np.zeros_like(xp) if x.requires_grad else None
        dw = np.zeros_like(w.data) if w.requires_grad else None
        for tau in range(k):
            if dw is not None:
                dw[tau] = (dout * xp[tau : tau + t]).sum(axis=0)
            if dx is not None:
                dx[tau : tau + t] += dout * w.data[tau]
        db = dout.sum(axis=0) if bias.requires_grad else None
        return (dx[k - 1 :] if dx is not None else None, dw, db)

    return _make(out, (x, w, bias), bwd)


def mamba_scan(
    x: Tensor,
    dt: Tensor,
    a_coef: Tensor,
    b_in: Tensor,
    c_out: Tensor,
    d_skip: Tensor,
    h0: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Sequential selective-state-space scan with per-head scalar decay.

    Shapes: x [T, H, P], dt [T, H], a_coef [H] (negative), b_in [T, N],
    c_out [T, N], d_skip [H]. Per step t and head h:

        decay_t = exp(dt[t,h] * a[h])                      in (0, 1)
        state   = decay_t * state + dt[t,h] * (x_t outer b_t)
        y[t,h,p] = sum_n c_t[n] * state[h,p,n] + d_skip[h] * x[t,h,p]

    Returns the output [T, H, P] and the final state [H, P, N] as a plain
    array (states are inference bookkeeping, not differentiated through).
    """
    t_len, h, p = x.shape
    n = b_in.shape[1]
    dtype = np.result_type(x.data, dt.data, a_coef.data, b_in.data, c_out.data, d_skip.data)
    state = np.zeros((h, p, n), dtype) if h0 is None else h0.astype(dtype).copy()

    decays = np.exp(dt.data[:, :, None, None] * a_coef.data[None, :, None, None])
    hs = np.empty((t_len + 1, h, p, n), dtype)
    hs[0] = state
    y = np.empty((t_len, h, p), dtype)
    for t in range(t_len):
        contrib = dt.data[t][:, None, None] * (x.data[t][:, :, None] * b_in.data[t][None, None, :])
        hs[t + 1] = decays[t] * hs[t] + contrib
        y[t] = np.einsum("hpn,n->hp", hs[t + 1], c_out.data[t]) + d_skip.data[:, None] * x.data[t]

    def bwd(dout):
        dx = np.zeros_like(x.data)
        ddt = np.zeros_like(dt.data)
        da = np.zeros_like(a_coef.data)
        db = np.zeros_like(b_in.data)
        dc = np.zeros_like(c_out.data)
        dd = np.zeros_like(d_skip.data)
        dh = np.zeros((h, p, n), dtype)
        for t in range(t_len - 1, -1, -1):
            g = dout[t]  # [H, P]
            dc[t] = np.einsum("hp,hpn->n", g, hs[t + 1])
            dd += (g * x.data[t]).sum(axis=1)
            dx[t] += d_skip.data[:, None] * g
            dht = dh + g[:, :, None] * c_out.data[t][None, None, :]
            # through decay = exp(dt * a)
            ddecay = (dht * hs[t]).sum(axis=(1, 2))  # [H]
            dec = decays[t, :, 0, 0]
            ddt[t] += ddecay * dec * a_coef.data
            da += ddecay * dec * dt.data[t]
            # through the injection dt * (x outer b)
            outer = x.data[t][:, :, None] * b_in.data[t][None, None, :]
            ddt[t] += (dht * outer).sum(axis=(1, 2))
            db[t] = np.einsum("hpn,hp,h->n", dht, x.data[t], dt.data[t])
            dx[t] += dt.data[t][:, None] * np.einsum("hpn,n->hp", dht, b_in.data[t])
            dh = decays[t] * dht
        return dx, ddt, da, db, dc, dd

    out = _make(y, (x, dt, a_coef, b_in, c_out, d_skip), bwd)
    return out, hs[t_len].copy()


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between autodiff and central differences.

    The autodiff gradient is computed at float32, as the model runs. The
    difference quotient (f(x+eps*e_i) - f(x-eps*e_i)) / 2eps is evaluated
    with the network carried in float64, the same oracle precision used
    elsewhere; float32 forward evaluations are too noisy for a
    per-coordinate comparison. Coordinates where both gradients are below
    1e-6 in magnitude are compared absolutely instead of relatively.
    """
    xg = Tensor(np.array(x.data, np.float32, copy=True), requires_grad=True)
    with Tape() as tape:
        out = f(xg)
    if out.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    backward(tape, out)
    g_ad = xg.grad if xg.grad is not None else np.zeros_like(xg.data)

    base = x.data.astype(np.float64)
    flat = base.reshape(-1)
    fd = np.zeros(flat.size, np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(base.reshape(x.shape))).item()
        flat[i] = orig - eps
        fm = f(Tensor(base.reshape(x.shape))).item()
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * eps)

    fd = fd.reshape(x.shape)
    ad = g_ad.astype(np.float64)
    mag = np.maximum(np.abs(fd), np.abs(ad))
    err = np.where(mag < 1e-6, np.abs(fd - ad), np.abs(fd - ad) / np.maximum(mag, 1e-300))
    return float(err.max()) if err.size else 0.0
