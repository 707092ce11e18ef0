"""Bit-exact 4/8-bit microscaling formats and simulated quantized GEMMs.

Two storage formats are modeled:

* 4-bit: E2M1 elements in 16-element micro-blocks (1D along the last axis)
  or 16x16 tiles (2D, for weights), each block carrying an E4M3 scale, plus
  one float32 power-of-two global scale per tensor.
* 8-bit: E4M3 elements in 32-element blocks with power-of-two (E8M0)
  block scales.

No low-precision arithmetic is performed anywhere: tensors are encoded,
decoded, and multiplied with the reference matmul (quantize-dequantize
simulation). Every decode is exact in float32 because element grids have
few significand bits, block scales have four, and global scales are powers
of two, so dequantized values are products that round nowhere.

Supporting machinery: sign-randomized Hadamard transforms for spreading
outliers ahead of gradient-side quantization, seeded stochastic rounding,
a flush-to-zero meter, and the per-layer precision policy used when wiring
a model for mixed-precision training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, NumericInputError, ShapeError, UndefinedRateError
from .tensor import Tensor, _make, matmul_exact

# ---------------------------------------------------------------------------
# Rounding modes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundingMode:
    """Nearest-even or seeded stochastic rounding.

    Stochastic draws are a pure function of (seed, element index): the
    uniform array is generated over the padded block grid in C order, so
    the same seed and input always produce the same codes.
    """

    kind: str  # "nearest" | "stochastic"
    seed: int = 0

    def uniforms(self, shape) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(key=self.seed))
        return rng.random(shape)


NEAREST_EVEN = RoundingMode("nearest")


def stochastic(seed: int) -> RoundingMode:
    return RoundingMode("stochastic", seed)


# ---------------------------------------------------------------------------
# Grids and scalar codecs
# ---------------------------------------------------------------------------

# E2M1: 1 sign, 2 exponent, 1 mantissa. Magnitudes by code index (exp<<1|man).
E2M1_GRID = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0], np.float32)
E2M1_MAX = 6.0


def _build_e4m3() -> tuple[np.ndarray, np.ndarray]:
    """Decode table for all 256 E4M3 codes and the sorted magnitude grid."""
    vals = np.zeros(256, np.float64)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        e = (code >> 3) & 0xF
        m = code & 0x7
        if e == 0:
            mag = m * 2.0 ** -9  # subnormals
        elif e == 15 and m == 7:
            mag = np.nan  # the only non-finite code pair
        else:
            mag = (1.0 + m / 8.0) * 2.0 ** (e - 7)
        vals[code] = sign * mag
    table = vals.astype(np.float32)
    return table, table[:127].copy()  # codes 0..126 are the sorted magnitudes


E4M3_TABLE, E4M3_GRID = _build_e4m3()
E4M3_MAX = 448.0
E8M0_MIN_EXP, E8M0_MAX_EXP = -127, 127

# Mantissa parity equals sorted-grid-index parity for both grids (each binade
# contributes a full even-sized run of mantissa values), so nearest-even ties
# resolve to the even index.


def _round_index_nearest_even(mag: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Index of the nearest grid value; ties go to the even-mantissa code."""
    pos = np.searchsorted(grid, mag)
    lo = np.clip(pos - 1, 0, len(grid) - 1)
    hi = np.clip(pos, 0, len(grid) - 1)
    d_lo = mag - grid[lo]
    d_hi = grid[hi] - mag
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    return np.where(take_hi, hi, lo)


def _round_index_stochastic(mag: np.ndarray, grid: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Lower or upper bracketing index with P(upper) = (x-lo)/(hi-lo)."""
    lo = np.clip(np.searchsorted(grid, mag, side="right") - 1, 0, len(grid) - 1)
    hi = np.minimum(lo + 1, len(grid) - 1)
    gap = grid[hi] - grid[lo]
    p = np.where(gap > 0, (mag - grid[lo]) / np.where(gap > 0, gap, 1.0), 0.0)
    p = np.clip(p, 0.0, 1.0)
    return np.where(u < p, hi, lo)


def _round_index_up(mag: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Smallest grid index whose value is >= mag, clamped to the top."""
    return np.clip(np.searchsorted(grid, mag, side="left"), 0, len(grid) - 1)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NumericInputError(f"{what} requires finite inputs")


def encode_e2m1(x, mode: RoundingMode = NEAREST_EVEN) -> np.ndarray:
    """4-bit codes (sign<<3 | grid index) for values clamped to +-6."""
    arr = np.asarray(x, np.float32)
    _check_finite(arr, "encode_e2m1")
    mag = np.abs(arr)
    if mode.kind == "stochastic":
        idx = _round_index_stochastic(np.minimum(mag, E2M1_MAX), E2M1_GRID, mode.uniforms(arr.shape))
    else:
        idx = _round_index_nearest_even(mag, E2M1_GRID)
    sign = np.signbit(arr).astype(np.uint8)
    return ((sign << 3) | idx.astype(np.uint8)).astype(np.uint8)


def decode_e2m1(codes) -> np.ndarray:
    codes = np.asarray(codes, np.uint8)
    vals = E2M1_GRID[codes & 0x7]
    return np.where(codes & 0x8, -vals, vals).astype(np.float32)


def encode_e4m3(x, mode: RoundingMode = NEAREST_EVEN, round_up: bool = False) -> np.ndarray:
    """8-bit codes; finite-only (the NaN code is never produced)."""
    arr = np.asarray(x, np.float32)
    _check_finite(arr, "encode_e4m3")
    mag = np.abs(arr)
    if round_up:
        idx = _round_index_up(mag, E4M3_GRID)
    elif mode.kind == "stochastic":
        idx = _round_index_stochastic(np.minimum(mag, E4M3_MAX), E4M3_GRID, mode.uniforms(arr.shape))
    else:
        idx = _round_index_nearest_even(mag, E4M3_GRID)
    sign = np.signbit(arr).astype(np.uint8)
    return ((sign << 7) | idx.astype(np.uint8)).astype(np.uint8)


def decode_e4m3(codes) -> np.ndarray:
    codes = np.asarray(codes, np.uint8)
    if np.any((codes & 0x7F) == 0x7F):
        raise NumericInputError("NaN E4M3 code cannot be decoded")
    return E4M3_TABLE[codes]


# ---------------------------------------------------------------------------
# Block-scaled tensors
# ---------------------------------------------------------------------------


class Layout(str, Enum):
    BLOCK_1D = "1d16"   # 16-element micro-blocks along the last axis
    BLOCK_2D = "2d16"   # 16x16 tiles over a matrix (weights)


BLOCK_1D_SIZE = 16
BLOCK_2D_TILE = 16
MXFP8_BLOCK = 32


@dataclass
class QuantizedTensorNVFP4:
    """4-bit codes + E4M3 block scales + float32 power-of-two global scale.

    Codes and scales are stored over the zero-padded block grid; padding
    decodes to zero and is sliced off on dequantize.
    """

    shape: tuple[int, ...]
    layout: Layout
    codes: np.ndarray        # uint8, padded grid, one code value per element
    block_scales: np.ndarray  # uint8 E4M3 codes
    global_scale: np.float32

    def dequantize(self) -> np.ndarray:
        vals = decode_e2m1(self.codes)
        scales = decode_e4m3(self.block_scales) * self.global_scale
        if self.layout == Layout.BLOCK_1D:
            rows, nblk, bs = vals.shape
            out = vals * scales[:, :, None]
            out = out.reshape(rows, nblk * bs)[:, : self.shape[-1]]
            return out.reshape(self.shape).astype(np.float32)
        pr, pc = vals.shape
        tr, tc = pr // BLOCK_2D_TILE, pc // BLOCK_2D_TILE
        tiled = vals.reshape(tr, BLOCK_2D_TILE, tc, BLOCK_2D_TILE)
        out = tiled * scales[:, None, :, None]
        out = out.reshape(pr, pc)[: self.shape[0], : self.shape[1]]
        return out.astype(np.float32)


@dataclass
class QuantizedTensorMXFP8:
    """E4M3 element codes in 32-element blocks with power-of-two scales."""

    shape: tuple[int, ...]
    codes: np.ndarray        # uint8 E4M3, padded to whole blocks
    scale_exps: np.ndarray   # int16 exponents, one per block

    def dequantize(self) -> np.ndarray:
        vals = decode_e4m3(self.codes)
        scales = np.ldexp(np.float32(1.0), self.scale_exps.astype(np.int32))
        out = vals * scales[:, :, None].astype(np.float32)
        rows, nblk, bs = vals.shape
        return out.reshape(rows, nblk * bs)[:, : self.shape[-1]].reshape(self.shape).astype(np.float32)


def _pow2_global_scale(amax: float) -> np.float32:
    """Smallest power of two g with amax/(6g) <= 448, floored at 2^-126.

    A power of two keeps every block_scale * global product exact in
    float32; the raw block scale of the hottest block lands in (224, 448].
    """
    if amax <= 0.0:
        return np.float32(2.0 ** -126)
    e = int(np.ceil(np.log2(amax / (E2M1_MAX * E4M3_MAX))))
    # guard against log2 rounding at exact powers of two
    while amax / 2.0 ** e > E2M1_MAX * E4M3_MAX:
        e += 1
    while e - 1 >= -126 and amax / 2.0 ** (e - 1) <= E2M1_MAX * E4M3_MAX:
        e -= 1
    return np.float32(2.0 ** max(e, -126))


def _pad_last(two_d: np.ndarray, block: int) -> np.ndarray:
    rows, cols = two_d.shape
    pad = (-cols) % block
    if pad:
        two_d = np.concatenate([two_d, np.zeros((rows, pad), two_d.dtype)], axis=1)
    return two_d


def quantize_nvfp4(
    t: Tensor | np.ndarray,
    layout: Layout = Layout.BLOCK_1D,
    mode: RoundingMode = NEAREST_EVEN,
    global_scale: float | None = None,
) -> QuantizedTensorNVFP4:
    """Encode a tensor as E2M1 codes with E4M3 block scales.

    Block scales are amax(block) / (6 * global), encoded rounding up in
    magnitude so scaled elements never exceed +-6 and the element encoder
    never clamps. All-zero blocks get scale code 0 and element codes 0.
    ``global_scale`` overrides the derived per-tensor scale (used by tests
    that need unit scales).
    """
    data = np.asarray(t.data if isinstance(t, Tensor) else t, np.float32)
    _check_finite(data, "quantize_nvfp4")
    shape = data.shape
    g = np.float32(global_scale) if global_scale is not None else _pow2_global_scale(
        float(np.abs(data).max(initial=0.0))
    )

    if layout == Layout.BLOCK_1D:
        rows = int(np.prod(shape[:-1], dtype=np.int64)) if len(shape) > 1 else 1
        flat = _pad_last(data.reshape(rows, shape[-1] if shape else 1), BLOCK_1D_SIZE)
        blocks = flat.reshape(rows, -1, BLOCK_1D_SIZE)
        amax = np.abs(blocks).max(axis=2)
    elif layout == Layout.BLOCK_2D:
        if data.ndim != 2:
            raise ShapeError(f"2D block layout needs a matrix, got shape {shape}")
        padded = _pad_last(data, BLOCK_2D_TILE)
        padded = _pad_last(padded.T, BLOCK_2D_TILE).T
        pr, pc = padded.shape
        tiled = padded.reshape(pr // BLOCK_2D_TILE, BLOCK_2D_TILE, pc // BLOCK_2D_TILE, BLOCK_2D_TILE)
        amax = np.abs(tiled).max(axis=(1, 3))
    else:  # pragma: no cover
        raise ConfigError(f"unknown layout {layout}")

    raw = amax.astype(np.float64) / (E2M1_MAX * float(g))
    scale_codes = encode_e4m3(raw.astype(np.float32), round_up=True)
    scale_codes[amax == 0.0] = 0
    scales = decode_e4m3(scale_codes)
    eff = scales * g  # exact: 4-bit significand times a power of two
    safe = np.where(eff > 0, eff, 1.0).astype(np.float32)

    live = (eff != 0.0).astype(np.uint8)
    if layout == Layout.BLOCK_1D:
        scaled = blocks / safe[:, :, None]
        codes = encode_e2m1(scaled, mode) * live[:, :, None]
    else:
        scaled = tiled / safe[:, None, :, None]
        codes = (encode_e2m1(scaled, mode) * live[:, None, :, None]).reshape(pr, pc)
    return QuantizedTensorNVFP4(shape, layout, codes, scale_codes, g)


def dequantize_nvfp4(q: QuantizedTensorNVFP4) -> Tensor:
    return Tensor(q.dequantize())


def quantize_mxfp8(t: Tensor | np.ndarray, mode: RoundingMode = NEAREST_EVEN) -> QuantizedTensorMXFP8:
    """Encode with E4M3 elements and power-of-two scales per 32-wide block.

    The block exponent is the smallest power of two that brings the block
    max within E4M3 range, so block maxima never clamp.
    """
    data = np.asarray(t.data if isinstance(t, Tensor) else t, np.float32)
    _check_finite(data, "quantize_mxfp8")
    shape = data.shape
    rows = int(np.prod(shape[:-1], dtype=np.int64)) if len(shape) > 1 else 1
    flat = _pad_last(data.reshape(rows, shape[-1] if shape else 1), MXFP8_BLOCK)
    blocks = flat.reshape(rows, -1, MXFP8_BLOCK)
    amax = np.abs(blocks).max(axis=2)

    with np.errstate(divide="ignore"):
        e = np.ceil(np.log2(amax.astype(np.float64) / E4M3_MAX))
    e = np.where(np.isfinite(e), e, E8M0_MIN_EXP).astype(np.int32)
    # fix up log2 rounding, then clamp to the representable exponent range
    too_small = amax > E4M3_MAX * np.exp2(e.astype(np.float64))
    e = np.where(too_small, e + 1, e)
    shrinkable = (e - 1 >= E8M0_MIN_EXP) & (amax <= E4M3_MAX * np.exp2(e - 1.0)) & (amax > 0)
    e = np.where(shrinkable, e - 1, e)
    e = np.clip(e, E8M0_MIN_EXP, E8M0_MAX_EXP).astype(np.int16)

    scaled = blocks / np.exp2(e.astype(np.float32))[:, :, None]
    codes = encode_e4m3(scaled, mode)
    return QuantizedTensorMXFP8(shape, codes, e)


def dequantize_mxfp8(q: QuantizedTensorMXFP8) -> Tensor:
    return Tensor(q.dequantize())


# ---------------------------------------------------------------------------
# Random Hadamard transform
# ---------------------------------------------------------------------------


@dataclass
class HadamardTransform:
    """Orthogonal (1/sqrt(n)) H_n D with a seeded random +-1 diagonal D."""

    n: int
    seed: int
    matrix: np.ndarray  # [n, n] float32


def random_hadamard(n: int, seed: int) -> HadamardTransform:
    if n <= 0 or (n & (n - 1)) != 0:
        raise ConfigError(f"Hadamard size must be a power of two, got {n}")
    if n == 1:
        return HadamardTransform(1, seed, np.ones((1, 1), np.float32))
    h = np.ones((1, 1), np.float64)
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    rng = np.random.Generator(np.random.Philox(key=seed))
    d = rng.integers(0, 2, n) * 2 - 1
    mat = (h * d[None, :] / np.sqrt(n)).astype(np.float32)
    return HadamardTransform(n, seed, mat)


def apply_rht(x: np.ndarray, transform: HadamardTransform, axis: int, inverse: bool = False) -> np.ndarray:
    """Blockwise transform along ``axis`` (length must divide into n-blocks).

    ``inverse`` applies the transpose, so pairing apply(A, axis=1) with
    apply(B, axis=0, inverse=True) leaves the product A @ B unchanged.
    """
    n = transform.n
    if x.shape[axis] % n != 0:
        raise ShapeError(f"axis length {x.shape[axis]} not divisible by transform size {n}")
    mat = transform.matrix.T if inverse else transform.matrix
    moved = np.moveaxis(x, axis, -1)
    blocked = moved.reshape(*moved.shape[:-1], moved.shape[-1] // n, n)
    out = blocked @ mat
    return np.moveaxis(out.reshape(moved.shape), -1, axis)


# ---------------------------------------------------------------------------
# Stochastic rounding to an arbitrary grid
# ---------------------------------------------------------------------------


def stochastic_round_to_grid(x, grid: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Round to a bracketing grid value with proximity-proportional odds."""
    arr = np.asarray(x, np.float64)
    grid = np.asarray(grid, np.float64)
    lo = np.clip(np.searchsorted(grid, arr, side="right") - 1, 0, len(grid) - 1)
    hi = np.minimum(lo + 1, len(grid) - 1)
    gap = grid[hi] - grid[lo]
    p = np.where(gap > 0, (arr - grid[lo]) / np.where(gap > 0, gap, 1.0), 0.0)
    pick_hi = rng.random(arr.shape) < p
    return np.where(pick_hi, grid[hi], grid[lo])


# ---------------------------------------------------------------------------
# Formats and simulated GEMM
# ---------------------------------------------------------------------------


class Format(str, Enum):
    REFERENCE = "reference"
    NVFP4 = "nvfp4"        # 1D 16-element blocks (activations, gradients)
    NVFP4_2D = "nvfp4_2d"  # 16x16 tiles (weights)
    MXFP8 = "mxfp8"


def quantize_dequantize(data: np.ndarray, fmt: Format, mode: RoundingMode = NEAREST_EVEN) -> np.ndarray:
    if fmt == Format.REFERENCE:
        return data
    if fmt == Format.NVFP4:
        return quantize_nvfp4(data, Layout.BLOCK_1D, mode).dequantize()
    if fmt == Format.NVFP4_2D:
        return quantize_nvfp4(data, Layout.BLOCK_2D, mode).dequantize()
    if fmt == Format.MXFP8:
        return quantize_mxfp8(data, mode).dequantize()
    raise ConfigError(f"unknown format {fmt}")  # pragma: no cover


@dataclass(frozen=True)
class QgemmOptions:
    """Per-call options: RHT pairing across the contraction and rounding.

    ``rht_on_a`` applies T to a's contraction axis and T^T to b's, an
    exact identity before quantization. Rounding modes apply to the
    respective operand's element encoding.
    """

    rht_on_a: bool = False
    rht_seed: int = 0
    a_mode: RoundingMode = NEAREST_EVEN
    b_mode: RoundingMode = NEAREST_EVEN


RHT_BLOCK = 16


def _qgemm_arrays(a: np.ndarray, b: np.ndarray, a_format: Format, b_format: Format,
                  options: QgemmOptions) -> np.ndarray:
    """quantize -> dequantize -> reference matmul on raw arrays."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"qgemm shapes incompatible: {a.shape} x {b.shape}")
    if a_format == Format.REFERENCE and b_format == Format.REFERENCE:
        return matmul_exact(a, b)
    if options.rht_on_a:
        k = a.shape[1]
        pad = (-k) % RHT_BLOCK
        if pad:
            a = np.concatenate([a, np.zeros((a.shape[0], pad), a.dtype)], axis=1)
            b = np.concatenate([b, np.zeros((pad, b.shape[1]), b.dtype)], axis=0)
        tr = random_hadamard(RHT_BLOCK, options.rht_seed)
        a = apply_rht(a, tr, axis=1)
        b = apply_rht(b, tr, axis=0, inverse=True)
    # block both operands along the contraction axis (1D formats)
    aq = quantize_dequantize(a, a_format, options.a_mode)
    if b_format in (Format.NVFP4, Format.MXFP8):
        bq = quantize_dequantize(np.ascontiguousarray(b.T), b_format, options.b_mode).T
    else:
        bq = quantize_dequantize(b, b_format, options.b_mode)
    return matmul_exact(np.ascontiguousarray(aq), np.ascontiguousarray(bq))


def qgemm_sim(a: Tensor, b: Tensor, a_format: Format, b_format: Format,
              options: QgemmOptions = QgemmOptions()) -> Tensor:
    """Forward-only simulated quantized GEMM (no gradient recording)."""
    return Tensor(_qgemm_arrays(a.data, b.data, a_format, b_format, options))


@dataclass(frozen=True)
class LinearPrecision:
    """Resolved GEMM formats for one linear layer's three passes.

    Quantization noise enters exactly where a low-precision GEMM would run:
    forward (x @ w), input gradient (dy @ w^T), and weight gradient
    (x^T @ dy). The gradient operand is stochastically rounded; weight-
    gradient inputs get the Hadamard pair when the format is 4-bit.
    Block scaling guarantees encoders never clamp, so the straight-through
    gradient of each quantize-dequantize is exactly identity.
    """

    x_format: Format = Format.REFERENCE
    w_format: Format = Format.REFERENCE
    grad_format: Format = Format.REFERENCE
    seed: int = 0

    @property
    def active(self) -> bool:
        return (self.x_format != Format.REFERENCE or self.w_format != Format.REFERENCE
                or self.grad_format != Format.REFERENCE)


REFERENCE_LINEAR = LinearPrecision()


def quantized_linear(x: Tensor, w: Tensor, prec: LinearPrecision = REFERENCE_LINEAR) -> Tensor:
    """Differentiable linear with quantize-dequantize simulation on all paths."""
    out = _qgemm_arrays(x.data, w.data, prec.x_format, prec.w_format,
                        QgemmOptions())

    def bwd(dout):
        dx = dw = None
        if x.requires_grad:
            dx = _qgemm_arrays(
                dout, w.data.T, prec.grad_format, prec.w_format,
                QgemmOptions(a_mode=stochastic(prec.seed)),
            )
        if w.requires_grad:
            use_rht = prec.grad_format in (Format.NVFP4, Format.NVFP4_2D)
            dw = _qgemm_arrays(
                x.data.T, dout,
                prec.x_format if prec.x_format != Format.NVFP4_2D else Format.NVFP4,
                prec.grad_format,
                QgemmOptions(rht_on_a=use_rht, rht_seed=prec.seed + 1,
                             b_mode=stochastic(prec.seed + 2)),
            )
        return dx, dw

    return _make(out, (x, w), bwd)


# ---------------------------------------------------------------------------
# Flush-to-zero meter
# ---------------------------------------------------------------------------


def flush_to_zero_rate(t: Tensor | np.ndarray, fmt: Format = Format.NVFP4) -> float:
    """Fraction of nonzero inputs whose quantized code decodes to zero."""
    data = np.asarray(t.data if isinstance(t, Tensor) else t, np.float32)
    nonzero = data != 0.0
    count = int(nonzero.sum())
    if count == 0:
        raise UndefinedRateError("flush rate undefined for an all-zero tensor")
    deq = quantize_dequantize(data, fmt)
    return float(((deq == 0.0) & nonzero).sum() / count)


# ---------------------------------------------------------------------------
# Precision policy
# ---------------------------------------------------------------------------


class LayerKind(str, Enum):
    MAMBA_IN_PROJ = "mamba_in_proj"
    MAMBA_OUT_PROJ = "mamba_out_proj"
    QKV_PROJ = "qkv_proj"
    ATTN_OUT_PROJ = "attn_out_proj"
    ROUTER_GATE = "router_gate"
    EXPERT_FFN = "expert_ffn"
    SHARED_EXPERT = "shared_expert"
    LATENT_DOWN = "latent_down"
    LATENT_UP = "latent_up"
    MTP_MIX = "mtp_mix"
    LM_HEAD = "lm_head"


# kinds that are never quantized under any low-precision policy
_ALWAYS_REFERENCE = {LayerKind.LATENT_DOWN, LayerKind.LATENT_UP, LayerKind.MTP_MIX,
                     LayerKind.ROUTER_GATE, LayerKind.LM_HEAD}
# attention fidelity set: reference under the recommended recipe, 4-bit
# under the sensitivity ablation
_SENSITIVE_ATTENTION = {LayerKind.QKV_PROJ, LayerKind.ATTN_OUT_PROJ}


@dataclass(frozen=True)
class PrecisionPolicy:
    """Per-layer-kind precision assignment for training GEMMs.

    ``base`` "reference" disables quantization entirely. Under "nvfp4":
    the last ceil(fraction * L) composite layers stay reference, QKV and
    attention output projections stay reference, Mamba output projections
    store in 8-bit, latent and MTP projections stay reference, and the
    rest run 4-bit. ``quantize_sensitive`` flips the attention projections
    and Mamba output projection to 4-bit (the recipe ablation) while
    leaving the tail rule intact.
    """

    base: str = "nvfp4"  # "reference" | "nvfp4"
    fraction_high_precision_tail: float = 0.15
    quantize_sensitive: bool = False

    def tail_start(self, total_layers: int) -> int:
        keep = int(np.ceil(self.fraction_high_precision_tail * total_layers))
        return total_layers - keep


@dataclass(frozen=True)
class LayerDescriptor:
    kind: LayerKind
    index: int          # composite-layer index within the stack
    total_layers: int


def resolve_precision(desc: LayerDescriptor, policy: PrecisionPolicy) -> Format:
    """Storage format for one linear under the policy."""
    if desc.index >= desc.total_layers:
        raise ConfigError(f"layer index {desc.index} >= total {desc.total_layers}")
    if policy.base == "reference":
        return Format.REFERENCE
    if desc.kind in _ALWAYS_REFERENCE:
        return Format.REFERENCE
    if desc.index >= policy.tail_start(desc.total_layers):
        return Format.REFERENCE
    if desc.kind in _SENSITIVE_ATTENTION:
        return Format.NVFP4 if policy.quantize_sensitive else Format.REFERENCE
    if desc.kind == LayerKind.MAMBA_OUT_PROJ:
        return Format.NVFP4 if policy.quantize_sensitive else Format.MXFP8
    return Format.NVFP4


def linear_precision(desc: LayerDescriptor, policy: PrecisionPolicy, seed: int) -> LinearPrecision:
    """Expand a resolved format into the per-pass GEMM formats."""
    fmt = resolve_precision(desc, policy)
    if fmt == Format.REFERENCE:
        return REFERENCE_LINEAR
    if fmt == Format.MXFP8:
        return LinearPrecision(Format.MXFP8, Format.MXFP8, Format.MXFP8, seed)
    return LinearPrecision(Format.NVFP4, Format.NVFP4_2D, Format.NVFP4, seed)


# ---------------------------------------------------------------------------
# Serialization (checkpoint container records)
# ---------------------------------------------------------------------------

_FMT_TAGS = {"nvfp4": 1, "mxfp8": 2}


def _pack_nibbles(codes: np.ndarray) -> bytes:
    flat = codes.reshape(-1).astype(np.uint8)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, np.uint8)])
    return ((flat[0::2] & 0xF) | (flat[1::2] << 4)).tobytes()  # low nibble = even index


def _unpack_nibbles(raw: bytes, count: int) -> np.ndarray:
    packed = np.frombuffer(raw, np.uint8)
    out = np.empty(packed.size * 2, np.uint8)
    out[0::2] = packed & 0xF
    out[1::2] = packed >> 4
    return out[:count]


def quantized_to_bytes(q: QuantizedTensorNVFP4 | QuantizedTensorMXFP8) -> bytes:
    """Header {tag, layout, shape, block grid}, scales, then packed codes."""
    if isinstance(q, QuantizedTensorNVFP4):
        head = struct.pack("<BBB", _FMT_TAGS["nvfp4"], 0 if q.layout == Layout.BLOCK_1D else 1,
                           len(q.shape))
        head += struct.pack(f"<{len(q.shape)}q", *q.shape)
        head += struct.pack(f"<B{q.codes.ndim}q", q.codes.ndim, *q.codes.shape)
        head += struct.pack("<f", float(q.global_scale))
        scales = q.block_scales
        body = struct.pack(f"<B{scales.ndim}q", scales.ndim, *scales.shape) + scales.tobytes()
        codes = _pack_nibbles(q.codes)
        return head + body + struct.pack("<q", q.codes.size) + codes
    head = struct.pack("<BBB", _FMT_TAGS["mxfp8"], 0, len(q.shape))
    head += struct.pack(f"<{len(q.shape)}q", *q.shape)
    head += struct.pack(f"<B{q.codes.ndim}q", q.codes.ndim, *q.codes.shape)
    scales = q.scale_exps.astype("<i2")
    body = struct.pack(f"<B{scales.ndim}q", scales.ndim, *scales.shape) + scales.tobytes()
    return head + body + struct.pack("<q", q.codes.size) + q.codes.astype(np.uint8).tobytes()


def quantized_from_bytes(raw: bytes) -> QuantizedTensorNVFP4 | QuantizedTensorMXFP8:
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    tag, layout_code, ndim = take("<BBB")
    shape = tuple(take(f"<{ndim}q"))
    (codes_ndim,) = take("<B")
    codes_shape = tuple(take(f"<{codes_ndim}q"))
    if tag == _FMT_TAGS["nvfp4"]:
        (g,) = take("<f")
        (sndim,) = take("<B")
        sshape = tuple(take(f"<{sndim}q"))
        n_scales = int(np.prod(sshape))
        scales = np.frombuffer(raw, np.uint8, n_scales, off).reshape(sshape).copy()
        off += n_scales
        (n_codes,) = take("<q")
        codes = _unpack_nibbles(raw[off:], n_codes).reshape(codes_shape).copy()
        layout = Layout.BLOCK_1D if layout_code == 0 else Layout.BLOCK_2D
        return QuantizedTensorNVFP4(shape, layout, codes, scales, np.float32(g))
    if tag == _FMT_TAGS["mxfp8"]:
        (sndim,) = take("<B")
        sshape = tuple(take(f"<{sndim}q"))
        n_scales = int(np.prod(sshape))
        scales = np.frombuffer(raw, "<i2", n_scales, off).reshape(sshape).copy()
        off += 2 * n_scales
        (n_codes,) = take("<q")
        codes = np.frombuffer(raw, np.uint8, n_codes, off).reshape(codes_shape).copy()
        return QuantizedTensorMXFP8(shape, codes, scales.astype(np.int16))
    raise ConfigError(f"unknown quantized format tag {tag}")
