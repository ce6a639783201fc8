"""NVFP4 number format: the E2M1 element grid, E4M3 block scales, and RTN encode/decode.

Element codes are 4-bit patterns laid out [sign | e1 e0 | m]. The nonnegative
magnitude grid is {0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0}; a block of 16 elements
shares one E4M3 scale, and the whole tensor shares one FP32 global scale.
All arithmetic here is float64; only the *stored* scales are constrained to
FP32 / E4M3 representability. Everything is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Nonnegative element magnitudes, indexed by the 3-bit magnitude code (e1 e0 m).
# Subnormal rule: e == 0 decodes to m * 0.5, otherwise 2^(e-1) * (1 + m * 0.5).
NODES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0], dtype=np.float64)
NODE_MAX = 6.0

# Decision boundaries between adjacent magnitude codes. All exact binary fractions.
_MIDPOINTS = (NODES[:-1] + NODES[1:]) / 2.0

# E4M3: 4 exponent bits (bias 7), 3 mantissa bits, subnormals, no infinities.
# Largest finite value is 448 (exponent field 15, mantissa 110); S.1111.111 is NaN.
E4M3_MAX = 448.0
E4M3_MIN_POS = 2.0**-9       # smallest positive subnormal
_E4M3_MIN_NORMAL = 2.0**-6


def e2m1_decode(code: int) -> float:
    """Decode one 4-bit [sign|e1|e0|m] pattern to its real value."""
    if not isinstance(code, (int, np.integer)) or not 0 <= code <= 15:
        raise ValueError(f"element code must be an integer in [0, 15], got {code!r}")
    mag = float(NODES[code & 0x7])
    return -mag if code & 0x8 else mag


def _decode_codes(codes: np.ndarray) -> np.ndarray:
    mags = NODES[codes & 0x7]
    return np.where(codes & 0x8, -mags, mags)


def find_interval(mag_norm):
    """Bracket a nonnegative normalized magnitude between consecutive grid nodes.

    Returns (w_lower, w_upper) with w_lower <= mag <= w_upper. A value exactly
    on a node below 6 brackets as (node, next node); anything >= 6 gives (6, 6).
    Accepts a scalar or an array (arrays return a pair of arrays).
    """
    arr = np.asarray(mag_norm, dtype=np.float64)
    if np.any(np.isnan(arr)) or np.any(arr < 0):
        raise ValueError("normalized magnitude must be nonnegative")
    idx = np.searchsorted(NODES, np.minimum(arr, NODE_MAX), side="right") - 1
    lower = NODES[idx]
    upper = NODES[np.minimum(idx + 1, len(NODES) - 1)]
    if arr.ndim == 0:
        return float(lower), float(upper)
    return lower, upper


def _nearest_node_index(mag: np.ndarray) -> np.ndarray:
    """Index of the nearest grid node for magnitudes already clamped to [0, 6].

    Ties at the exact midpoint go to the node whose mantissa bit is 0, which is
    the node with the even magnitude code.
    """
    idx = np.searchsorted(_MIDPOINTS, mag, side="left")
    at_mid = (idx < len(_MIDPOINTS)) & (mag == _MIDPOINTS[np.minimum(idx, len(_MIDPOINTS) - 1)])
    bump = at_mid & (idx % 2 == 1)
    return idx + bump


def e4m3_round(x: float) -> float:
    """Round a positive finite real to the nearest E4M3 value.

    Round-half-to-even on the E4M3 mantissa; inputs above 448 saturate to 448;
    positive inputs below the subnormal range return the smallest subnormal
    (the grid of candidates is the 126 positive finite E4M3 values).
    """
    if not isinstance(x, (float, int, np.floating, np.integer)):
        raise ValueError(f"e4m3_round expects a real scalar, got {type(x).__name__}")
    x = float(x)
    if not math.isfinite(x) or x <= 0.0:
        raise ValueError(f"e4m3_round requires a positive finite input, got {x!r}")
    return float(_e4m3_round_pos(np.asarray([x]))[0])


def _e4m3_round_pos(x: np.ndarray) -> np.ndarray:
    """Vectorized e4m3_round for arrays of positive finite values."""
    # The value ulp is 2^(binade - 3) for normals and fixed at 2^-9 below the
    # smallest normal 2^-6. x / ulp is exact, and np.round is half-to-even.
    _, e = np.frexp(x)
    ulp = np.ldexp(1.0, np.maximum(e - 1, -6) - 3)
    q = np.round(x / ulp) * ulp
    return np.clip(q, E4M3_MIN_POS, E4M3_MAX)


def e4m3_bits_from_value(x: float) -> int:
    """8-bit pattern (sign 0) of an exactly representable positive E4M3 value."""
    x = float(x)
    err = ValueError(f"{x!r} is not a positive E4M3-representable value")
    if not math.isfinite(x) or x <= 0.0 or x > E4M3_MAX:
        raise err
    if x < _E4M3_MIN_NORMAL:
        m = x / E4M3_MIN_POS
        if m != int(m):
            raise err
        return int(m)
    frac, e = math.frexp(x)          # x = frac * 2^e, frac in [0.5, 1)
    binade = e - 1
    m = (x / math.ldexp(1.0, binade) - 1.0) * 8.0
    if m != int(m):
        raise err
    exp_field = binade + 7
    if not 1 <= exp_field <= 15 or (exp_field == 15 and int(m) == 7):
        raise err
    return (exp_field << 3) | int(m)


def e4m3_value_from_bits(bits: int) -> float:
    """Decode an 8-bit E4M3 pattern; rejects negatives, zero, and the NaN pattern."""
    if not 0 <= bits <= 0xFF:
        raise ValueError(f"E4M3 bit pattern out of range: {bits!r}")
    if bits & 0x80:
        raise ValueError("negative E4M3 scale patterns are not valid here")
    exp_field = (bits >> 3) & 0xF
    m = bits & 0x7
    if exp_field == 15 and m == 7:
        raise ValueError("E4M3 NaN pattern is not a valid scale")
    if exp_field == 0:
        val = m * E4M3_MIN_POS
    else:
        val = math.ldexp(1.0 + m / 8.0, exp_field - 7)
    if val <= 0.0:
        raise ValueError("E4M3 scale must be positive")
    return val


@dataclass(frozen=True, eq=False)
class ScaleSet:
    """Two-level scales: one FP32 global scale, one E4M3 scale per block."""

    s_global: float
    s_g: np.ndarray          # float64 values, each exactly E4M3-representable
    block_size: int

    def __post_init__(self):
        if not (math.isfinite(self.s_global) and self.s_global > 0):
            raise ValueError(f"s_global must be positive and finite, got {self.s_global!r}")
        if float(np.float32(self.s_global)) != self.s_global:
            raise ValueError("s_global must be FP32-representable")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        s_g = np.asarray(self.s_g, dtype=np.float64)
        if s_g.ndim != 1 or s_g.size == 0:
            raise ValueError("s_g must be a nonempty 1-d array")
        for s in s_g:
            e4m3_bits_from_value(float(s))   # raises unless positive and representable
        object.__setattr__(self, "s_g", s_g)

    @property
    def n_blocks(self) -> int:
        return int(self.s_g.size)

    def per_element(self, n: int) -> np.ndarray:
        """Combined s_g * s_global for each of n row-major elements."""
        if _n_blocks(n, self.block_size) != self.n_blocks:
            raise ValueError(
                f"scales cover {self.n_blocks} blocks but a tensor of {n} elements "
                f"needs {_n_blocks(n, self.block_size)} at block_size {self.block_size}"
            )
        return np.repeat(self.s_g, self.block_size)[:n] * self.s_global


def _n_blocks(n: int, block_size: int) -> int:
    return -(-n // block_size)


def _validated(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        raise ValueError("tensor must be nonempty")
    if not np.all(np.isfinite(W)):
        raise ValueError("tensor entries must be finite")
    return W


def compute_scales(W, block_size: int = 16, s_global: float | None = None) -> ScaleSet:
    """Two-level scale computation: global from tensor amax, per-block E4M3 after it.

    s_global = amax / (6 * 448) cast to FP32 (1.0 for an all-zero tensor); each
    block scale is the E4M3 rounding of amax_block / (6 * s_global), floored to
    the smallest positive E4M3 value when that would be zero. Pass s_global to
    pin the global scale (activation quantization computes it per matrix).
    """
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    W = _validated(W)
    flat = np.abs(W.reshape(-1))
    if s_global is None:
        amax = float(flat.max())
        s_global = amax / (NODE_MAX * E4M3_MAX) if amax > 0.0 else 1.0
        s_global = float(np.float32(s_global))
        if s_global == 0.0:                      # FP32 underflow on a tiny tensor
            s_global = float(np.finfo(np.float32).tiny)
    block_max = np.maximum.reduceat(flat, np.arange(0, flat.size, block_size))
    raw = block_max / (NODE_MAX * s_global)
    s_g = np.full(raw.shape, E4M3_MIN_POS)
    pos = raw > 0.0
    if np.any(pos):
        s_g[pos] = _e4m3_round_pos(raw[pos])
    return ScaleSet(s_global=float(s_global), s_g=s_g, block_size=block_size)


@dataclass(eq=False)
class QuantizedTensor:
    """A tensor held as flat 4-bit element codes plus its ScaleSet."""

    shape: tuple[int, ...]
    codes: np.ndarray        # uint8, row-major, one code per element
    scales: ScaleSet

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        codes = np.asarray(self.codes, dtype=np.uint8).reshape(-1)
        n = int(np.prod(self.shape)) if self.shape else 1
        if n <= 0:
            raise ValueError("quantized tensor must be nonempty")
        if codes.size != n:
            raise ValueError(f"{codes.size} codes for shape {self.shape} ({n} elements)")
        if np.any(codes > 15):
            raise ValueError("element codes must fit in 4 bits")
        self.scales.per_element(n)   # raises on block-count mismatch
        self.codes = codes

    @property
    def n_elements(self) -> int:
        return int(self.codes.size)


def quantize_rtn(W, scales: ScaleSet) -> QuantizedTensor:
    """Round-to-nearest NVFP4 encode under the given scales.

    Normalized magnitudes are clamped to [0, 6] before rounding (E4M3 rounding
    of a block scale can land slightly low, pushing w-tilde above 6). Negative
    zero normalizes to the +0 code.
    """
    W = _validated(W)
    flat = W.reshape(-1)
    sp = scales.per_element(flat.size)
    mag = np.minimum(np.abs(flat) / sp, NODE_MAX)
    idx = _nearest_node_index(mag)
    sign_bit = (np.signbit(flat) & (idx > 0)).astype(np.uint8)
    codes = (idx.astype(np.uint8) | (sign_bit << 3))
    return QuantizedTensor(shape=W.shape, codes=codes, scales=scales)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Real tensor: decode(code) * s_g * s_global per element, reshaped."""
    sp = q.scales.per_element(q.n_elements)
    return (_decode_codes(q.codes) * sp).reshape(q.shape)
