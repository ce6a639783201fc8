"""Shared test oracles: independent of the library's implementation paths."""

from __future__ import annotations

import numpy as np

# ---------------------------------------------------------------- E4M3 oracle
# Built by direct enumeration of bit patterns, not by any library code.


def e4m3_positive_table() -> list[tuple[float, int]]:
    """All 126 positive finite E4M3 values as (value, mantissa_bits) pairs."""
    out = []
    for m in range(1, 8):                      # subnormals: 0.m * 2^-6
        out.append((m * 2.0**-9, m))
    for e in range(1, 16):                     # normals: 1.m * 2^(e-7)
        for m in range(8):
            if e == 15 and m == 7:
                continue                       # NaN pattern
            out.append(((1.0 + m / 8.0) * 2.0 ** (e - 7), m))
    return out


_E4M3_TABLE = e4m3_positive_table()
_E4M3_VALUES = np.array([v for v, _ in _E4M3_TABLE])
_E4M3_MANTISSAS = np.array([m for _, m in _E4M3_TABLE])


def e4m3_nearest_scan(x: float) -> float:
    """Exhaustive nearest-value scan with the half-to-even tie rule."""
    if x > 448.0:
        return 448.0
    d = np.abs(_E4M3_VALUES - x)
    dmin = d.min()
    tied = np.flatnonzero(d == dmin)
    if len(tied) == 1:
        return float(_E4M3_VALUES[tied[0]])
    even = [i for i in tied if _E4M3_MANTISSAS[i] % 2 == 0]
    return float(_E4M3_VALUES[even[0] if even else tied[0]])


# ------------------------------------------------------- finite differences


def central_diff(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, element by element."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        dn = fn(x)
        flat[i] = orig
        gflat[i] = (up - dn) / (2.0 * h)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


# ------------------------------------------------------------ data builders


def gaussian_layer(rng: np.random.Generator, out_dim: int, in_dim: int, scale: float = 1.0):
    from faarkit import LinearLayer

    return LinearLayer(W=scale * rng.normal(size=(out_dim, in_dim)), name="test")


def gaussian_batch(rng: np.random.Generator, batch: int, in_dim: int, block_size: int = 16):
    from faarkit import make_calib_batch

    return make_calib_batch(rng.normal(size=(batch, in_dim)), block_size)


def on_grid_tensor(rng: np.random.Generator, shape, block_size: int = 16) -> np.ndarray:
    """A tensor that re-quantizes losslessly under its own recomputed scales.

    Construction: s_global a power of two (exact in FP32), per-block scales
    drawn from E4M3 values, every block's first element forced to magnitude 6
    so the recomputed block scale lands exactly on the chosen one, and all
    products exact in float64 (node and scale mantissas are a few bits each).
    """
    from faarkit import NODES

    shape = tuple(shape)
    n = int(np.prod(shape))
    nb = -(-n // block_size)
    s_global = 2.0**-10
    palette = np.array([448.0, 288.0, 160.0, 64.0, 16.0, 4.0, 1.0])
    s_g = rng.choice(palette, size=nb)
    s_g[0] = 448.0
    nodes = rng.choice(NODES[1:], size=n)          # nonzero nodes
    nodes[np.arange(0, n, block_size)] = 6.0       # pins each block max
    signs = rng.choice([-1.0, 1.0], size=n)
    sp = np.repeat(s_g, block_size)[:n] * s_global
    return (signs * nodes * sp).reshape(shape)
