"""Learnable rounding between bracketing grid nodes.

Each weight gets a variable v in [0, 1] giving its position inside the node
interval that brackets its normalized magnitude. A temperature sigmoid
h_beta(v) = sigmoid(beta * (v - 0.5)) relaxes the binary up/down choice; beta
is annealed so the relaxation sharpens toward a step over training. Hardening
thresholds v at 0.5 (inclusive: v = 0.5 takes the upper node).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .codec import (
    NODE_MAX,
    NODES,
    QuantizedTensor,
    ScaleSet,
    find_interval,
)


@dataclass
class BetaSchedule:
    """Linear temperature ramp from beta_start to beta_end over total_steps."""

    beta_start: float = 4.0
    beta_end: float = 40.0
    total_steps: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.beta_start) and self.beta_start > 0):
            raise ValueError(f"beta_start must be positive, got {self.beta_start!r}")
        if not (math.isfinite(self.beta_end) and self.beta_end >= self.beta_start):
            raise ValueError("beta_end must be finite and >= beta_start")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")


def beta_at(schedule: BetaSchedule, step: int) -> float:
    """Temperature at an integer step in [0, total_steps]."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside schedule of {schedule.total_steps} steps")
    frac = step / schedule.total_steps
    return schedule.beta_start + (schedule.beta_end - schedule.beta_start) * frac


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Two-branch form: never exponentiates a large positive argument.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def soft_round(v, beta: float):
    """h_beta(v) = sigmoid(beta * (v - 0.5)); scalar in, scalar out."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta!r}")
    arr = np.asarray(v, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError("rounding variables must lie in [0, 1]")
    h = _sigmoid(beta * (arr - 0.5))
    return float(h) if arr.ndim == 0 else h


@dataclass(eq=False)
class RoundingVars:
    """Per-weight rounding state for one tensor.

    All arrays share the weight tensor's shape. span == 0 marks frozen
    elements (normalized magnitude clamped at the top node), which stay
    at w_lower and receive zero gradient.
    """

    v: np.ndarray
    w_lower: np.ndarray
    w_upper: np.ndarray
    span: np.ndarray
    sign: np.ndarray
    scale_prod: np.ndarray
    frozen_mask: np.ndarray
    scales: ScaleSet = field(repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.v.shape

    def copy(self) -> "RoundingVars":
        return replace(self, v=self.v.copy())


def init_rounding_vars(W, scales: ScaleSet) -> RoundingVars:
    """Bracket each weight and place v at its relative position in the interval."""
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        raise ValueError("weight tensor must be nonempty")
    if not np.all(np.isfinite(W)):
        raise ValueError("weight entries must be finite")
    flat = W.reshape(-1)
    sp = scales.per_element(flat.size)           # raises on shape/scale mismatch
    mag = np.minimum(np.abs(flat) / sp, NODE_MAX)
    lower, upper = find_interval(mag)
    span = upper - lower
    frozen = span == 0.0
    v = np.where(frozen, 0.0, (mag - lower) / np.where(frozen, 1.0, span))
    sign = np.where(np.signbit(flat), -1.0, 1.0)
    shape = W.shape
    return RoundingVars(
        v=v.reshape(shape),
        w_lower=lower.reshape(shape),
        w_upper=upper.reshape(shape),
        span=span.reshape(shape),
        sign=sign.reshape(shape),
        scale_prod=sp.reshape(shape),
        frozen_mask=frozen.reshape(shape),
        scales=scales,
    )


def soft_quantize(rv: RoundingVars, beta: float) -> np.ndarray:
    """Relaxed quantized weights: sign * (w_lower + h_beta(v) * span) * scale_prod.

    Frozen elements come out exactly at sign * w_lower * scale_prod because
    their span is zero.
    """
    h = soft_round(rv.v, beta)
    return rv.sign * (rv.w_lower + h * rv.span) * rv.scale_prod


def round_reg_loss(rv: RoundingVars) -> tuple[float, np.ndarray]:
    """Mean over non-frozen elements of 1 - (2v - 1)^2, and its gradient in v.

    Pushes every v toward 0 or 1. Frozen elements are excluded from the mean
    and get zero gradient; an all-frozen tensor gives (0, zeros).
    """
    active = ~rv.frozen_mask
    n = int(active.sum())
    if n == 0:
        return 0.0, np.zeros_like(rv.v)
    t = 2.0 * rv.v - 1.0
    loss = float(np.sum((1.0 - t * t)[active]) / n)
    grad = np.where(active, -4.0 * t / n, 0.0)
    return loss, grad


def clip_vars(rv: RoundingVars) -> RoundingVars:
    """Clamp v to [0, 1] in place (applied after every optimizer update)."""
    np.clip(rv.v, 0.0, 1.0, out=rv.v)
    return rv


def harden(rv: RoundingVars) -> tuple[np.ndarray, np.ndarray]:
    """Binary decisions (1 where v >= 0.5, inclusive) and the final real weights."""
    decisions = ((rv.v >= 0.5) & ~rv.frozen_mask).astype(np.float64)
    w_final = rv.sign * (rv.w_lower + decisions * rv.span) * rv.scale_prod
    return decisions, w_final


def harden_to_quantized(rv: RoundingVars) -> QuantizedTensor:
    """Hardened decisions as an encodable tensor (exact node magnitudes)."""
    decisions, _ = harden(rv)
    mags = (rv.w_lower + decisions * rv.span).reshape(-1)
    idx = np.searchsorted(NODES, mags)
    if np.any(idx >= len(NODES)) or np.any(NODES[np.minimum(idx, 7)] != mags):
        raise ValueError("hardened magnitude fell off the grid")
    sign_bit = ((rv.sign.reshape(-1) < 0) & (idx > 0)).astype(np.uint8)
    codes = idx.astype(np.uint8) | (sign_bit << 3)
    return QuantizedTensor(shape=rv.shape, codes=codes, scales=rv.scales)
