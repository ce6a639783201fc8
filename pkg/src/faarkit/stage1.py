"""Stage 1: per-layer reconstruction calibration.

Optimizes the rounding variables of a single linear layer so the quantized
layer reproduces the full-precision layer's outputs on calibration batches:

    L = || X W^T - X_q W_q(V)^T ||_F^2 + lambda_round * L_round(V)

with the Frobenius term left unnormalized. Activations are quantized once per
batch (X_q is fixed across steps); gradients are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import compute_scales, dequantize, quantize_rtn
from .optim import Adam, DivergenceError
from .rounding import (
    BetaSchedule,
    RoundingVars,
    beta_at,
    clip_vars,
    init_rounding_vars,
    round_reg_loss,
    soft_round,
)


@dataclass(eq=False)
class LinearLayer:
    """One weight matrix, [out_dim x in_dim]. Forward is X @ W.T."""

    W: np.ndarray
    name: str = "layer"

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2 or W.size == 0:
            raise ValueError(f"layer weights must be a nonempty 2-d matrix, got shape {W.shape}")
        if not np.all(np.isfinite(W)):
            raise ValueError("layer weights must be finite")
        self.W = W

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]


@dataclass(eq=False)
class CalibBatch:
    """Calibration inputs and their fixed quantized counterpart."""

    X: np.ndarray
    X_q: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        X_q = np.asarray(self.X_q, dtype=np.float64)
        if X.ndim != 2 or X.size == 0:
            raise ValueError("calibration batch must be a nonempty 2-d matrix")
        if X_q.shape != X.shape:
            raise ValueError("X and X_q must have the same shape")
        self.X = X
        self.X_q = X_q


def quantize_activations(X, block_size: int = 16) -> np.ndarray:
    """RTN-quantize-dequantize a [batch x features] matrix.

    One global scale per matrix; block scales per row along the feature axis
    (rows are padded with zeros to a block multiple so blocks never straddle
    rows, then the padding is sliced off).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.size == 0:
        raise ValueError("activations must be a nonempty 2-d matrix")
    d = X.shape[1]
    pad = (-d) % block_size
    Xp = np.pad(X, ((0, 0), (0, pad))) if pad else X
    scales = compute_scales(Xp, block_size)
    return dequantize(quantize_rtn(Xp, scales))[:, :d]


def make_calib_batch(X, block_size: int = 16) -> CalibBatch:
    return CalibBatch(X=np.asarray(X, dtype=np.float64),
                      X_q=quantize_activations(X, block_size))


@dataclass
class Stage1Config:
    steps: int = 500
    learning_rate: float = 5e-4
    lambda_round: float = 0.01
    beta: BetaSchedule | None = None     # None: linear 4 -> 40 over `steps`
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    block_size: int = 16

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_round < 0:
            raise ValueError("lambda_round must be >= 0")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def schedule(self) -> BetaSchedule:
        if self.beta is not None:
            return self.beta
        return BetaSchedule(total_steps=max(self.steps, 1))


def _soft_weights(rv: RoundingVars, beta: float) -> tuple[np.ndarray, np.ndarray]:
    h = soft_round(rv.v, beta)
    return rv.sign * (rv.w_lower + h * rv.span) * rv.scale_prod, h


def _check_batch(layer: LinearLayer, batch: CalibBatch) -> None:
    if batch.X.shape[1] != layer.in_dim:
        raise ValueError(
            f"batch features {batch.X.shape[1]} do not match layer in_dim {layer.in_dim}"
        )


def stage1_loss(layer: LinearLayer, batch: CalibBatch, rv: RoundingVars,
                beta: float, lambda_round: float) -> float:
    """Reconstruction MSE plus weighted rounding regularizer at the given beta."""
    _check_batch(layer, batch)
    W_q, _ = _soft_weights(rv, beta)
    R = batch.X_q @ W_q.T - batch.X @ layer.W.T
    reg, _ = round_reg_loss(rv)
    return float(np.sum(R * R)) + lambda_round * reg


def stage1_grad(layer: LinearLayer, batch: CalibBatch, rv: RoundingVars,
                beta: float, lambda_round: float) -> np.ndarray:
    """Analytic gradient of stage1_loss with respect to v.

    dMSE/dW_q = 2 R^T X_q with R = X_q W_q^T - X W^T, and
    dW_q/dv = sign * span * scale_prod * beta * h (1 - h). Frozen elements
    get exactly zero.
    """
    _check_batch(layer, batch)
    W_q, h = _soft_weights(rv, beta)
    R = batch.X_q @ W_q.T - batch.X @ layer.W.T
    g_W = 2.0 * R.T @ batch.X_q
    dW_dv = rv.sign * rv.span * rv.scale_prod * beta * h * (1.0 - h)
    _, g_reg = round_reg_loss(rv)
    g = g_W * dW_dv + lambda_round * g_reg
    g[rv.frozen_mask] = 0.0
    return g


def reconstruction_mse(layer: LinearLayer, batch: CalibBatch, W_hat: np.ndarray) -> float:
    """|| X W^T - X_q W_hat^T ||_F^2 for any candidate real weight matrix."""
    _check_batch(layer, batch)
    R = batch.X_q @ np.asarray(W_hat, dtype=np.float64).T - batch.X @ layer.W.T
    return float(np.sum(R * R))


def optimize_layer(layer: LinearLayer, calib: list[CalibBatch],
                   cfg: Stage1Config) -> tuple[RoundingVars, list[tuple]]:
    """Adam on the rounding variables of one layer.

    Returns the trained RoundingVars and a trace of
    (step, mse_term, reg_term, beta) rows, loss evaluated before each update.
    Raises DivergenceError if the loss stops being finite.
    """
    if not calib:
        raise ValueError("need at least one calibration batch")
    for b in calib:
        _check_batch(layer, b)
    scales = compute_scales(layer.W, cfg.block_size)
    rv = init_rounding_vars(layer.W, scales)
    sched = cfg.schedule()
    opt = Adam([rv.v], lr=cfg.learning_rate,
               beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    y_fp = [b.X @ layer.W.T for b in calib]     # teacher outputs never change
    trace: list[tuple] = []
    for t in range(cfg.steps):
        beta = beta_at(sched, t)
        W_q, h = _soft_weights(rv, beta)
        dW_dv = rv.sign * rv.span * rv.scale_prod * beta * h * (1.0 - h)
        mse = 0.0
        g_W = np.zeros_like(rv.v)
        for b, y in zip(calib, y_fp):
            R = b.X_q @ W_q.T - y
            mse += float(np.sum(R * R))
            g_W += 2.0 * R.T @ b.X_q
        reg, g_reg = round_reg_loss(rv)
        loss = mse + cfg.lambda_round * reg
        if not np.isfinite(loss):
            raise DivergenceError(
                f"layer {layer.name!r}: loss became non-finite at step {t} "
                f"(mse={mse!r}, reg={reg!r})"
            )
        trace.append((t, mse, reg, beta))
        g = g_W * dW_dv + cfg.lambda_round * g_reg
        g[rv.frozen_mask] = 0.0
        opt.step([g])
        clip_vars(rv)
    return rv, trace
