"""Reference baselines the learned rounding is judged against.

brute_force_optimal enumerates every up/down assignment of the non-frozen
weights (2^N candidates, N capped) and returns the reconstruction-loss
minimizer; stochastic_round_sample draws unbiased random roundings; and
compare_rounding_study lines the strategies up in one report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import NODES, QuantizedTensor, ScaleSet, compute_scales, dequantize, quantize_rtn
from .rounding import init_rounding_vars
from .stage1 import CalibBatch, LinearLayer, reconstruction_mse

_CHUNK = 4096

DESK_SCALE_NOTE = ("reconstruction loss (squared Frobenius output error) stands in "
                   "for perplexity at this scale")


def brute_force_optimal(layer: LinearLayer, batch: CalibBatch, scales: ScaleSet,
                        max_n: int = 20) -> tuple[np.ndarray, float]:
    """Exhaustive search over binary rounding decisions, MSE objective only.

    Returns (V_star, loss_star): the full-shape 0/1 decision tensor (frozen
    elements 0) and its reconstruction loss. Ties go to the lexicographically
    smallest assignment in row-major weight order. Rejects more than max_n
    free weights.
    """
    rv = init_rounding_vars(layer.W, scales)
    active = np.flatnonzero(~rv.frozen_mask.reshape(-1))
    n_free = int(active.size)
    if n_free > max_n:
        raise ValueError(
            f"{n_free} free weights exceed max_n={max_n}; "
            f"2^{n_free} assignments is past the enumeration cap"
        )

    shape = layer.W.shape
    W_low = (rv.sign * rv.w_lower * rv.scale_prod).reshape(-1)
    delta = (rv.sign * rv.span * rv.scale_prod).reshape(-1)[active]
    rows, cols = np.unravel_index(active, shape)

    y_fp = batch.X @ layer.W.T
    R0 = batch.X_q @ W_low.reshape(shape).T - y_fp
    B, O = R0.shape
    # Flipping free weight j to its upper node adds delta_j * X_q[:, col_j]
    # to output column row_j of the residual.
    E = np.zeros((n_free, B * O))
    for j in range(n_free):
        Ej = np.zeros((B, O))
        Ej[:, rows[j]] = delta[j] * batch.X_q[:, cols[j]]
        E[j] = Ej.reshape(-1)
    R0_flat = R0.reshape(-1)

    def exact_loss(bits: np.ndarray) -> float:
        W_hat = W_low.copy()
        W_hat[active] += bits * delta
        return reconstruction_mse(layer, batch, W_hat.reshape(shape))

    total = 1 << n_free
    weights_msb = np.array([n_free - 1 - j for j in range(n_free)], dtype=np.uint64)

    def chunk_bits(start: int, stop: int) -> np.ndarray:
        ks = np.arange(start, stop, dtype=np.uint64)
        return ((ks[:, None] >> weights_msb[None, :]) & 1).astype(np.float64)

    # Pass 1: fast incremental losses, strict < keeps the earliest minimum.
    best_fast = np.inf
    for start in range(0, total, _CHUNK):
        D = chunk_bits(start, min(start + _CHUNK, total))
        R = R0_flat[None, :] + D @ E
        losses = np.sum(R * R, axis=1)
        m = float(losses.min())
        if m < best_fast:
            best_fast = m

    # Pass 2: re-evaluate near-ties with the exact routine callers use, in
    # lexicographic order, so the reported optimum is the true minimum of
    # reconstruction_mse and ties resolve deterministically.
    tol = 1e-7 * (1.0 + best_fast)
    best_loss = np.inf
    best_bits: np.ndarray | None = None
    candidates_seen = 0
    for start in range(0, total, _CHUNK):
        D = chunk_bits(start, min(start + _CHUNK, total))
        R = R0_flat[None, :] + D @ E
        losses = np.sum(R * R, axis=1)
        for i in np.flatnonzero(losses <= best_fast + tol):
            loss = exact_loss(D[i])
            if loss < best_loss:
                best_loss = loss
                best_bits = D[i]
            candidates_seen += 1
            if candidates_seen >= 8192:
                break
        if candidates_seen >= 8192:
            break

    V_star = np.zeros(int(np.prod(shape)))
    V_star[active] = best_bits
    return V_star.reshape(shape), float(best_loss)


def stochastic_round_sample(W, scales: ScaleSet, rng: np.random.Generator) -> QuantizedTensor:
    """One random rounding: each weight takes its upper node with probability
    equal to its relative interval position, so the expected dequantized
    magnitude equals the clamped normalized magnitude times the scales."""
    rv = init_rounding_vars(W, scales)
    u = rng.random(rv.v.shape)
    d = ((u < rv.v) & ~rv.frozen_mask).astype(np.float64)
    mags = (rv.w_lower + d * rv.span).reshape(-1)
    idx = np.searchsorted(NODES, mags)
    sign_bit = ((rv.sign.reshape(-1) < 0) & (idx > 0)).astype(np.uint8)
    codes = idx.astype(np.uint8) | (sign_bit << 3)
    return QuantizedTensor(shape=rv.shape, codes=codes, scales=scales)


@dataclass
class RoundingReport:
    """Strategy-by-strategy reconstruction losses for one layer."""

    strategies: list[dict] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    note: str = DESK_SCALE_NOTE

    def to_json_dict(self) -> dict:
        return {"note": self.note, "seeds": self.seeds, "strategies": self.strategies}

    def format_table(self) -> str:
        width = max(len(s["label"]) for s in self.strategies) + 2
        lines = [f"{'rounding scheme':<{width}}reconstruction loss",
                 "-" * (width + 24)]
        for s in self.strategies:
            if "mean" in s:
                val = f"{s['mean']:.6e} +/- {s['std']:.2e} (min {s['min']:.6e}, n={s['n_samples']})"
            else:
                val = f"{s['loss']:.6e}"
            lines.append(f"{s['label']:<{width}}{val}")
        lines.append(f"note: {self.note}")
        return "\n".join(lines) + "\n"


def compare_rounding_study(layer: LinearLayer, batch: CalibBatch, n_samples: int = 100,
                           seed: int = 0, *, block_size: int = 16,
                           max_n: int = 20) -> RoundingReport:
    """RTN baseline, both constant directions, stochastic draws, and (when the
    free-weight count permits) the enumerated optimum, all under one loss."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    scales = compute_scales(layer.W, block_size)
    rv = init_rounding_vars(layer.W, scales)

    def loss_of(W_hat: np.ndarray) -> float:
        return reconstruction_mse(layer, batch, W_hat)

    baseline = loss_of(dequantize(quantize_rtn(layer.W, scales)))
    lower = loss_of(rv.sign * rv.w_lower * rv.scale_prod)
    upper = loss_of(rv.sign * rv.w_upper * rv.scale_prod)

    rng = np.random.default_rng(seed)
    draws = np.array([loss_of(dequantize(stochastic_round_sample(layer.W, scales, rng)))
                      for _ in range(n_samples)])

    strategies = [
        {"label": "baseline", "loss": baseline},
        {"label": "lower", "loss": lower},
        {"label": "upper", "loss": upper},
        {"label": "stochastic", "mean": float(draws.mean()), "std": float(draws.std()),
         "min": float(draws.min()), "n_samples": int(n_samples)},
        {"label": "stochastic-best", "loss": float(draws.min())},
    ]
    n_free = int((~rv.frozen_mask).sum())
    if n_free <= max_n:
        _, loss_star = brute_force_optimal(layer, batch, scales, max_n=max_n)
        strategies.append({"label": "optimal", "loss": loss_star})
    return RoundingReport(strategies=strategies, seeds=[int(seed)])
