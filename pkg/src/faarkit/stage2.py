"""Stage 2: full-model alignment of a small MLP.

A teacher network runs in full precision; the student shares its weights but
soft-quantizes them and quantizes every layer input. Alignment minimizes

    L = lambda_kl * KL(P_fp || P_q) + || H_fp - H_q ||_F^2 + lambda_round * sum_l L_round

where P are tempered softmax outputs and H is the input to the head layer
(the last hidden state). Backprop is exact reverse-mode except that activation
quantization passes gradients straight through, and ReLU uses subgradient 0
at 0. All layers' rounding variables update jointly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import Adam, DivergenceError
from .rounding import (
    BetaSchedule,
    RoundingVars,
    beta_at,
    clip_vars,
    harden,
    round_reg_loss,
    soft_round,
)
from .stage1 import LinearLayer, quantize_activations

_KL_FLOOR = 1e-12


@dataclass(eq=False)
class MicroNet:
    """ReLU MLP: hidden layers then a linear head read out through softmax."""

    layers: list[LinearLayer]

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ValueError("MicroNet needs at least two layers")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.in_dim != prev.out_dim:
                raise ValueError(
                    f"layer {cur.name!r} expects {cur.in_dim} inputs but "
                    f"{prev.name!r} produces {prev.out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim


def make_micronet(rng: np.random.Generator, dims: tuple[int, ...] = (16, 32, 32, 10),
                  name_prefix: str = "fc") -> MicroNet:
    """Gaussian-initialized network; weights scaled by 1/sqrt(in_dim)."""
    if len(dims) < 3:
        raise ValueError("dims must describe at least two layers")
    layers = [
        LinearLayer(W=rng.normal(size=(dims[k + 1], dims[k])) / np.sqrt(dims[k]),
                    name=f"{name_prefix}{k}")
        for k in range(len(dims) - 1)
    ]
    return MicroNet(layers=layers)


@dataclass
class Stage2Config:
    steps: int = 2500
    learning_rate: float = 1e-4
    lambda_kl: float = 1.0
    lambda_round: float = 0.01
    tau: float = 1.0
    # Defaults continue the temperature where the stage-1 schedule ends (40);
    # beta_restart swaps in a fresh 4 -> 40 anneal over the stage-2 steps.
    beta_start: float = 40.0
    beta_end: float = 40.0
    beta_restart: bool = False
    batch_size: int = 32
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
        if self.lambda_kl < 0 or self.lambda_round < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.tau > 0:
            raise ValueError("softmax temperature must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def schedule(self) -> BetaSchedule:
        steps = max(self.steps, 1)
        if self.beta_restart:
            return BetaSchedule(beta_end=self.beta_end, total_steps=steps)
        return BetaSchedule(beta_start=self.beta_start, beta_end=self.beta_end,
                            total_steps=steps)


def _softmax(Z: np.ndarray, tau: float) -> np.ndarray:
    S = Z / tau
    S = S - S.max(axis=1, keepdims=True)
    E = np.exp(S)
    return E / E.sum(axis=1, keepdims=True)


def _relu(S: np.ndarray) -> np.ndarray:
    return np.maximum(S, 0.0)


def forward(net: MicroNet, X, *, rvs: list[RoundingVars] | None = None,
            beta: float | None = None, weights: list[np.ndarray] | None = None,
            tau: float = 1.0, block_size: int = 16,
            quantize_acts: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One pass through the network; returns (H_last, Z, P).

    Full precision by default. Pass rvs + beta for the soft-quantized student,
    or explicit weight matrices (e.g. hardened ones) via `weights`. Quantized
    modes also quantize each layer input unless quantize_acts is False.
    H_last is the ReLU output feeding the head, before input quantization.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise ValueError(f"input must be [batch x {net.in_dim}]")
    if rvs is not None and weights is not None:
        raise ValueError("pass rvs or weights, not both")
    quantized = rvs is not None or weights is not None
    if rvs is not None:
        if beta is None:
            raise ValueError("soft-quantized forward needs beta")
        if len(rvs) != len(net.layers):
            raise ValueError("one RoundingVars per layer")
        Ws = [rv.sign * (rv.w_lower + soft_round(rv.v, beta) * rv.span) * rv.scale_prod
              for rv in rvs]
    elif weights is not None:
        if len(weights) != len(net.layers):
            raise ValueError("one weight matrix per layer")
        Ws = [np.asarray(W, dtype=np.float64) for W in weights]
    else:
        Ws = [layer.W for layer in net.layers]

    def maybe_q(A):
        if quantized and quantize_acts:
            return quantize_activations(A, block_size)
        return A

    H = X
    for W in Ws[:-1]:
        H = _relu(maybe_q(H) @ W.T)
    Z = maybe_q(H) @ Ws[-1].T
    return H, Z, _softmax(Z, tau)


def kl_loss(P_fp: np.ndarray, P_q: np.ndarray) -> float:
    """Mean over the batch of KL(P_fp || P_q), with P_q floored at 1e-12."""
    P_fp = np.asarray(P_fp, dtype=np.float64)
    P_q = np.asarray(P_q, dtype=np.float64)
    if P_fp.shape != P_q.shape or P_fp.ndim != 2 or P_fp.size == 0:
        raise ValueError("distributions must be matching nonempty 2-d arrays")
    for name, P in (("P_fp", P_fp), ("P_q", P_q)):
        if np.any(P < 0):
            raise ValueError(f"{name} has negative entries")
        if not np.allclose(P.sum(axis=1), 1.0, atol=1e-8):
            raise ValueError(f"{name} rows must sum to 1")
    log_fp = np.zeros_like(P_fp)
    np.log(P_fp, out=log_fp, where=P_fp > 0)
    terms = np.where(P_fp > 0, P_fp * (log_fp - np.log(np.maximum(P_q, _KL_FLOOR))), 0.0)
    return float(terms.sum(axis=1).mean())


def stage2_loss(teacher: tuple, student: tuple, rvs: list[RoundingVars],
                cfg: Stage2Config) -> tuple[float, dict]:
    """Total alignment loss and its parts.

    teacher/student are (H_last, Z, P) triples from forward(). Parts dict holds
    the raw kl / mse / round terms; total applies the configured weights.
    """
    H_fp, _, P_fp = teacher
    H_q, _, P_q = student
    if H_fp.shape != H_q.shape:
        raise ValueError("hidden states must have matching shapes")
    kl = kl_loss(P_fp, P_q)
    diff = H_fp - H_q
    mse = float(np.sum(diff * diff))
    rnd = float(sum(round_reg_loss(rv)[0] for rv in rvs))
    total = cfg.lambda_kl * kl + mse + cfg.lambda_round * rnd
    return total, {"kl": kl, "mse": mse, "round": rnd}


def backprop_stage2(net: MicroNet, X, teacher: tuple, rvs: list[RoundingVars],
                    beta: float, cfg: Stage2Config, *,
                    quantize_acts: bool = True) -> list[np.ndarray]:
    """Gradients of the stage-2 loss with respect to every layer's v.

    Exact reverse-mode through the student: softmax/KL jacobian (respecting the
    1e-12 floor), raw Frobenius on the last hidden state, ReLU subgradient 0 at
    0, straight-through on activation quantization.
    """
    X = np.asarray(X, dtype=np.float64)
    H_fp, _, P_fp = teacher
    B = X.shape[0]
    L = len(net.layers)
    if len(rvs) != L:
        raise ValueError("one RoundingVars per layer")

    hs = [soft_round(rv.v, beta) for rv in rvs]
    Ws = [rv.sign * (rv.w_lower + h * rv.span) * rv.scale_prod
          for rv, h in zip(rvs, hs)]

    def maybe_q(A):
        return quantize_activations(A, cfg.block_size) if quantize_acts else A

    # Forward, keeping each layer's (possibly quantized) input and pre-ReLU sums.
    A: list[np.ndarray] = []
    S: list[np.ndarray] = []
    H = X
    for k in range(L - 1):
        Ak = maybe_q(H)
        Sk = Ak @ Ws[k].T
        A.append(Ak)
        S.append(Sk)
        H = _relu(Sk)
    H_last = H
    A_head = maybe_q(H_last)
    Z = A_head @ Ws[-1].T
    P = _softmax(Z, cfg.tau)

    # KL through the tempered softmax. Entries of P at or below the floor are
    # flat in the loss; entries where P_fp is zero contribute nothing.
    g_P = np.where((P_fp > 0) & (P > _KL_FLOOR),
                   -(cfg.lambda_kl / B) * P_fp / np.maximum(P, _KL_FLOOR), 0.0)
    dZ = (P * (g_P - np.sum(g_P * P, axis=1, keepdims=True))) / cfg.tau

    grads_W = [np.zeros(0)] * L
    grads_W[L - 1] = dZ.T @ A_head
    g_H = dZ @ Ws[-1] + 2.0 * (H_last - H_fp)   # straight-through into H_last
    for k in range(L - 2, -1, -1):
        dS = g_H * (S[k] > 0)
        grads_W[k] = dS.T @ A[k]
        g_H = dS @ Ws[k]

    out: list[np.ndarray] = []
    for rv, h, gW in zip(rvs, hs, grads_W):
        dW_dv = rv.sign * rv.span * rv.scale_prod * beta * h * (1.0 - h)
        _, g_reg = round_reg_loss(rv)
        g = gW * dW_dv + cfg.lambda_round * g_reg
        g[rv.frozen_mask] = 0.0
        out.append(g)
    return out


def hardened_forward(net: MicroNet, X, rvs: list[RoundingVars], *,
                     tau: float = 1.0, block_size: int = 16) -> tuple:
    """Student pass with hardened (binary) decisions instead of the relaxation."""
    Ws = [harden(rv)[1] for rv in rvs]
    return forward(net, X, weights=Ws, tau=tau, block_size=block_size)


def align_model(net: MicroNet, rvs: list[RoundingVars], data: list[np.ndarray],
                cfg: Stage2Config) -> tuple[list[RoundingVars], list[tuple]]:
    """Joint Adam over all layers' rounding variables.

    `data` is a list of input batches; batches rotate round-robin across steps
    and teacher outputs are precomputed once per batch. Returns the updated
    RoundingVars and a trace of (step, kl, mse, round, beta, total) rows.
    Zero steps is a no-op. Raises DivergenceError on a non-finite loss.
    """
    if not data:
        raise ValueError("need at least one data batch")
    batches = [np.asarray(Xb, dtype=np.float64) for Xb in data]
    teachers = [forward(net, Xb, tau=cfg.tau) for Xb in batches]
    sched = cfg.schedule()
    opt = Adam([rv.v for rv in rvs], lr=cfg.learning_rate,
               beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    trace: list[tuple] = []
    for t in range(cfg.steps):
        Xb = batches[t % len(batches)]
        teach = teachers[t % len(batches)]
        beta = beta_at(sched, t)
        student = forward(net, Xb, rvs=rvs, beta=beta, tau=cfg.tau,
                          block_size=cfg.block_size)
        total, parts = stage2_loss(teach, student, rvs, cfg)
        if not np.isfinite(total):
            raise DivergenceError(f"alignment loss became non-finite at step {t}: {parts!r}")
        trace.append((t, parts["kl"], parts["mse"], parts["round"], beta, total))
        grads = backprop_stage2(net, Xb, teach, rvs, beta, cfg)
        opt.step(grads)
        for rv in rvs:
            clip_vars(rv)
    return rvs, trace
