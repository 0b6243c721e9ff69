"""Disturbance-action control: policy, truncated costs and their gradients.

A DAC policy with history ``h`` is ``u_t = sum_k M[k] w_{t-k}``.  Gains are
stored as an array of shape ``(h, m, q)``; disturbance histories as arrays
whose row ``j`` holds ``w_{t-1-j}`` (most recent first, zero before the
episode starts).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractViolation, UnsupportedCostError
from .lds import CostSpec, MarkovOperator


@dataclass(frozen=True)
class DacParams:
    blocks: np.ndarray  # (h, m, q)
    kappa_M: float = np.inf

    @property
    def h(self) -> int:
        return self.blocks.shape[0]

    @classmethod
    def zeros(cls, h: int, m: int, q: int, kappa_M: float = np.inf) -> "DacParams":
        return cls(np.zeros((h, m, q)), kappa_M)

    @classmethod
    def random(cls, h: int, m: int, q: int, kappa_M: float, rng: np.random.Generator) -> "DacParams":
        """Each block uniform in the Frobenius ball of radius ``kappa_M``."""
        d = m * q
        g = rng.standard_normal((h, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = kappa_M * rng.random(h) ** (1.0 / d)
        return cls((g * r[:, None]).reshape(h, m, q), kappa_M)

    def norm(self) -> float:
        return float(np.linalg.norm(self.blocks))

    def in_class(self, atol: float = 1e-12) -> bool:
        norms = np.linalg.norm(self.blocks.reshape(self.h, -1), axis=1)
        return bool(np.all(norms <= self.kappa_M + atol))


@dataclass(frozen=True)
class TruncatedContext:
    """Everything the truncated cost at time ``t`` depends on besides ``M``.

    ``w_hist`` has ``2h`` rows ``w_{t-1}, ..., w_{t-2h}``.  ``M_window``
    optionally lists ``M_t, M_{t-1}, ..., M_{t-h}`` for the memory form.
    """

    G: MarkovOperator
    s_hat: np.ndarray
    w_hist: np.ndarray
    M_window: Optional[Sequence[DacParams]] = None
    t: int = 1


@dataclass(frozen=True)
class OcoConstants:
    L_f: float
    G_f: float
    D: float
    D_tilde: float


def _blocks(M) -> np.ndarray:
    return M.blocks if isinstance(M, DacParams) else np.asarray(M, dtype=float)


def dac_control(M, w_hist) -> np.ndarray:
    """``sum_{k=1}^h M[k] w_{t-k}``."""
    blocks = _blocks(M)
    w_hist = np.asarray(w_hist, dtype=float)
    h, m, q = blocks.shape
    if w_hist.ndim != 2 or w_hist.shape[0] < h or w_hist.shape[1] != q:
        raise ContractViolation(f"need at least {h} disturbances of size {q}, got {w_hist.shape}")
    return np.einsum("kmq,kq->m", blocks, w_hist[:h])


def project_dac(M, kappa_M: float) -> DacParams:
    """Euclidean projection onto ``{M : |M[k]|_F <= kappa_M for every k}``.

    The set is a product of Frobenius balls, so each block is scaled back
    independently.
    """
    blocks = np.array(_blocks(M), dtype=float)
    h = blocks.shape[0]
    norms = np.linalg.norm(blocks.reshape(h, -1), axis=1)
    over = norms > kappa_M
    if np.any(over):
        blocks[over] *= (kappa_M / norms[over])[:, None, None]
    return DacParams(blocks, kappa_M)


def _hankel(w_hist: np.ndarray, h: int) -> np.ndarray:
    """``H[i, j] = w_{t-1-i-j}`` for ``i = 0..h``, ``j = 0..h-1``; shape ``(h+1, h, q)``."""
    if w_hist.shape[0] < 2 * h:
        raise ContractViolation(f"need {2 * h} past disturbances, got {w_hist.shape[0]}")
    return sliding_window_view(w_hist[: 2 * h], h, axis=0).transpose(0, 2, 1)


def window_controls(M_window: Sequence, w_hist: np.ndarray) -> np.ndarray:
    """DAC parts ``u~_{t-i}`` for ``i = 0..h``, each from its own ``M_{t-i}``."""
    h = _blocks(M_window[0]).shape[0]
    if len(M_window) != h + 1:
        raise ContractViolation(f"M_window must hold h+1 = {h + 1} entries")
    H = _hankel(np.asarray(w_hist, dtype=float), h)
    return np.stack([np.einsum("jmq,jq->m", _blocks(M_window[i]), H[i]) for i in range(h + 1)])


def truncated_output(ctx: TruncatedContext, u_window) -> np.ndarray:
    """``s_hat + sum_{k=1}^h G[k] u_{t-k}`` with ``u_window`` rows ``u_{t-1}..u_{t-h}``."""
    G = ctx.G.blocks
    u_window = np.asarray(u_window, dtype=float)
    h, p, m = G.shape
    if u_window.shape != (h, m):
        raise ContractViolation(f"u_window must have shape {(h, m)}, got {u_window.shape}")
    if ctx.s_hat.shape != (p,):
        raise ContractViolation(f"s_hat must have shape ({p},)")
    return ctx.s_hat + np.einsum("kpm,km->p", G, u_window)


def truncated_cost(ctx: TruncatedContext, cost: CostSpec, u_t=None) -> float:
    """Cost of the truncated output built from the DAC inputs of ``ctx.M_window``.

    ``u_t`` defaults to the DAC input of ``M_t``, the first window entry.
    """
    if ctx.M_window is None:
        raise ContractViolation("truncated_cost needs ctx.M_window")
    u_tilde = window_controls(ctx.M_window, ctx.w_hist)
    y = truncated_output(ctx, u_tilde[1:])
    u = u_tilde[0] if u_t is None else np.asarray(u_t, dtype=float)
    return cost.value(ctx.t, y, u)


def replicated_cost(M, ctx: TruncatedContext, cost: CostSpec) -> float:
    """``F_t(M)``: the truncated cost with every window entry equal to ``M``."""
    h = _blocks(M).shape[0]
    window = [M] * (h + 1)
    u_tilde = window_controls(window, ctx.w_hist)
    y = truncated_output(ctx, u_tilde[1:])
    return cost.value(ctx.t, y, u_tilde[0])


def grad_truncated_cost(M, ctx: TruncatedContext, cost: CostSpec) -> np.ndarray:
    """Gradient of ``F_t(M)`` with respect to the gains, shape ``(h, m, q)``.

    ``dF/dM[k] = sum_i G[i]^T grad_y c w_{t-i-k}^T + grad_u c w_{t-k}^T``.
    """
    if cost.kind == "custom-convex" and cost.grad_fn is None:
        raise UnsupportedCostError("custom cost has no gradient callable")
    blocks = _blocks(M)
    h = blocks.shape[0]
    G = ctx.G.blocks
    H = _hankel(np.asarray(ctx.w_hist, dtype=float), h)
    u_tilde = np.einsum("jmq,ijq->im", blocks, H)
    y = ctx.s_hat + np.einsum("kpm,km->p", G, u_tilde[1:])
    gy, gu = cost.grad(ctx.t, y, u_tilde[0])
    # a[0] multiplies w_{t-k}; a[i] = G[i]^T gy multiplies w_{t-i-k}
    a = np.vstack([gu[None, :], np.einsum("ipm,p->im", G, gy)])
    return np.einsum("im,ikq->kmq", a, H)


def ogd_step(M: DacParams, grad, eta: float) -> DacParams:
    """Projected gradient step ``Proj(M - eta grad)``."""
    if eta < 0:
        raise ConfigurationError("step size must be nonnegative")
    if eta == 0:
        return M
    return project_dac(M.blocks - eta * np.asarray(grad), M.kappa_M)


def compute_oco_constants(
    L: float,
    G: float,
    kappa_a: float,
    kappa_b: float,
    kappa_w: float,
    kappa_e: float,
    kappa_M: float,
    h: int,
    gamma: float,
    n: int,
    m: int,
) -> OcoConstants:
    """Memory-Lipschitz constant, gradient bound and diameter of the DAC class."""
    if not 0 < gamma < 1:
        raise ConfigurationError("gamma must lie in (0, 1)")
    ab = kappa_a * kappa_b
    d_tilde = max(kappa_M * kappa_w * h + kappa_a * kappa_w / gamma + kappa_e + ab * kappa_M * kappa_w * h / gamma, 1.0)
    sqrt_h = np.sqrt(h)
    L_f = L * d_tilde * (ab * kappa_w * sqrt_h + kappa_w * sqrt_h)
    G_f = G * d_tilde * h * n * m * (ab * kappa_w / gamma + kappa_w)
    D = 2.0 * kappa_M * sqrt_h
    return OcoConstants(L_f=float(L_f), G_f=float(G_f), D=float(D), D_tilde=float(d_tilde))


def theory_step_size(consts: OcoConstants, h: int, T: int) -> float:
    """``D / sqrt(G_f (G_f + L_f h^2) T)``."""
    denom = np.sqrt(consts.G_f * (consts.G_f + consts.L_f * h * h) * T)
    if denom == 0:
        raise ConfigurationError("step size undefined when G_f == 0")
    return float(consts.D / denom)


def theory_history(T: int, gamma: float) -> int:
    """``log T / log(1/(1-gamma))`` rounded up, at least 1."""
    return max(1, int(np.ceil(np.log(T) / np.log(1.0 / (1.0 - gamma)) - 1e-12)))
