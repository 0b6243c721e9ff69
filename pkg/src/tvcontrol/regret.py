"""Best fixed DAC policy in hindsight and regret bookkeeping.

For a fixed disturbance realization the outputs and inputs of a DAC policy
are affine in its gains: with ``theta = M.ravel()`` (index order ``k, i, j``)
we have ``u_t = U_t theta`` and ``y_t = y0_t + Y_t theta``.  The sensitivity
``Y_t = C_t X_t`` follows ``X_{t+1} = A_t X_t + B_t U_t``.  Convex costs then
give a convex objective, minimized by projected gradient descent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .dac import DacParams, dac_control, project_dac
from .errors import ContractViolation, InsufficientDataError, UnsupportedCostError
from .lds import CostSpec, DisturbanceRealization, EpisodeTrace, SystemPath, natural_outputs, step


@dataclass(frozen=True)
class AffineMaps:
    y0: np.ndarray  # (T, p)
    Y: np.ndarray  # (T, p, P)
    U: np.ndarray  # (T, m, P)
    shape: tuple  # (h, m, q)

    def outputs(self, theta) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=float).ravel()
        return self.y0 + self.Y @ theta, self.U @ theta


@dataclass(frozen=True)
class HindsightSolution:
    M_star: DacParams
    objective: float
    certificate: float  # projected-gradient norm at M_star
    iterations: int
    start_objectives: tuple


@dataclass(frozen=True)
class RegretSeries:
    M_star: Optional[DacParams]
    policy_costs: np.ndarray
    comparator_costs: np.ndarray
    cumulative: np.ndarray

    @property
    def final(self) -> float:
        return float(self.cumulative[-1]) if len(self.cumulative) else 0.0

    @property
    def log_final(self) -> float:
        return float(np.log(self.final)) if self.final > 0 else float("nan")


@dataclass(frozen=True)
class ScalingFit:
    slope: float
    intercept: float
    stderr: float
    n_points: int


def counterfactual_rollout(M, sys: SystemPath, dist: DisturbanceRealization, costs: CostSpec) -> np.ndarray:
    """Per-step costs of the fixed DAC policy ``M`` on the recorded realization."""
    blocks = M.blocks if isinstance(M, DacParams) else np.asarray(M, dtype=float)
    h, m, q = blocks.shape
    T = sys.T
    w_hist = np.zeros((h, q))
    x = sys.initial_state()
    out = np.empty(T)
    for t in range(1, T + 1):
        u = dac_control(blocks, w_hist)
        x_next, y = step(sys, t, x, u, dist)
        out[t - 1] = costs.value(t, y, u)
        x = x_next
        if h:
            w_hist = np.vstack([dist.w[t - 1][None, :], w_hist[:-1]])
    return out


def affine_maps(sys: SystemPath, dist: DisturbanceRealization, h: int) -> AffineMaps:
    T = sys.T
    n, m, p, q = sys.dims
    P = h * m * q
    # Wpad[t + h - 1 - k] = w_{t-1-k} (zero before the episode)
    Wpad = np.vstack([np.zeros((h, q)), dist.w])
    Y = np.empty((T, p, P))
    U = np.zeros((T, m, P))
    X = np.zeros((n, P))
    for i in range(T):
        Ut = U[i].reshape(m, h, m, q)
        for k in range(h):
            w = Wpad[i + h - 1 - k]
            for r in range(m):
                Ut[r, k, r, :] = w
        Y[i] = sys.C[i] @ X
        X = sys.A[i] @ X + sys.B[i] @ U[i]
    return AffineMaps(y0=natural_outputs(sys, dist), Y=Y, U=U, shape=(h, m, q))


class _Objective:
    def __init__(self, maps: AffineMaps, costs: CostSpec):
        self.maps = maps
        self.costs = costs
        self.quadratic = costs.kind == "quadratic"
        if self.quadratic:
            Q, R = costs.Q, costs.R
            QY = np.einsum("ij,tjP->tiP", Q, maps.Y)
            self.H = np.einsum("tiP,tiS->PS", maps.Y, QY) + np.einsum("tiP,ij,tjS->PS", maps.U, R, maps.U)
            self.H = 0.5 * (self.H + self.H.T)
            self.b = np.einsum("tiP,ti->P", QY, maps.y0)
            self.c = float(np.einsum("ti,ij,tj->", maps.y0, Q, maps.y0))

    def value(self, theta) -> float:
        if self.quadratic:
            return float(theta @ self.H @ theta + 2.0 * self.b @ theta + self.c)
        Y, U = self.maps.outputs(theta)
        return float(np.sum(self.costs.values(Y, U)))

    def grad(self, theta) -> np.ndarray:
        if self.quadratic:
            return 2.0 * (self.H @ theta + self.b)
        Y, U = self.maps.outputs(theta)
        gy, gu = self.costs.grads(Y, U)
        return np.einsum("tpP,tp->P", self.maps.Y, gy) + np.einsum("tmP,tm->P", self.maps.U, gu)


def projected_gradient(theta, grad, shape, kappa_M: float, rtol: float = 1e-10) -> np.ndarray:
    """Gradient with the outward normal part removed on blocks at the boundary."""
    h = shape[0]
    g = np.array(grad, dtype=float).reshape(h, -1)
    th = np.asarray(theta, dtype=float).reshape(h, -1)
    norms = np.linalg.norm(th, axis=1)
    for k in range(h):
        if kappa_M == 0:
            g[k] = 0.0
        elif norms[k] >= kappa_M * (1 - rtol):
            nrm = th[k] / norms[k]
            inner = g[k] @ nrm
            if inner < 0:  # descent would leave the ball
                g[k] -= inner * nrm
    return g.ravel()


def _spg(obj: _Objective, theta, shape, kappa_M, tol, max_iter):
    """Spectral projected gradient with monotone Armijo backtracking."""
    proj = lambda v: project_dac(v.reshape(shape), kappa_M).blocks.ravel()
    theta = proj(np.asarray(theta, dtype=float))
    f = obj.value(theta)
    g = obj.grad(theta)
    alpha = 1.0 / max(np.linalg.norm(g), 1.0)
    if obj.quadratic:
        lmax = np.linalg.norm(obj.H, 2)
        alpha = 1.0 / (2.0 * lmax) if lmax > 0 else 1.0
    it = 0
    for it in range(1, max_iter + 1):
        cert = np.linalg.norm(projected_gradient(theta, g, shape, kappa_M))
        if cert < tol:
            break
        d = proj(theta - alpha * g) - theta
        if not np.any(d):
            break
        slope = g @ d
        lam = 1.0
        while True:
            cand = theta + lam * d
            f_new = obj.value(cand)
            if f_new <= f + 1e-4 * lam * slope or lam < 1e-12:
                break
            lam *= 0.5
        g_new = obj.grad(cand)
        s, yv = cand - theta, g_new - g
        sy = s @ yv
        alpha = float(np.clip(s @ s / sy, 1e-12, 1e12)) if sy > 0 else 1e12
        if f_new > f:
            break
        theta, f, g = cand, f_new, g_new
    return theta, f, g, it


def best_dac_in_hindsight(
    sys: SystemPath,
    dist: DisturbanceRealization,
    costs: CostSpec,
    h: int,
    kappa_M: float,
    *,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    starts: int = 5,
    seed: int = 0,
    return_info: bool = False,
):
    """Minimize the full-horizon cost over fixed gains in the policy class.

    Multi-start from zero and ``starts - 1`` random points of the class.
    ``tol`` applies to the projected-gradient norm relative to
    ``max(1, |grad(0)|)``.  Ties in objective go to the smallest-norm gains.
    Returns ``(M_star, comparator_costs)`` or, with ``return_info``,
    ``(solution, comparator_costs)``.
    """
    if costs.kind == "custom-convex" and (not costs.convex or costs.grad_fn is None):
        raise UnsupportedCostError("comparator needs a convex cost with a gradient callable")
    n, m, p, q = sys.dims
    shape = (h, m, q)
    maps = affine_maps(sys, dist, h)
    obj = _Objective(maps, costs)
    scale = max(1.0, float(np.linalg.norm(obj.grad(np.zeros(h * m * q)))))
    rng = np.random.default_rng(seed)
    inits = [np.zeros(h * m * q)]
    inits += [DacParams.random(h, m, q, kappa_M, rng).blocks.ravel() for _ in range(max(starts - 1, 0))]

    best = None
    start_objs = []
    for init in inits:
        start_objs.append(obj.value(project_dac(init.reshape(shape), kappa_M).blocks.ravel()))
        theta, f, g, it = _spg(obj, init, shape, kappa_M, tol * scale, max_iter)
        if best is None:
            best = (theta, f, g, it)
            continue
        fb = best[1]
        close = abs(f - fb) <= 1e-12 * max(1.0, abs(fb))
        if (f < fb and not close) or (close and np.linalg.norm(theta) < np.linalg.norm(best[0])):
            best = (theta, f, g, it)

    theta, f, g, it = best
    M_star = DacParams(theta.reshape(shape), kappa_M)
    comp = counterfactual_rollout(M_star, sys, dist, costs)
    if return_info:
        cert = float(np.linalg.norm(projected_gradient(theta, g, shape, kappa_M)))
        return HindsightSolution(M_star, f, cert, it, tuple(start_objs)), comp
    return M_star, comp


def regret_series(trace, comparator_costs, M_star: Optional[DacParams] = None) -> RegretSeries:
    """Cumulative regret ``R_t`` against one full-horizon comparator."""
    policy = trace.cost if isinstance(trace, EpisodeTrace) else np.asarray(trace, dtype=float)
    comp = np.asarray(comparator_costs, dtype=float)
    if policy.shape != comp.shape:
        raise ContractViolation(f"cost sequences differ in length: {policy.shape} vs {comp.shape}")
    return RegretSeries(M_star, policy, comp, np.cumsum(policy - comp))


def fit_scaling_exponent(points: Sequence[tuple]) -> ScalingFit:
    """OLS slope of ``log R_T`` against ``log T``; nonpositive ``R_T`` are dropped."""
    pts = [(float(T), float(R)) for T, R in points]
    keep = [(T, R) for T, R in pts if T > 0 and R > 0 and np.isfinite(R)]
    if len(keep) < len(pts):
        warnings.warn(f"dropped {len(pts) - len(keep)} nonpositive point(s) from the scaling fit", stacklevel=2)
    if len(keep) < 3:
        raise InsufficientDataError(f"need at least 3 positive points, have {len(keep)}")
    x = np.log([T for T, _ in keep])
    y = np.log([R for _, R in keep])
    fit = stats.linregress(x, y)
    return ScalingFit(float(fit.slope), float(fit.intercept), float(fit.stderr), len(keep))
