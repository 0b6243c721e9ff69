"""Online estimation of truncated Markov operators from exploration inputs.

The regression for time ``p`` is ``y_p ~ sum_l G[l] du_{p-l}`` where ``du`` are
the Gaussian exploration perturbations only.  Two estimators are provided:

* :class:`PeriodicEstimator` re-fits on disjoint periods of ``N + 2h`` steps
  and uses each fit for the whole following period.
* :class:`CpdEstimator` fits on periods of ``N + h`` steps purely to detect
  changes, while a separate ridge fit over all data since the last
  detection supplies the estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, ContractViolation, SingularSystemError
from .lds import MarkovOperator, set_bounds

MODES = ("periodic", "cpd")


@dataclass(frozen=True)
class EstimatorConfig:
    N: int
    h: int
    lam: float = 1.0
    sigma: float = 0.1
    delta: float = 0.1
    mode: str = "cpd"
    beta: Optional[float] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown estimator mode {self.mode!r}")
        if self.N < 1 or self.h < 1:
            raise ConfigurationError("N and h must be positive")
        if self.lam <= 0:
            raise ConfigurationError("ridge weight lam must be positive")
        if self.sigma < 0:
            raise ConfigurationError("sigma must be nonnegative")
        if not 0 < self.delta <= 1:
            raise ConfigurationError("delta must lie in (0, 1]")

    @property
    def t_p(self) -> int:
        return self.N + 2 * self.h if self.mode == "periodic" else self.N + self.h

    def regression_range(self, t_s: int, t_e: int) -> tuple[int, int]:
        """Inclusive row range of the period ``[t_s, t_e]``."""
        if self.mode == "periodic":
            return t_s + self.h, t_e - self.h
        return t_s + self.h, t_e


@dataclass
class EstimationWindow:
    k: int
    t_s: int
    t_e: int
    Y: np.ndarray  # (rows, p)
    U: np.ndarray  # (rows, h*m), row p = [du_{p-1}, ..., du_{p-h}]

    @property
    def rows(self) -> int:
        return self.Y.shape[0]


@dataclass
class EstimateTimeline:
    estimates: list = field(default_factory=list)  # G_hat_t per step
    period_estimates: list = field(default_factory=list)  # raw per-period fits
    detection_times: list = field(default_factory=list)
    last_detection: int = 1


def ridge_solve(Y: np.ndarray, U: np.ndarray, lam: float) -> np.ndarray:
    """``argmin_G sum |y_p - G u_p|^2 + lam |G|_F^2`` as a ``p x d`` matrix."""
    return _solve_normal(U.T @ U, Y.T @ U, lam)


def _solve_normal(Suu: np.ndarray, Syu: np.ndarray, lam: float) -> np.ndarray:
    d = Suu.shape[0]
    gram = Suu + lam * np.eye(d)
    if lam == 0 and np.linalg.matrix_rank(Suu) < d:
        raise SingularSystemError("regressors are rank deficient and lam == 0")
    try:
        factor = linalg.cho_factor(gram)
    except linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    return linalg.cho_solve(factor, Syu.T).T


def ls_estimate(window: EstimationWindow, h: int, lam: float) -> MarkovOperator:
    """Unprojected ridge estimate of the ``h`` Markov blocks from one window."""
    if window.rows < 1:
        raise ContractViolation("estimation window has no regression rows")
    if window.U.shape[1] % h:
        raise ContractViolation("regressor width is not a multiple of h")
    return MarkovOperator.from_stacked(ridge_solve(window.Y, window.U, lam), h, window.t_e)


def project_G(G_hat: MarkovOperator, kappa_a: float, kappa_b: float, gamma: float) -> MarkovOperator:
    """Clip each block's singular values to ``kappa_a kappa_b (1-gamma)^(k-1)``."""
    bounds = set_bounds(G_hat.h, kappa_a, kappa_b, gamma)
    out = np.array(G_hat.blocks, dtype=float)
    for k, bound in enumerate(bounds):
        U, s, Vt = np.linalg.svd(out[k], full_matrices=False)
        if s.size and s[0] > bound:
            out[k] = (U * np.minimum(s, bound)) @ Vt
    return MarkovOperator(out, G_hat.t)


def random_in_G(h: int, p: int, m: int, kappa_a: float, kappa_b: float, gamma: float, rng) -> MarkovOperator:
    """Random blocks with spectral norm uniform in ``[0, bound_k]``."""
    bounds = set_bounds(h, kappa_a, kappa_b, gamma)
    blocks = rng.standard_normal((h, p, m))
    for k in range(h):
        blocks[k] *= bounds[k] * rng.random() / np.linalg.norm(blocks[k], 2)
    return MarkovOperator(blocks)


def noise_radii(delta, sigma, h, *, m, kappa_a, kappa_b, gamma, kappa_M, kappa_w, kappa_e):
    """``(R_u, R_s, zeta)``: input, natural-output and residual radii."""
    ab = kappa_a * kappa_b
    R_u = kappa_M * kappa_w * h + 3.0 * sigma * math.sqrt(m + math.log(1.0 / delta))
    R_s = kappa_a * kappa_w / gamma + kappa_e + 2.0 * R_u * ab / gamma
    zeta = R_s + ab * kappa_M * kappa_w * h / gamma + ab * R_u / gamma
    return R_u, R_s, zeta


def compute_beta(delta, lam, sigma, h, N, *, n, m, kappa_a, kappa_b, gamma, kappa_M, kappa_w, kappa_e) -> float:
    """Confidence radius of a single-period estimate (error <= beta / (sigma sqrt N))."""
    if not 0 < delta < 1:
        raise ConfigurationError("delta must lie in (0, 1)")
    if sigma <= 0 or N < 1 or h < 1:
        raise ConfigurationError("sigma, N and h must be positive")
    _, _, zeta = noise_radii(
        delta, sigma, h, m=m, kappa_a=kappa_a, kappa_b=kappa_b, gamma=gamma,
        kappa_M=kappa_M, kappa_w=kappa_w, kappa_e=kappa_e,
    )
    conf = math.sqrt(n * math.log(2.0) + 2.0 * math.log(2.0 * h / delta))
    bias = lam * kappa_a * kappa_b / (gamma * zeta * sigma * math.sqrt(h * N))
    return 2.0 * math.sqrt(h) * zeta * (conf + bias)


def cpd_threshold(beta: float, sigma: float, N: int) -> float:
    """Detection threshold 2 beta / (sigma sqrt(N)); infinite without exploration."""
    if sigma == 0:
        return math.inf
    return 2.0 * beta / (sigma * math.sqrt(N))


def cpd_check(estimates: Sequence[MarkovOperator], current: MarkovOperator, threshold: float) -> bool:
    """True iff ``current`` differs from any earlier estimate by more than ``threshold`` (spectral norm)."""
    if not len(estimates):
        return False
    diffs = current.stacked()[None] - np.stack([g.stacked() for g in estimates])
    return bool(np.any(np.linalg.svd(diffs, compute_uv=False)[:, 0] > threshold))


def estimate_s_hat(setting: str, G_hat: MarkovOperator, y_t=None, u_hist=None, w_hist=None) -> np.ndarray:
    """Natural-output estimate.

    S-1 (matched disturbances): ``sum_k G[k] w_{t-k}``.  Otherwise:
    ``y_t - sum_k G[k] u_{t-k}``.  Histories are most-recent-first.
    """
    G = G_hat.blocks
    h = G.shape[0]
    if setting == "S-1":
        if w_hist is None:
            raise ContractViolation("setting S-1 needs the disturbance history")
        return np.einsum("kpm,km->p", G, np.asarray(w_hist)[:h])
    if y_t is None or u_hist is None:
        raise ContractViolation(f"setting {setting} needs y_t and the input history")
    return np.asarray(y_t) - np.einsum("kpm,km->p", G, np.asarray(u_hist)[:h])


def theoretical_scalings(Gamma: float, T: int, h: int = 1) -> tuple[int, float]:
    """``N = Gamma^-0.8 T^0.8`` (rounded up, at least ``h + 1``) and ``sigma = Gamma^0.2 T^-0.2``."""
    if Gamma < 1 or T < 1:
        raise ConfigurationError("Gamma and T must be at least 1")
    val = Gamma**-0.8 * T**0.8
    near = round(val)
    if abs(val - near) <= 1e-9 * max(1.0, val):
        val = near
    N = max(int(math.ceil(val)), h + 1)
    return N, float(Gamma**0.2 * T**-0.2)


class ChangePointDetector:
    """Compares each new period fit with every fit since the last detection."""

    def __init__(self, threshold: float):
        self.threshold = threshold
        self.epoch: list[MarkovOperator] = []

    @property
    def k(self) -> int:
        """Index the next period fit will take within the current epoch."""
        return len(self.epoch) + 1

    def update(self, G_cd: MarkovOperator) -> bool:
        if self.epoch and cpd_check(self.epoch, G_cd, self.threshold):
            self.epoch = []
            return True
        self.epoch.append(G_cd)
        return False


class _History:
    """Stores ``y_t`` and ``du_t`` and builds regression rows."""

    def __init__(self, h: int, p: int, m: int):
        self.h, self.p, self.m = h, p, m
        self.y: list[np.ndarray] = []
        self.du: list[np.ndarray] = []

    def row(self, p: int) -> np.ndarray:
        parts = [self.du[p - l - 1] if p - l >= 1 else np.zeros(self.m) for l in range(1, self.h + 1)]
        return np.concatenate(parts)

    def window(self, k: int, t_s: int, t_e: int, lo: int, hi: int) -> EstimationWindow:
        ps = range(lo, hi + 1)
        Y = np.array([self.y[p - 1] for p in ps]).reshape(-1, self.p)
        U = np.array([self.row(p) for p in ps]).reshape(-1, self.h * self.m)
        return EstimationWindow(k=k, t_s=t_s, t_e=t_e, Y=Y, U=U)


class _RunningRidge:
    def __init__(self, d: int, p: int, lam: float):
        self.lam = lam
        self.Suu = np.zeros((d, d))
        self.Syu = np.zeros((p, d))
        self.count = 0

    def add(self, y: np.ndarray, r: np.ndarray) -> None:
        self.Suu += np.outer(r, r)
        self.Syu += np.outer(y, r)
        self.count += 1

    def solve(self) -> np.ndarray:
        return _solve_normal(self.Suu, self.Syu, self.lam)


class _Estimator:
    """Shared plumbing: history, projection and the per-step timeline."""

    def __init__(self, config: EstimatorConfig, p: int, m: int, kappa_a: float, kappa_b: float, gamma: float):
        self.config = config
        self.h, self.p, self.m = config.h, p, m
        self.bounds = (kappa_a, kappa_b, gamma)
        self.hist = _History(config.h, p, m)
        self.timeline = EstimateTimeline()
        self.current = MarkovOperator.zeros(config.h, p, m)
        self.detected = False

    def project(self, G: MarkovOperator) -> MarkovOperator:
        return project_G(G, *self.bounds)

    def record_perturbation(self, t: int, du) -> None:
        if len(self.hist.du) != t - 1:
            raise ContractViolation(f"perturbation for t={t} recorded out of order")
        self.hist.du.append(np.asarray(du, dtype=float))

    def observe(self, t: int, y) -> MarkovOperator:
        if len(self.hist.y) != t - 1:
            raise ContractViolation(f"observation for t={t} recorded out of order")
        self.hist.y.append(np.asarray(y, dtype=float))
        self.detected = False
        self._update(t)
        self.current = MarkovOperator(self.current.blocks, t)
        self.timeline.estimates.append(self.current)
        return self.current

    def _update(self, t: int) -> None:
        raise NotImplementedError


class PeriodicEstimator(_Estimator):
    """Ridge fit at the end of every period, used for the whole next period."""

    def __init__(self, config, p, m, kappa_a, kappa_b, gamma):
        if config.mode != "periodic":
            config = EstimatorConfig(**{**config.__dict__, "mode": "periodic"})
        super().__init__(config, p, m, kappa_a, kappa_b, gamma)
        self.k = 1
        self.t_s = 1
        self.t_e = self.config.t_p

    def _update(self, t):
        if t != self.t_e:
            return
        lo, hi = self.config.regression_range(self.t_s, self.t_e)
        window = self.hist.window(self.k, self.t_s, self.t_e, lo, hi)
        raw = ls_estimate(window, self.h, self.config.lam)
        self.timeline.period_estimates.append(raw)
        self.current = self.project(raw)
        self.k += 1
        self.t_s = self.t_e
        self.t_e = self.t_s + self.config.t_p - 1


class CpdEstimator(_Estimator):
    """Running ridge fit since the last detection, reset by period-level change detection."""

    def __init__(self, config, p, m, kappa_a, kappa_b, gamma, threshold: Optional[float] = None):
        if config.mode != "cpd":
            config = EstimatorConfig(**{**config.__dict__, "mode": "cpd"})
        super().__init__(config, p, m, kappa_a, kappa_b, gamma)
        if threshold is None:
            if config.beta is None:
                raise ConfigurationError("CPD estimator needs beta or an explicit threshold")
            threshold = cpd_threshold(config.beta, config.sigma, config.N)
        self.detector = ChangePointDetector(threshold)
        self.t_s = 1
        self.t_e = self.config.t_p
        self.t_d = 1
        self.running = _RunningRidge(self.h * m, p, config.lam)

    @property
    def k(self) -> int:
        return self.detector.k

    def _update(self, t):
        h = self.h
        p_new = t - h
        if p_new >= self.t_d + h:
            self.running.add(self.hist.y[p_new - 1], self.hist.row(p_new))
        if t == self.t_e:
            lo, hi = self.config.regression_range(self.t_s, self.t_e)
            window = self.hist.window(self.k, self.t_s, self.t_e, lo, hi)
            raw = ls_estimate(window, h, self.config.lam)
            self.timeline.period_estimates.append(raw)
            if self.detector.update(raw):
                self.detected = True
                self.t_d = t
                self.timeline.detection_times.append(t)
                self.timeline.last_detection = t
                self.running = _RunningRidge(h * self.m, self.p, self.config.lam)
            self.t_s = self.t_e
            self.t_e = self.t_s + self.config.N + h - 1
        if t >= self.t_d + 2 * h:
            raw = MarkovOperator.from_stacked(self.running.solve(), h, t)
            self.current = self.project(raw)


def cpd_running_estimate(t: int, t_d: int, y_hist, du_hist, h: int, lam: float) -> MarkovOperator:
    """Batch ridge fit over rows ``[t_d + h, t - h]`` (unprojected)."""
    if t < t_d + 2 * h:
        raise ContractViolation("no rows before t_d + 2h; hold the previous estimate")
    y_hist = np.asarray(y_hist, dtype=float)
    du_hist = np.asarray(du_hist, dtype=float)
    hist = _History(h, y_hist.shape[1], du_hist.shape[1])
    hist.y, hist.du = list(y_hist), list(du_hist)
    window = hist.window(0, t_d, t, t_d + h, t - h)
    return ls_estimate(window, h, lam)


class FixedEstimate:
    """Estimate pinned to one operator (or to a per-step sequence)."""

    def __init__(self, G, h: Optional[int] = None):
        self.seq = None
        if isinstance(G, MarkovOperator):
            self.G = G
        else:
            self.seq = np.asarray(G)
        self.detected = False
        self.timeline = EstimateTimeline()

    def observe(self, t, y) -> MarkovOperator:
        if self.seq is not None:
            return MarkovOperator(self.seq[t - 1], t)
        return MarkovOperator(self.G.blocks, t)

    def record_perturbation(self, t, du) -> None:
        pass


class RandomEstimate:
    """Estimate redrawn in the system set at the start of every period."""

    def __init__(self, h, p, m, kappa_a, kappa_b, gamma, period: int, rng):
        self.args = (h, p, m, kappa_a, kappa_b, gamma)
        self.period = period
        self.rng = rng
        self.detected = False
        self.timeline = EstimateTimeline()
        self.G = None

    def observe(self, t, y) -> MarkovOperator:
        if (t - 1) % self.period == 0:
            self.G = random_in_G(*self.args, self.rng)
        return MarkovOperator(self.G.blocks, t)

    def record_perturbation(self, t, du) -> None:
        pass


class ExploreThenCommitEstimator(_Estimator):
    """Single ridge fit over the exploration prefix, frozen afterwards."""

    def __init__(self, config, p, m, kappa_a, kappa_b, gamma, T_explore: int):
        super().__init__(config, p, m, kappa_a, kappa_b, gamma)
        self.T_explore = T_explore

    def _update(self, t):
        if t == self.T_explore + 1 and self.T_explore >= self.h + 1:
            window = self.hist.window(1, 1, self.T_explore, self.h + 1, self.T_explore)
            raw = ls_estimate(window, self.h, self.config.lam)
            self.timeline.period_estimates.append(raw)
            self.current = self.project(raw)
