"""Linear time-varying systems with bounded disturbances.

Time indices are 1-based everywhere in the public API: ``A[t - 1]`` holds
:math:`A_t`.  All generators take an explicit ``numpy.random.Generator`` or
seed; nothing touches global RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, UnsupportedCostError

SETTINGS = ("general", "S-1", "S-2")
SCHEDULES = ("constant", "piecewise", "per_step")
DISTURBANCE_KINDS = ("uniform", "sinusoidal", "constant", "zero")


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _clip_spectral(mat: np.ndarray, bound: float) -> np.ndarray:
    norm = np.linalg.norm(mat, 2)
    if norm > bound:
        return mat * (bound / norm)
    return mat


def uniform_ball(rng: np.random.Generator, size: int, dim: int, radius: float) -> np.ndarray:
    """``size`` points drawn uniformly from the Euclidean ball of ``radius``."""
    if dim == 0 or radius == 0:
        return np.zeros((size, dim))
    g = rng.standard_normal((size, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.random(size) ** (1.0 / dim)
    return g * r[:, None]


@dataclass(frozen=True)
class SystemConfig:
    """Parameters for :func:`generate_system`.

    ``schedule`` is one of ``constant``, ``piecewise`` (regimes switch at
    ``change_times``, or at ``num_changes`` evenly spaced times) and
    ``per_step`` (the regime matrices plus i.i.d. jitter redrawn every step).
    """

    n: int
    m: int
    p: int
    q: int
    T: int
    gamma: float = 0.5
    kappa_b: float = 1.0
    c_norm: float = 1.0
    setting: str = "general"
    schedule: str = "constant"
    change_times: tuple = ()
    num_changes: int = 0
    jitter: float = 0.0

    def validate(self) -> None:
        for name in ("n", "m", "p", "q", "T"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.kappa_b <= 0 or self.c_norm <= 0:
            raise ConfigurationError("kappa_b and c_norm must be positive")
        if self.setting not in SETTINGS:
            raise ConfigurationError(f"unknown setting {self.setting!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.setting == "S-1" and (self.p != self.n or self.q != self.m):
            raise ConfigurationError("setting S-1 needs p == n and q == m (C = I, B_w = B)")
        if self.setting == "S-2" and self.q != self.n:
            raise ConfigurationError("setting S-2 needs q == n (B_w = I)")
        if self.jitter < 0:
            raise ConfigurationError("jitter must be nonnegative")
        times = list(self.change_times)
        if times and (sorted(set(times)) != times or times[0] < 2 or times[-1] > self.T):
            raise ConfigurationError("change_times must be strictly increasing within [2, T]")
        if self.num_changes < 0 or self.num_changes >= self.T:
            raise ConfigurationError("num_changes must lie in [0, T)")

    def regime_starts(self) -> list[int]:
        if self.schedule == "constant":
            return []
        if self.change_times:
            return [int(t) for t in self.change_times]
        k = self.num_changes
        return [int(i * self.T // (k + 1)) + 1 for i in range(1, k + 1)]


@dataclass(frozen=True)
class SystemPath:
    """One realization of the time-varying matrices over ``t = 1..T``."""

    A: np.ndarray  # (T, n, n)
    B: np.ndarray  # (T, n, m)
    Bw: np.ndarray  # (T, n, q)
    C: np.ndarray  # (T, p, n)
    change_times: tuple
    kappa_a: float
    kappa_b: float
    gamma: float
    setting: str = "general"
    x1: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """``(n, m, p, q)``."""
        return self.A.shape[1], self.B.shape[2], self.C.shape[1], self.Bw.shape[2]

    @property
    def num_changes(self) -> int:
        return len(self.change_times)

    def initial_state(self) -> np.ndarray:
        n = self.A.shape[1]
        return np.zeros(n) if self.x1 is None else np.asarray(self.x1, dtype=float)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.A, self.B, self.Bw, self.C):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _detect_changes(A: np.ndarray, B: np.ndarray, C: np.ndarray) -> tuple:
    same = (
        np.all(A[1:] == A[:-1], axis=(1, 2))
        & np.all(B[1:] == B[:-1], axis=(1, 2))
        & np.all(C[1:] == C[:-1], axis=(1, 2))
    )
    return tuple(int(i) + 2 for i in np.flatnonzero(~same))


def generate_system(config: SystemConfig, seed=None) -> SystemPath:
    config.validate()
    rng = _as_rng(seed)
    n, m, p, q, T = config.n, config.m, config.p, config.q, config.T
    a_bound = 1.0 - config.gamma

    def draw_regime():
        a = rng.standard_normal((n, n))
        a *= a_bound / np.linalg.norm(a, 2)
        b = rng.standard_normal((n, m))
        b *= config.kappa_b / np.linalg.norm(b, 2)
        return a, b

    starts = config.regime_starts()
    A = np.empty((T, n, n))
    B = np.empty((T, n, m))
    bounds = [1] + starts + [T + 1]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        a, b = draw_regime()
        A[lo - 1 : hi - 1] = a
        B[lo - 1 : hi - 1] = b

    if config.schedule == "per_step" and config.jitter > 0:
        scale_a = config.jitter * a_bound / np.sqrt(n)
        scale_b = config.jitter * config.kappa_b / np.sqrt(n)
        for t in range(T):
            A[t] = _clip_spectral(A[t] + scale_a * rng.standard_normal((n, n)), a_bound)
            B[t] = _clip_spectral(B[t] + scale_b * rng.standard_normal((n, m)), config.kappa_b)

    if config.setting == "S-1":
        c = np.eye(n)
        Bw = B.copy()
    else:
        c = rng.standard_normal((p, n))
        c *= config.c_norm / np.linalg.norm(c, 2)
        if q == n:
            Bw = np.broadcast_to(np.eye(n), (T, n, n)).copy()
        else:
            bw = rng.standard_normal((n, q))
            bw /= np.linalg.norm(bw, 2)
            Bw = np.broadcast_to(bw, (T, n, q)).copy()
    C = np.broadcast_to(c, (T, p, n)).copy()

    return SystemPath(
        A=A,
        B=B,
        Bw=Bw,
        C=C,
        change_times=_detect_changes(A, B, C),
        kappa_a=float(np.linalg.norm(c, 2)),
        kappa_b=float(config.kappa_b),
        gamma=float(config.gamma),
        setting=config.setting,
    )


@dataclass(frozen=True)
class DisturbanceRealization:
    w: np.ndarray  # (T, q)
    e: np.ndarray  # (T, p)
    kappa_w: float
    kappa_e: float

    @property
    def T(self) -> int:
        return self.w.shape[0]


def generate_disturbances(
    T: int,
    q: int,
    p: int,
    seed=None,
    kind: str = "uniform",
    kappa_w: float = 1.0,
    kappa_e: float = 0.0,
    frequency: float = 0.05,
) -> DisturbanceRealization:
    """Bounded disturbance and measurement-noise sequences.

    ``uniform`` draws i.i.d. points in the ball of radius ``kappa_w``;
    ``sinusoidal`` uses one phase-shifted sine per coordinate scaled so the
    vector norm never exceeds ``kappa_w``; ``constant`` repeats one vector of
    norm ``kappa_w``.  Measurement noise is always uniform in the
    ``kappa_e`` ball.
    """
    if kind not in DISTURBANCE_KINDS:
        raise ConfigurationError(f"unknown disturbance kind {kind!r}")
    if kappa_w < 0 or kappa_e < 0:
        raise ConfigurationError("disturbance bounds must be nonnegative")
    rng = _as_rng(seed)
    if kind == "uniform":
        w = uniform_ball(rng, T, q, kappa_w)
    elif kind == "sinusoidal":
        phase = rng.uniform(0, 2 * np.pi, size=q)
        t = np.arange(1, T + 1)[:, None]
        w = kappa_w / np.sqrt(q) * np.sin(2 * np.pi * frequency * t + phase)
    elif kind == "constant":
        v = rng.standard_normal(q)
        w = np.tile(kappa_w * v / np.linalg.norm(v), (T, 1))
    else:
        w = np.zeros((T, q))
    e = uniform_ball(rng, T, p, kappa_e)
    return DisturbanceRealization(w=w, e=e, kappa_w=float(kappa_w), kappa_e=float(kappa_e))


@dataclass(frozen=True)
class MarkovOperator:
    """Blocks ``G[k-1]`` mapping the input applied ``k`` steps ago to the output."""

    blocks: np.ndarray  # (h, p, m)
    t: int = 0

    @property
    def h(self) -> int:
        return self.blocks.shape[0]

    def stacked(self) -> np.ndarray:
        """``[G1, G2, ..., Gh]`` as a single ``p x hm`` matrix."""
        h, p, m = self.blocks.shape
        return self.blocks.transpose(1, 0, 2).reshape(p, h * m)

    @classmethod
    def from_stacked(cls, mat: np.ndarray, h: int, t: int = 0) -> "MarkovOperator":
        p, hm = mat.shape
        return cls(np.ascontiguousarray(mat.reshape(p, h, hm // h).transpose(1, 0, 2)), t)

    @classmethod
    def zeros(cls, h: int, p: int, m: int, t: int = 0) -> "MarkovOperator":
        return cls(np.zeros((h, p, m)), t)


def set_bounds(h: int, kappa_a: float, kappa_b: float, gamma: float) -> np.ndarray:
    """Per-block spectral-norm caps ``kappa_a kappa_b (1-gamma)^(k-1)``."""
    return kappa_a * kappa_b * (1.0 - gamma) ** np.arange(h)


def markov_operator(sys: SystemPath, t: int, h: int) -> MarkovOperator:
    """``G[k] = C_t A_{t-1} ... A_{t-k+1} B_{t-k}``; indices below 1 clamp to 1."""
    if h < 1:
        raise ConfigurationError("history h must be at least 1")
    if not 1 <= t <= sys.T:
        raise ContractViolation(f"time {t} outside [1, {sys.T}]")
    n, m, p, _ = sys.dims
    out = np.empty((h, p, m))
    prod = sys.C[t - 1]
    for k in range(1, h + 1):
        s = max(t - k, 1)
        out[k - 1] = prod @ sys.B[s - 1]
        prod = prod @ sys.A[s - 1]
    return MarkovOperator(out, t)


def markov_sequence(sys: SystemPath, h: int) -> np.ndarray:
    """Markov blocks for every ``t``; shape ``(T, h, p, m)``."""
    return np.stack([markov_operator(sys, t, h).blocks for t in range(1, sys.T + 1)])


def natural_outputs(sys: SystemPath, dist: DisturbanceRealization) -> np.ndarray:
    """Zero-input outputs ``s_1..s_T``; shape ``(T, p)``."""
    x = sys.initial_state()
    out = np.empty((sys.T, sys.C.shape[1]))
    for t in range(sys.T):
        out[t] = sys.C[t] @ x + dist.e[t]
        x = sys.A[t] @ x + sys.Bw[t] @ dist.w[t]
    return out


def natural_output(sys: SystemPath, dist: DisturbanceRealization, t: int) -> np.ndarray:
    if not 1 <= t <= sys.T:
        raise ContractViolation(f"time {t} outside [1, {sys.T}]")
    x = sys.initial_state()
    for s in range(t - 1):
        x = sys.A[s] @ x + sys.Bw[s] @ dist.w[s]
    return sys.C[t - 1] @ x + dist.e[t - 1]


def step(sys: SystemPath, t: int, x, u, dist: DisturbanceRealization):
    """One transition: returns ``(x_{t+1}, y_t)``."""
    n, m, _, _ = sys.dims
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not 1 <= t <= sys.T:
        raise ContractViolation(f"time {t} outside [1, {sys.T}]")
    if x.shape != (n,) or u.shape != (m,):
        raise ContractViolation(f"expected x of shape ({n},) and u of shape ({m},), got {x.shape} and {u.shape}")
    i = t - 1
    y = sys.C[i] @ x + dist.e[i]
    x_next = sys.A[i] @ x + sys.B[i] @ u + sys.Bw[i] @ dist.w[i]
    return x_next, y


COST_KINDS = ("quadratic", "linear", "custom-convex")


@dataclass(frozen=True)
class CostSpec:
    """Per-step cost ``c_t(y, u)``.

    Quadratic costs use fixed ``Q`` and ``R``; linear costs use ``alpha``,
    either one ``(p+m,)`` vector or a ``(T, p+m)`` sequence.  Custom costs
    supply ``value_fn(t, y, u)`` and ``grad_fn(t, y, u) -> (gy, gu)``.
    """

    kind: str
    Q: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    value_fn: Optional[Callable] = None
    grad_fn: Optional[Callable] = None
    convex: bool = True
    L: Optional[float] = None
    G: Optional[float] = None

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ConfigurationError(f"unknown cost kind {self.kind!r}")
        if self.kind == "quadratic":
            if self.Q is None or self.R is None:
                raise ConfigurationError("quadratic cost needs Q and R")
            for name in ("Q", "R"):
                mat = getattr(self, name)
                if not np.allclose(mat, mat.T):
                    raise ConfigurationError(f"{name} must be symmetric")
                if np.linalg.eigvalsh(mat).min() < -1e-10:
                    raise ConfigurationError(f"{name} must be positive semidefinite")
        elif self.kind == "linear" and self.alpha is None:
            raise ConfigurationError("linear cost needs alpha")
        elif self.kind == "custom-convex" and self.value_fn is None:
            raise ConfigurationError("custom cost needs value_fn")

    @classmethod
    def quadratic(cls, Q, R) -> "CostSpec":
        return cls("quadratic", Q=np.asarray(Q, dtype=float), R=np.asarray(R, dtype=float))

    @classmethod
    def linear(cls, alpha) -> "CostSpec":
        return cls("linear", alpha=np.asarray(alpha, dtype=float))

    @classmethod
    def random_quadratic(cls, p: int, m: int, seed=None, q_scale: float = 1.0, r_scale: float = 1.0):
        """Random PSD ``Q`` and ``R`` with spectral norms ``q_scale`` and ``r_scale``."""
        rng = _as_rng(seed)

        def psd(d, scale):
            x = rng.standard_normal((d, d))
            mat = x @ x.T
            mat = 0.5 * (mat + mat.T)
            return scale * mat / np.linalg.norm(mat, 2)

        return cls.quadratic(psd(p, q_scale), psd(m, r_scale))

    def _alpha(self, t: int) -> np.ndarray:
        a = self.alpha
        return a if a.ndim == 1 else a[t - 1]

    def value(self, t: int, y, u) -> float:
        if self.kind == "quadratic":
            return float(y @ self.Q @ y + u @ self.R @ u)
        if self.kind == "linear":
            return float(self._alpha(t) @ np.concatenate([y, u]))
        return float(self.value_fn(t, y, u))

    def grad(self, t: int, y, u) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "quadratic":
            return 2.0 * self.Q @ y, 2.0 * self.R @ u
        if self.kind == "linear":
            a = self._alpha(t)
            p = y.shape[0]
            return a[:p].copy(), a[p:].copy()
        if self.grad_fn is None:
            raise UnsupportedCostError("custom cost has no gradient callable")
        gy, gu = self.grad_fn(t, y, u)
        return np.asarray(gy, dtype=float), np.asarray(gu, dtype=float)

    def values(self, Y: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Costs for whole trajectories ``Y (T, p)``, ``U (T, m)``, with ``t = 1..T``."""
        if self.kind == "quadratic":
            return np.einsum("ti,ij,tj->t", Y, self.Q, Y) + np.einsum("ti,ij,tj->t", U, self.R, U)
        if self.kind == "linear":
            Z = np.concatenate([Y, U], axis=1)
            return Z @ self.alpha if self.alpha.ndim == 1 else np.einsum("ti,ti->t", Z, self.alpha[: len(Z)])
        return np.array([self.value(t + 1, Y[t], U[t]) for t in range(len(Y))])

    def grads(self, Y: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "quadratic":
            return 2.0 * Y @ self.Q, 2.0 * U @ self.R
        if self.kind == "linear":
            p = Y.shape[1]
            a = np.broadcast_to(self.alpha, (len(Y), p + U.shape[1])) if self.alpha.ndim == 1 else self.alpha[: len(Y)]
            return a[:, :p].copy(), a[:, p:].copy()
        pairs = [self.grad(t + 1, Y[t], U[t]) for t in range(len(Y))]
        return np.array([g[0] for g in pairs]), np.array([g[1] for g in pairs])

    def lipschitz_constants(self) -> tuple[float, float]:
        """``(L, G)`` of the cost assumptions.

        Quadratic: ``|c(z) - c(z')| <= 2 max(|Q|, |R|) R_z |z - z'|``, so both
        constants equal ``2 max(|Q|_2, |R|_2)``.  Linear: both equal the
        largest ``|alpha_t|``.
        """
        if self.kind == "quadratic":
            c = 2.0 * max(np.linalg.norm(self.Q, 2), np.linalg.norm(self.R, 2))
            return c, c
        if self.kind == "linear":
            c = float(np.max(np.linalg.norm(np.atleast_2d(self.alpha), axis=1)))
            return c, c
        if self.L is None or self.G is None:
            raise UnsupportedCostError("custom cost must declare L and G")
        return float(self.L), float(self.G)

    def at(self, t: int) -> "StepCost":
        return StepCost(self, t)


@dataclass(frozen=True)
class StepCost:
    """The cost function revealed to a controller after it acts at ``t``."""

    spec: CostSpec
    t: int

    def __call__(self, y, u) -> float:
        return self.spec.value(self.t, y, u)

    def grad(self, y, u):
        return self.spec.grad(self.t, y, u)


class Policy(Protocol):
    def act(self, t: int, y: np.ndarray) -> np.ndarray: ...

    def feedback(self, t: int, cost: StepCost, w: np.ndarray) -> None: ...


class _CallablePolicy:
    def __init__(self, fn):
        self.fn = fn

    def act(self, t, y):
        return self.fn(t, y)

    def feedback(self, t, cost, w):
        pass


def zero_policy(m: int) -> _CallablePolicy:
    return _CallablePolicy(lambda t, y: np.zeros(m))


@dataclass
class EpisodeTrace:
    """Per-step record of one episode (row ``t - 1`` holds time ``t``)."""

    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    cost: np.ndarray
    sys: SystemPath
    dist: DisturbanceRealization
    costs: CostSpec
    M: Optional[np.ndarray] = None  # (T, h, m, q)
    G_hat: Optional[np.ndarray] = None  # (T, h, p, m)
    est_err: Optional[np.ndarray] = None  # (T,)
    detections: Optional[np.ndarray] = None  # (T,) bool
    du: Optional[np.ndarray] = None  # (T, m)
    extras: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.cost)

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.cost))


def rollout(
    sys: SystemPath,
    dist: DisturbanceRealization,
    policy,
    costs: CostSpec,
    true_markov: Optional[np.ndarray] = None,
) -> EpisodeTrace:
    """Run ``policy`` on the system for ``T`` steps.

    At step ``t`` the policy sees ``y_t`` through ``act``; only after it
    returns ``u_t`` are ``c_t`` and ``w_t`` delivered through ``feedback``.
    If the policy reports system estimates, the Frobenius estimation error
    against the true Markov blocks is recorded (``true_markov`` may be passed
    to avoid recomputing them).
    """
    if callable(policy) and not hasattr(policy, "act"):
        policy = _CallablePolicy(policy)
    T = sys.T
    n, m, p, q = sys.dims
    xs = np.empty((T, n))
    ys = np.empty((T, p))
    us = np.empty((T, m))
    cs = np.empty(T)
    diags: list[dict] = []
    report = getattr(policy, "diagnostics", None)
    x = sys.initial_state()
    for t in range(1, T + 1):
        i = t - 1
        y = sys.C[i] @ x + dist.e[i]
        u = np.asarray(policy.act(t, y.copy()), dtype=float)
        if u.shape != (m,):
            raise ContractViolation(f"policy returned input of shape {u.shape} at t={t}, expected ({m},)")
        cs[i] = costs.value(t, y, u)
        xs[i], ys[i], us[i] = x, y, u
        policy.feedback(t, costs.at(t), dist.w[i].copy())
        if report is not None:
            diags.append(report())
        x = sys.A[i] @ x + sys.B[i] @ u + sys.Bw[i] @ dist.w[i]

    trace = EpisodeTrace(x=xs, y=ys, u=us, cost=cs, sys=sys, dist=dist, costs=costs)
    if diags:
        _attach_diagnostics(trace, diags, true_markov)
    return trace


def _attach_diagnostics(trace: EpisodeTrace, diags: Sequence[dict], true_markov) -> None:
    T = trace.T
    if all(d.get("M") is not None for d in diags):
        trace.M = np.stack([d["M"] for d in diags])
    if all(d.get("du") is not None for d in diags):
        trace.du = np.stack([d["du"] for d in diags])
    trace.detections = np.array([bool(d.get("detection", False)) for d in diags])
    if all(d.get("G_hat") is not None for d in diags):
        trace.G_hat = np.stack([d["G_hat"] for d in diags])
        h = trace.G_hat.shape[1]
        if true_markov is None or true_markov.shape[1] != h:
            true_markov = markov_sequence(trace.sys, h)
        diff = trace.G_hat - true_markov[:T]
        trace.est_err = np.sqrt(np.sum(diff**2, axis=(1, 2, 3)))
    else:
        trace.est_err = np.full(T, np.nan)
