"""Online control loops built from a DAC policy and a system estimator.

Every controller is a :class:`OnlineDacController`; the kinds differ only in
where ``G_hat_t`` comes from, how ``M_t`` evolves and when exploration noise
is added:

=============  =======================  ===========  ===========
kind           estimate                 gains        exploration
=============  =======================  ===========  ===========
olc-fk         true ``G_t`` and ``s_t``  OGD          none
olc-zk         periodic windows          OGD          always
olc-zk-cpd     running fit + CPD         OGD          always
fixed-M        running fit + CPD         frozen       always
random-M       running fit + CPD         redrawn      always
fixed-G        one random draw in G      OGD          always
random-G       redrawn every period      OGD          always
olc-ti         one fit after exploring   OGD after    first phase
=============  =======================  ===========  ===========
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dac import DacParams, TruncatedContext, dac_control, grad_truncated_cost, ogd_step
from .errors import ConfigurationError, ContractViolation
from .estimation import (
    CpdEstimator,
    EstimateTimeline,
    EstimatorConfig,
    ExploreThenCommitEstimator,
    FixedEstimate,
    PeriodicEstimator,
    RandomEstimate,
    estimate_s_hat,
    random_in_G,
)
from .lds import CostSpec, DisturbanceRealization, MarkovOperator, StepCost, SystemPath, markov_sequence, natural_outputs

KINDS = ("olc-fk", "olc-zk", "olc-zk-cpd", "fixed-M", "random-M", "fixed-G", "random-G", "olc-ti")
GRADIENT_KINDS = ("olc-fk", "olc-zk", "olc-zk-cpd", "fixed-G", "random-G", "olc-ti")


@dataclass(frozen=True)
class ControllerSpec:
    """Static description of one controller.

    ``M_init`` is ``zero`` or ``random`` (a draw in the policy class from the
    controller's generator).  ``T_explore`` only matters for ``olc-ti``;
    when unset it defaults to ``ceil(T^(2/3))``.
    """

    kind: str
    eta: float = 0.4
    h: int = 2
    kappa_M: float = 1.0
    estimator: Optional[EstimatorConfig] = None
    setting: str = "S-2"
    seed: int = 0
    M_init: str = "zero"
    T_explore: Optional[int] = None
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown controller kind {self.kind!r}; expected one of {KINDS}")
        if self.eta < 0:
            raise ConfigurationError("eta must be nonnegative")
        if self.h < 1:
            raise ConfigurationError("h must be at least 1")
        if self.kappa_M < 0:
            raise ConfigurationError("kappa_M must be nonnegative")
        if self.M_init not in ("zero", "random"):
            raise ConfigurationError("M_init must be 'zero' or 'random'")
        if self.setting not in ("S-1", "S-2", "general"):
            raise ConfigurationError(f"unknown setting {self.setting!r}")
        if self.kind == "olc-fk" and self.estimator is not None:
            raise ConfigurationError("olc-fk uses the true system and takes no estimator")
        if self.kind != "olc-fk":
            if self.estimator is None:
                raise ConfigurationError(f"{self.kind} needs an estimator configuration")
            if self.estimator.h != self.h:
                raise ConfigurationError("estimator history must equal the controller history")

    @property
    def label(self) -> str:
        return self.name or self.kind


@dataclass
class ControllerState:
    M: DacParams
    w_hist: np.ndarray  # (2h, q): w_{t-1}, ..., w_{t-2h}
    u_hist: np.ndarray  # (h, m): u_{t-1}, ..., u_{t-h}
    du_hist: list = field(default_factory=list)
    timeline: Optional[EstimateTimeline] = None


class _TrueModel:
    """Exact ``G_t`` from the simulator (full-knowledge mode)."""

    def __init__(self, seq: np.ndarray):
        self.seq = seq
        self.detected = False
        self.timeline = None

    def observe(self, t, y):
        return MarkovOperator(self.seq[t - 1], t)

    def record_perturbation(self, t, du):
        pass


class OnlineDacController:
    """DAC policy plus estimator, driven through ``act`` / ``feedback``.

    At step ``t``: ``act`` receives ``y_t``, updates the estimator, forms
    ``G_hat_t`` and ``s_hat_t`` and returns ``u_t = M_t w + du_t``.
    ``feedback`` then receives ``c_t`` and ``w_t``; the gradient of the
    truncated cost (built from the DAC parts only) gives ``M_{t+1}``.
    """

    def __init__(
        self,
        spec: ControllerSpec,
        estimator,
        dims: tuple,
        rng: np.random.Generator,
        *,
        sigma: float = 0.0,
        policy: str = "ogd",
        explore_until: Optional[int] = None,
        true_s: Optional[np.ndarray] = None,
    ):
        n, m, p, q = dims
        self.spec = spec
        self.est = estimator
        self.dims = dims
        self.rng = rng
        self.sigma = float(sigma)
        self.policy = policy
        self.explore_until = explore_until
        self.true_s = true_s
        h = spec.h
        if spec.M_init == "random":
            M1 = DacParams.random(h, m, q, spec.kappa_M, rng)
        else:
            M1 = DacParams.zeros(h, m, q, spec.kappa_M)
        self.state = ControllerState(
            M=M1, w_hist=np.zeros((2 * h, q)), u_hist=np.zeros((h, m)),
            timeline=getattr(estimator, "timeline", None),
        )
        self._G = None
        self._s = None
        self._diag: dict = {}

    def _exploring(self, t: int) -> bool:
        return self.explore_until is not None and t <= self.explore_until

    def act(self, t: int, y) -> np.ndarray:
        st = self.state
        h, (n, m, p, q) = self.spec.h, self.dims
        if self.policy == "random":
            st.M = DacParams.random(h, m, q, self.spec.kappa_M, self.rng)
        G = self.est.observe(t, y)
        if self.true_s is not None:
            s_hat = self.true_s[t - 1]
        else:
            s_hat = estimate_s_hat(self.spec.setting, G, y_t=y, u_hist=st.u_hist, w_hist=st.w_hist)
        if self._exploring(t):
            u_dac = np.zeros(m)
        else:
            u_dac = dac_control(st.M, st.w_hist)
        if self.sigma > 0 and (self.explore_until is None or self._exploring(t)):
            du = self.sigma * self.rng.standard_normal(m)
        else:
            du = np.zeros(m)
        self.est.record_perturbation(t, du)
        u = u_dac + du
        st.u_hist = np.vstack([u[None, :], st.u_hist[:-1]])
        st.du_hist.append(du)
        self._G, self._s = G, s_hat
        self._diag = {
            "M": st.M.blocks.copy(),
            "du": du,
            "G_hat": None if isinstance(self.est, _TrueModel) else G.blocks.copy(),
        }
        return u

    def feedback(self, t: int, cost: StepCost, w) -> None:
        st = self.state
        learn = self.policy == "ogd" and not self._exploring(t) and self.spec.eta > 0
        if learn:
            ctx = TruncatedContext(G=self._G, s_hat=self._s, w_hist=st.w_hist, t=t)
            grad = grad_truncated_cost(st.M, ctx, cost.spec)
            st.M = ogd_step(st.M, grad, self.spec.eta)
        st.w_hist = np.vstack([np.asarray(w, dtype=float)[None, :], st.w_hist[:-1]])
        self._diag["detection"] = bool(self.est.detected)

    def diagnostics(self) -> dict:
        return self._diag


def controller_step(ctrl: OnlineDacController, t: int, y, cost: StepCost, w) -> np.ndarray:
    """One full round: act on ``y_t``, then deliver ``c_t`` and ``w_t``."""
    u = ctrl.act(t, y)
    ctrl.feedback(t, cost, w)
    return u


def default_explore_length(T: int) -> int:
    return int(math.ceil(T ** (2.0 / 3.0) - 1e-9))


def build_controller(
    spec: ControllerSpec,
    sys: SystemPath,
    dist: Optional[DisturbanceRealization] = None,
    rng=None,
    *,
    true_markov: Optional[np.ndarray] = None,
    fixed_G: Optional[MarkovOperator] = None,
    cpd_threshold: Optional[float] = None,
) -> OnlineDacController:
    """Assemble the controller for ``spec`` on ``sys``.

    ``dist`` is needed only by ``olc-fk`` (true natural outputs).
    ``fixed_G`` pins the estimate of ``fixed-G`` instead of drawing it.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    dims = sys.dims
    n, m, p, q = dims
    h = spec.h
    bounds = (sys.kappa_a, sys.kappa_b, sys.gamma)
    cfg = spec.estimator
    if spec.setting == "S-1" and sys.setting != "S-1":
        raise ConfigurationError("controller setting S-1 needs a matched-disturbance system")

    if spec.kind == "olc-fk":
        if dist is None:
            raise ContractViolation("olc-fk needs the disturbance realization")
        seq = true_markov if true_markov is not None and true_markov.shape[1] == h else markov_sequence(sys, h)
        return OnlineDacController(spec, _TrueModel(seq), dims, rng, true_s=natural_outputs(sys, dist))

    sigma = cfg.sigma
    if spec.kind == "olc-zk":
        est = PeriodicEstimator(cfg, p, m, *bounds)
    elif spec.kind in ("olc-zk-cpd", "fixed-M", "random-M"):
        est = CpdEstimator(cfg, p, m, *bounds, threshold=cpd_threshold)
    elif spec.kind == "fixed-G":
        G = fixed_G if fixed_G is not None else random_in_G(h, p, m, *bounds, rng)
        est = FixedEstimate(G)
    elif spec.kind == "random-G":
        est = RandomEstimate(h, p, m, *bounds, period=cfg.t_p, rng=rng)
    else:
        T_explore = spec.T_explore if spec.T_explore is not None else default_explore_length(sys.T)
        est = ExploreThenCommitEstimator(cfg, p, m, *bounds, T_explore=T_explore)
        return OnlineDacController(spec, est, dims, rng, sigma=sigma, explore_until=T_explore)

    policy = {"fixed-M": "fixed", "random-M": "random"}.get(spec.kind, "ogd")
    return OnlineDacController(spec, est, dims, rng, sigma=sigma, policy=policy)


def with_estimator(spec: ControllerSpec, **changes) -> ControllerSpec:
    """Copy of ``spec`` with estimator fields replaced."""
    return replace(spec, estimator=replace(spec.estimator, **changes))
