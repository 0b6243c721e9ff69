"""Experiment configuration, multi-seed orchestration and CSV export.

Seeding: episode ``i`` uses ``seed = base_seed + i``.  Independent streams are
split off with ``np.random.default_rng([seed, stream])``: stream 0 draws the
system, stream 1 the disturbances and stream ``100 + j`` drives controller
``j``.  The cost matrices are shared by all episodes and come from
``default_rng([base_seed, 2])``.  Adding episodes therefore never changes
earlier ones.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .controllers import ControllerSpec, build_controller
from .dac import compute_oco_constants, theory_history, theory_step_size
from .errors import ConfigurationError
from .estimation import EstimatorConfig, compute_beta, cpd_threshold, theoretical_scalings
from .lds import CostSpec, SystemConfig, generate_disturbances, generate_system, markov_sequence, rollout
from .regret import best_dac_in_hindsight, fit_scaling_exponent, regret_series

OUT_DIR_ENV = "TVCONTROL_OUT_DIR"
CONTROLLER_HEADER = "t,regret_mean,regret_std,cost_mean,est_err_mean,detections_mean"
SUMMARY_HEADER = "controller,T,final_regret_mean,final_regret_std,scaling_slope"

Theory = Literal["theory"]


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemModel(_Model):
    n: int = Field(3, ge=1)
    m: int = Field(2, ge=1)
    p: int = Field(3, ge=1)
    q: int = Field(3, ge=1)
    gamma: float = Field(0.5, gt=0, lt=1)
    kappa_b: float = Field(1.0, gt=0)
    c_norm: float = Field(1.0, gt=0)
    setting: Literal["general", "S-1", "S-2"] = "S-2"
    schedule: Literal["constant", "piecewise", "per_step"] = "piecewise"
    change_fractions: list[float] = Field(default_factory=list)
    num_changes: int = Field(0, ge=0)
    jitter: float = Field(0.0, ge=0)

    @field_validator("change_fractions")
    @classmethod
    def _fractions(cls, v):
        if any(not 0 < f < 1 for f in v) or sorted(set(v)) != list(v):
            raise ValueError("change fractions must be strictly increasing within (0, 1)")
        return v

    def to_config(self, T: int) -> SystemConfig:
        times = tuple(sorted({max(2, int(round(f * T)) + 1) for f in self.change_fractions}))
        return SystemConfig(
            n=self.n, m=self.m, p=self.p, q=self.q, T=T, gamma=self.gamma, kappa_b=self.kappa_b,
            c_norm=self.c_norm, setting=self.setting, schedule=self.schedule,
            change_times=times, num_changes=self.num_changes, jitter=self.jitter,
        )

    @property
    def kappa_a(self) -> float:
        return 1.0 if self.setting == "S-1" else self.c_norm


class DisturbanceModel(_Model):
    kind: Literal["uniform", "sinusoidal", "constant", "zero"] = "uniform"
    kappa_w: float = Field(1.0, ge=0)
    kappa_e: float = Field(0.0, ge=0)
    frequency: float = 0.05


class CostModel(_Model):
    kind: Literal["quadratic"] = "quadratic"
    q_scale: float = Field(1.0, ge=0)
    r_scale: float = Field(1.0, ge=0)
    Q: Optional[list[list[float]]] = None
    R: Optional[list[list[float]]] = None

    def build(self, p: int, m: int, seed) -> CostSpec:
        if self.Q is not None and self.R is not None:
            return CostSpec.quadratic(self.Q, self.R)
        return CostSpec.random_quadratic(p, m, seed=seed, q_scale=self.q_scale, r_scale=self.r_scale)


class ControllerModel(_Model):
    kind: Literal["olc-fk", "olc-zk", "olc-zk-cpd", "fixed-M", "random-M", "fixed-G", "random-G", "olc-ti"]
    name: Optional[str] = None
    eta: Union[float, Theory, None] = None
    h: Union[int, Theory, None] = None
    kappa_M: float = Field(1.0, ge=0)
    N: Union[int, Theory, None] = None
    sigma: Union[float, Theory, None] = None
    lam: float = Field(1.0, gt=0)
    delta: Union[float, Theory, None] = None
    beta: Union[float, Theory, None] = None
    M_init: Literal["zero", "random"] = "zero"
    T_explore: Optional[int] = Field(None, ge=0)

    @property
    def label(self) -> str:
        return self.name or self.kind


class ComparatorModel(_Model):
    h: Optional[int] = Field(None, ge=1)
    kappa_M: Optional[float] = Field(None, ge=0)
    tol: float = Field(1e-8, gt=0)
    max_iter: int = Field(10_000, ge=1)
    starts: int = Field(5, ge=1)
    seed: int = 0


class ExperimentConfig(_Model):
    mode: Literal["experiments", "theory"] = "experiments"
    T: int = Field(2000, ge=2)
    horizons: list[int] = Field(default_factory=list)
    runs: int = Field(10, ge=1)
    base_seed: int = 0
    out_dir: Optional[str] = None
    workers: int = Field(1, ge=1)
    Gamma: Optional[float] = Field(None, ge=1)
    system: SystemModel = Field(default_factory=SystemModel)
    disturbance: DisturbanceModel = Field(default_factory=DisturbanceModel)
    cost: CostModel = Field(default_factory=CostModel)
    controllers: list[ControllerModel] = Field(min_length=1)
    comparator: ComparatorModel = Field(default_factory=ComparatorModel)

    @field_validator("horizons")
    @classmethod
    def _horizons(cls, v):
        if any(T < 2 for T in v):
            raise ValueError("every horizon must be at least 2")
        return v

    @model_validator(mode="after")
    def _consistency(self):
        names = [c.label for c in self.controllers]
        if len(set(names)) != len(names):
            raise ValueError(f"controller names must be unique, got {names}")
        s = self.system
        if s.setting == "S-1" and (s.p != s.n or s.q != s.m):
            raise ValueError("setting S-1 needs p == n and q == m")
        if s.setting == "S-2" and s.q != s.n:
            raise ValueError("setting S-2 needs q == n")
        if self.mode == "experiments":
            for c in self.controllers:
                if "theory" in (c.eta, c.h, c.N, c.sigma, c.delta, c.beta):
                    raise ValueError(f"controller {c.label}: 'theory' values need mode 'theory'")
        return self


def load_config(path) -> ExperimentConfig:
    """Parse a JSON config; missing files raise ``FileNotFoundError`` naming the path."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return ExperimentConfig.model_validate_json(path.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    return cfg.model_dump_json(indent=2)


def default_config_path(name: str = "default.json") -> Path:
    return Path(__file__).parent / "configs" / name


# ---------------------------------------------------------------- resolution


@dataclass(frozen=True)
class ResolvedController:
    spec: ControllerSpec
    threshold: Optional[float]
    constants: dict


def _gamma_T(cfg: ExperimentConfig, T: int) -> float:
    if cfg.Gamma is not None:
        return float(cfg.Gamma)
    return float(max(1, len(cfg.system.to_config(T).regime_starts())))


def resolve_controller(c: ControllerModel, cfg: ExperimentConfig, T: int, costs: CostSpec) -> ResolvedController:
    """Turn a controller entry into concrete parameters for horizon ``T``.

    Experiments mode defaults: ``eta=0.4, N=7, h=2, sigma=0.3, delta=0.1``.
    Theory mode defaults every open value to its theoretical setting.
    """
    s, d = cfg.system, cfg.disturbance
    theory = cfg.mode == "theory"

    def pick(value, default):
        if value is None:
            return "theory" if theory else default
        return value

    h = pick(c.h, 2)
    if h == "theory":
        h = theory_history(T, s.gamma)
    Gamma = _gamma_T(cfg, T)
    N_th, sigma_th = theoretical_scalings(Gamma, T, h)
    N = pick(c.N, 7)
    N = N_th if N == "theory" else int(N)
    sigma = pick(c.sigma, 0.3)
    sigma = sigma_th if sigma == "theory" else float(sigma)
    delta = pick(c.delta, 0.1)
    delta = 1.0 / T if delta == "theory" else float(delta)

    L, G = costs.lipschitz_constants()
    consts = compute_oco_constants(L, G, s.kappa_a, s.kappa_b, d.kappa_w, d.kappa_e, c.kappa_M, h, s.gamma, s.n, s.m)
    eta = pick(c.eta, 0.4)
    eta = theory_step_size(consts, h, T) if eta == "theory" else float(eta)
    beta = c.beta if c.beta is not None else ("theory" if theory else None)
    if beta == "theory":
        beta = compute_beta(
            delta, c.lam, sigma, h, N, n=s.n, m=s.m, kappa_a=s.kappa_a, kappa_b=s.kappa_b,
            gamma=s.gamma, kappa_M=c.kappa_M, kappa_w=d.kappa_w, kappa_e=d.kappa_e,
        )
    needs_beta = c.kind in ("olc-zk-cpd", "fixed-M", "random-M")
    if needs_beta and beta is None:
        raise ConfigurationError(f"controller {c.label} needs beta (a number, or 'theory' in theory mode)")
    estimator = None
    threshold = None
    if c.kind != "olc-fk":
        mode = "periodic" if c.kind == "olc-zk" else "cpd"
        estimator = EstimatorConfig(N=N, h=h, lam=c.lam, sigma=sigma, delta=min(delta, 1.0), mode=mode,
                                    beta=None if beta is None else float(beta))
        if beta is not None and sigma > 0:
            threshold = cpd_threshold(float(beta), sigma, N)
    setting = "S-1" if s.setting == "S-1" else "S-2"
    spec = ControllerSpec(
        kind=c.kind, eta=eta, h=h, kappa_M=c.kappa_M, estimator=estimator, setting=setting,
        M_init=c.M_init, T_explore=c.T_explore, name=c.label,
    )
    constants = {
        "eta": eta, "h": h, "N": N, "sigma": sigma if c.kind != "olc-fk" else 0.0, "delta": delta,
        "lam": c.lam, "beta": beta, "cpd_threshold": threshold, "kappa_M": c.kappa_M,
        "L_f": consts.L_f, "G_f": consts.G_f, "D": consts.D, "D_tilde": consts.D_tilde,
    }
    return ResolvedController(spec, threshold, constants)


# ---------------------------------------------------------------- execution


@dataclass
class EpisodeResult:
    seed: int
    fingerprint: str
    change_times: tuple
    regret: dict  # name -> (T,)
    cost: dict
    est_err: dict
    detections: dict  # cumulative counts
    comparator_objective: float


def _shared_cost(cfg: ExperimentConfig) -> CostSpec:
    return cfg.cost.build(cfg.system.p, cfg.system.m, np.random.default_rng([cfg.base_seed, 2]))


def _comparator_params(cfg: ExperimentConfig, resolved: list[ResolvedController]) -> tuple[int, float]:
    first = resolved[0].spec
    h = cfg.comparator.h or first.h
    kappa = cfg.comparator.kappa_M if cfg.comparator.kappa_M is not None else first.kappa_M
    return h, kappa


def run_episode(cfg: ExperimentConfig, T: int, index: int) -> EpisodeResult:
    """Generate one system/disturbance pair and roll out every controller on it."""
    seed = cfg.base_seed + index
    costs = _shared_cost(cfg)
    resolved = [resolve_controller(c, cfg, T, costs) for c in cfg.controllers]
    sys = generate_system(cfg.system.to_config(T), seed=np.random.default_rng([seed, 0]))
    s = cfg.system
    d = cfg.disturbance
    dist = generate_disturbances(T, s.q, s.p, seed=np.random.default_rng([seed, 1]), kind=d.kind,
                                 kappa_w=d.kappa_w, kappa_e=d.kappa_e, frequency=d.frequency)
    h_c, kappa_c = _comparator_params(cfg, resolved)
    comp = cfg.comparator
    sol, comp_costs = best_dac_in_hindsight(sys, dist, costs, h_c, kappa_c, tol=comp.tol, max_iter=comp.max_iter,
                                            starts=comp.starts, seed=comp.seed, return_info=True)
    markov_cache: dict = {}
    out = EpisodeResult(seed, sys.fingerprint(), sys.change_times, {}, {}, {}, {}, sol.objective)
    for j, r in enumerate(resolved):
        name = r.spec.label
        try:
            h = r.spec.h
            if h not in markov_cache:
                markov_cache[h] = markov_sequence(sys, h)
            rng = np.random.default_rng([seed, 100 + j])
            ctrl = build_controller(r.spec, sys, dist, rng, true_markov=markov_cache[h], cpd_threshold=r.threshold)
            trace = rollout(sys, dist, ctrl, costs, true_markov=markov_cache[h])
        except Exception as exc:
            raise RuntimeError(f"episode failed (seed={seed}, controller={name}): {exc}") from exc
        rs = regret_series(trace, comp_costs, sol.M_star)
        out.regret[name] = rs.cumulative
        out.cost[name] = trace.cost
        out.est_err[name] = trace.est_err
        out.detections[name] = np.cumsum(trace.detections).astype(float)
    return out


@dataclass
class ControllerAggregate:
    regret_mean: np.ndarray
    regret_std: np.ndarray
    cost_mean: np.ndarray
    est_err_mean: np.ndarray
    detections_mean: np.ndarray
    final_regrets: np.ndarray
    costs: np.ndarray  # (runs, T) per-step costs


@dataclass
class AggregateResult:
    T: int
    runs: int
    controllers: dict  # name -> ControllerAggregate
    fingerprints: dict  # name -> list of system hashes per episode
    change_times: list
    metadata: dict
    scaling: dict = field(default_factory=dict)  # name -> ScalingFit


@dataclass
class SweepResult:
    results: list  # AggregateResult per horizon
    scaling: dict  # name -> ScalingFit or None
    metadata: dict


def _std(x: np.ndarray) -> np.ndarray:
    if x.shape[0] < 2:
        return np.zeros(x.shape[1:])
    return np.std(x, axis=0, ddof=1)


def aggregate(episodes: list[EpisodeResult], T: int, metadata: dict) -> AggregateResult:
    names = list(episodes[0].regret)
    ctrls = {}
    for name in names:
        R = np.stack([e.regret[name] for e in episodes])
        C = np.stack([e.cost[name] for e in episodes])
        E = np.stack([e.est_err[name] for e in episodes])
        D = np.stack([e.detections[name] for e in episodes])
        ctrls[name] = ControllerAggregate(
            regret_mean=R.mean(axis=0), regret_std=_std(R), cost_mean=C.mean(axis=0),
            est_err_mean=E.mean(axis=0), detections_mean=D.mean(axis=0), final_regrets=R[:, -1].copy(), costs=C,
        )
    prints = {name: [e.fingerprint for e in episodes] for name in names}
    return AggregateResult(T, len(episodes), ctrls, prints, [list(e.change_times) for e in episodes], metadata)


def _episode_job(args):
    cfg_json, T, i = args
    return run_episode(ExperimentConfig.model_validate_json(cfg_json), T, i)


def run_experiment(cfg: ExperimentConfig, T: Optional[int] = None) -> AggregateResult:
    T = cfg.T if T is None else T
    if cfg.workers > 1 and cfg.runs > 1:
        payload = cfg.model_dump_json()
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            episodes = list(pool.map(_episode_job, [(payload, T, i) for i in range(cfg.runs)]))
    else:
        episodes = [run_episode(cfg, T, i) for i in range(cfg.runs)]
    return aggregate(episodes, T, experiment_metadata(cfg, T))


def sweep(cfg: ExperimentConfig, horizons: Optional[list[int]] = None) -> SweepResult:
    """Run every horizon and fit ``log mean R_T`` against ``log T`` per controller."""
    horizons = list(horizons if horizons is not None else cfg.horizons)
    results = [run_experiment(cfg, T) for T in horizons]
    scaling = {}
    for c in cfg.controllers:
        pts = [(r.T, float(r.controllers[c.label].regret_mean[-1])) for r in results]
        try:
            scaling[c.label] = fit_scaling_exponent(pts) if len(pts) >= 3 else None
        except ValueError:
            scaling[c.label] = None
    for r in results:
        r.scaling = scaling
    meta = {"config": json.loads(dump_config(cfg)), "horizons": horizons,
            "scaling": {k: (None if v is None else {"slope": v.slope, "stderr": v.stderr, "intercept": v.intercept})
                        for k, v in scaling.items()}}
    return SweepResult(results, scaling, meta)


def experiment_metadata(cfg: ExperimentConfig, T: int) -> dict:
    """Constants echoed next to the CSVs (no timestamps, so reruns are byte-identical)."""
    costs = _shared_cost(cfg)
    L, G = costs.lipschitz_constants()
    s, d = cfg.system, cfg.disturbance
    resolved = [resolve_controller(c, cfg, T, costs) for c in cfg.controllers]
    h_c, kappa_c = _comparator_params(cfg, resolved)
    return {
        "config": json.loads(dump_config(cfg)),
        "T": T,
        "Gamma_T": _gamma_T(cfg, T),
        "constants": {"kappa_a": s.kappa_a, "kappa_b": s.kappa_b, "gamma": s.gamma, "kappa_w": d.kappa_w,
                      "kappa_e": d.kappa_e, "L": L, "G": G},
        "comparator": {"h": h_c, "kappa_M": kappa_c},
        "controllers": {r.spec.label: {"kind": r.spec.kind, **r.constants} for r in resolved},
        "seeds": [cfg.base_seed + i for i in range(cfg.runs)],
    }


# ---------------------------------------------------------------- export


def _fmt(x) -> str:
    return "{:.9g}".format(float(x))


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc


def _controller_csv(agg: ControllerAggregate) -> str:
    lines = [CONTROLLER_HEADER]
    cols = (agg.regret_mean, agg.regret_std, agg.cost_mean, agg.est_err_mean, agg.detections_mean)
    for i in range(len(agg.regret_mean)):
        lines.append(",".join([str(i + 1)] + [_fmt(c[i]) for c in cols]))
    return "\n".join(lines) + "\n"


def _summary_rows(result: AggregateResult) -> list[str]:
    rows = []
    for name, agg in result.controllers.items():
        fit = result.scaling.get(name)
        slope = fit.slope if fit is not None else float("nan")
        std = float(np.std(agg.final_regrets, ddof=1)) if result.runs > 1 else 0.0
        rows.append(",".join([name, str(result.T), _fmt(np.mean(agg.final_regrets)), _fmt(std), _fmt(slope)]))
    return rows


def export_csv(result, path) -> list[Path]:
    """Write per-controller series, ``summary.csv`` and ``metadata.json`` under ``path``.

    ``result`` is an :class:`AggregateResult`, a :class:`SweepResult` (files
    are suffixed with ``_T<horizon>``) or ``None`` for an empty sweep.
    """
    out = Path(path)
    written = []
    if result is None:
        results, meta, suffix = [], {}, False
    elif isinstance(result, SweepResult):
        results, meta, suffix = result.results, result.metadata, True
    else:
        results, meta, suffix = [result], result.metadata, False
    summary = [SUMMARY_HEADER]
    for r in results:
        for name, agg in r.controllers.items():
            f = out / (f"{name}_T{r.T}.csv" if suffix else f"{name}.csv")
            _write(f, _controller_csv(agg))
            written.append(f)
        summary.extend(_summary_rows(r))
    f = out / "summary.csv"
    _write(f, "\n".join(summary) + "\n")
    written.append(f)
    f = out / "metadata.json"
    _write(f, json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    written.append(f)
    return written


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and math.isnan(obj):
        return None
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def read_series_csv(path) -> dict:
    """Parse a per-controller CSV back into arrays keyed by column."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    return {name: np.atleast_1d(data[name]) for name in data.dtype.names}


def resolve_out_dir(cli_out: Optional[str], cfg: Optional[ExperimentConfig]) -> Path:
    """``--out`` wins over the environment variable, which wins over the config."""
    if cli_out:
        return Path(cli_out)
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        return Path(env)
    if cfg is not None and cfg.out_dir:
        return Path(cfg.out_dir)
    return Path("results")
