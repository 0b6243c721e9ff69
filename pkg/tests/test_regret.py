import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from tvcontrol import ContractViolation, InsufficientDataError, UnsupportedCostError
from tvcontrol.controllers import ControllerSpec, build_controller
from tvcontrol.dac import DacParams, dac_control
from tvcontrol.estimation import EstimatorConfig
from tvcontrol.lds import (
    CostSpec,
    DisturbanceRealization,
    SystemConfig,
    SystemPath,
    generate_disturbances,
    generate_system,
    rollout,
    zero_policy,
)
from tvcontrol.regret import (
    affine_maps,
    best_dac_in_hindsight,
    counterfactual_rollout,
    fit_scaling_exponent,
    projected_gradient,
    regret_series,
)


def setup(T=80, seed=0, n=2, m=1, kappa_e=0.0):
    cfg = SystemConfig(n=n, m=m, p=n, q=n, T=T, gamma=0.3, setting="S-2", schedule="piecewise", num_changes=1)
    sys = generate_system(cfg, seed=seed)
    dist = generate_disturbances(T, n, n, seed=seed + 1, kappa_e=kappa_e)
    costs = CostSpec.random_quadratic(n, m, seed=seed + 2, r_scale=0.5)
    return sys, dist, costs


class DacPolicy:
    """Independent fixed-gain DAC loop used as a re-simulation oracle."""

    def __init__(self, blocks):
        self.blocks = np.asarray(blocks, dtype=float)
        self.ws = []

    def act(self, t, y):
        h = self.blocks.shape[0]
        u = np.zeros(self.blocks.shape[1])
        for k in range(1, h + 1):
            if t - k >= 1:
                u += self.blocks[k - 1] @ self.ws[t - k - 1]
        return u

    def feedback(self, t, cost, w):
        self.ws.append(w)


# ---- counterfactual costs


def test_counterfactual_zero_gains_is_zero_policy():
    sys, dist, costs = setup()
    ref = rollout(sys, dist, zero_policy(1), costs)
    np.testing.assert_array_equal(counterfactual_rollout(np.zeros((2, 1, 2)), sys, dist, costs), ref.cost)


def test_counterfactual_matches_resimulation():
    sys, dist, costs = setup(kappa_e=0.1)
    M = DacParams.random(3, 1, 2, 0.8, np.random.default_rng(0))
    ref = rollout(sys, dist, DacPolicy(M.blocks), costs)
    np.testing.assert_allclose(counterfactual_rollout(M, sys, dist, costs), ref.cost, rtol=1e-12, atol=1e-14)


def test_fixed_gain_controller_replay_identity():
    sys, dist, costs = setup()
    est = EstimatorConfig(N=5, h=2, sigma=0.0, beta=1.0)
    spec = ControllerSpec(kind="fixed-M", h=2, kappa_M=1.0, estimator=est, M_init="random")
    trace = rollout(sys, dist, build_controller(spec, sys, dist, np.random.default_rng(4)), costs)
    comp = counterfactual_rollout(trace.M[0], sys, dist, costs)
    np.testing.assert_allclose(comp, trace.cost, rtol=1e-12, atol=1e-14)
    assert regret_series(trace, comp).final == pytest.approx(0.0, abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_outputs_affine_in_gains(seed, a, b):
    sys, dist, costs = setup(T=40, seed=seed, kappa_e=0.05)
    rng = np.random.default_rng(seed)
    maps = affine_maps(sys, dist, 2)
    th1, th2 = rng.standard_normal(4), rng.standard_normal(4)
    Y1, U1 = maps.outputs(th1)
    Y2, U2 = maps.outputs(th2)
    Ys, Us = maps.outputs(a * th1 + b * th2)
    Y0, U0 = maps.outputs(np.zeros(4))
    scale = 1 + abs(a) + abs(b)
    np.testing.assert_allclose(Ys - Y0, a * (Y1 - Y0) + b * (Y2 - Y0), atol=1e-10 * scale)
    np.testing.assert_allclose(Us, a * U1 + b * U2, atol=1e-10 * scale)


def test_affine_maps_match_rollout():
    sys, dist, costs = setup(T=60, kappa_e=0.1)
    M = DacParams.random(2, 1, 2, 1.0, np.random.default_rng(1))
    ref = rollout(sys, dist, DacPolicy(M.blocks), costs)
    Y, U = affine_maps(sys, dist, 2).outputs(M.blocks.ravel())
    np.testing.assert_allclose(Y, ref.y, atol=1e-12)
    np.testing.assert_allclose(U, ref.u, atol=1e-12)


# ---- comparator


def test_comparator_against_slsqp():
    sys, dist, costs = setup(T=60)
    h, kM = 2, 0.6
    sol, comp = best_dac_in_hindsight(sys, dist, costs, h, kM, return_info=True)

    def f(theta):
        return counterfactual_rollout(theta.reshape(h, 1, 2), sys, dist, costs).sum()

    cons = [{"type": "ineq", "fun": lambda th, k=k: kM**2 - np.sum(th.reshape(h, -1)[k] ** 2)} for k in range(h)]
    ref = minimize(f, np.zeros(h * 2), method="SLSQP", constraints=cons, options={"ftol": 1e-12, "maxiter": 500})
    assert sol.objective <= ref.fun * (1 + 1e-6)
    assert comp.sum() == pytest.approx(sol.objective, rel=1e-9)


def test_scalar_grid_search():
    for seed in range(5):
        T = 50
        rng = np.random.default_rng(seed)
        a = rng.uniform(-0.6, 0.6, T)
        sys = SystemPath(A=a[:, None, None], B=rng.uniform(0.3, 1, (T, 1, 1)), Bw=np.ones((T, 1, 1)),
                         C=np.ones((T, 1, 1)), change_times=(), kappa_a=1.0, kappa_b=1.0, gamma=0.4)
        dist = generate_disturbances(T, 1, 1, seed=seed)
        costs = CostSpec.quadratic([[1.0]], [[0.2]])
        M_star, comp = best_dac_in_hindsight(sys, dist, costs, 1, 1.5)
        grid = np.linspace(-1.5, 1.5, 3001)
        maps = affine_maps(sys, dist, 1)
        vals = [costs.values(*maps.outputs([g])).sum() for g in grid]
        assert comp.sum() <= min(vals) + 1e-4 * max(1.0, min(vals))


def test_no_disturbance_gives_zero_gains():
    sys, _, costs = setup()
    dist = DisturbanceRealization(np.zeros((sys.T, 2)), np.zeros((sys.T, 2)), 0.0, 0.0)
    M_star, comp = best_dac_in_hindsight(sys, dist, costs, 2, 1.0)
    assert np.all(M_star.blocks == 0)
    assert np.all(comp == 0)


def test_empty_class_gives_zero_gains():
    sys, dist, costs = setup()
    M_star, comp = best_dac_in_hindsight(sys, dist, costs, 2, 0.0)
    assert np.all(M_star.blocks == 0)
    np.testing.assert_allclose(comp, rollout(sys, dist, zero_policy(1), costs).cost)


def test_certificate_and_start_monotonicity():
    sys, dist, costs = setup(T=100, seed=3, m=2)
    sol, comp = best_dac_in_hindsight(sys, dist, costs, 2, 0.5, return_info=True)
    maps = affine_maps(sys, dist, 2)
    g0 = 2 * (np.einsum("tpP,pq,tq->P", maps.Y, costs.Q, maps.y0))
    assert sol.certificate <= 1e-8 * max(1.0, np.linalg.norm(g0)) * 1.0001
    assert all(sol.objective <= f + 1e-9 * abs(f) for f in sol.start_objectives)
    assert sol.M_star.in_class()


def test_boundary_solution_certificate():
    # strong penalty on y with a tiny class puts the optimum on the boundary
    sys, dist, _ = setup(T=80, seed=5)
    costs = CostSpec.quadratic(np.eye(2), [[1e-4]])
    sol, _ = best_dac_in_hindsight(sys, dist, costs, 1, 0.05, return_info=True)
    assert sol.M_star.norm() == pytest.approx(0.05, rel=1e-6)
    assert sol.certificate < 1e-6


def test_projected_gradient_drops_outward_part():
    theta = np.array([1.0, 0.0])
    g = np.array([-2.0, 1.0])  # descent direction points outward along e1
    np.testing.assert_allclose(projected_gradient(theta, g, (1, 1, 2), 1.0), [0.0, 1.0])
    np.testing.assert_allclose(projected_gradient(theta, -g, (1, 1, 2), 1.0), -g)


def test_nonconvex_cost_rejected():
    sys, dist, _ = setup()
    bad = CostSpec("custom-convex", value_fn=lambda t, y, u: -float(y @ y), convex=False)
    with pytest.raises(UnsupportedCostError):
        best_dac_in_hindsight(sys, dist, bad, 2, 1.0)
    nograd = CostSpec("custom-convex", value_fn=lambda t, y, u: float(y @ y))
    with pytest.raises(UnsupportedCostError):
        best_dac_in_hindsight(sys, dist, nograd, 2, 1.0)


def test_linear_cost_comparator():
    sys, dist, _ = setup(T=60)
    costs = CostSpec.linear(np.array([1.0, -0.5, 0.3]))
    M_star, comp = best_dac_in_hindsight(sys, dist, costs, 1, 0.7)
    # linear objective: the optimum sits on the boundary
    assert M_star.norm() == pytest.approx(0.7, rel=1e-6)
    for _ in range(20):
        other = DacParams.random(1, 1, 2, 0.7, np.random.default_rng(_))
        assert comp.sum() <= counterfactual_rollout(other, sys, dist, costs).sum() + 1e-9


# ---- regret series


def test_regret_self_comparison_zero():
    c = np.random.default_rng(0).random(30)
    assert np.all(regret_series(c, c).cumulative == 0)


def test_regret_constant_gap():
    r = regret_series(np.ones(25) * 3.0, np.ones(25) * 2.0)
    np.testing.assert_array_equal(r.cumulative, np.arange(1, 26))
    assert r.final == 25.0


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=50))
def test_regret_telescopes(vals):
    c = np.array(vals)
    r = regret_series(c, np.zeros_like(c))
    np.testing.assert_allclose(np.diff(r.cumulative, prepend=0.0), c, atol=1e-9)


def test_regret_length_mismatch():
    with pytest.raises(ContractViolation):
        regret_series(np.ones(3), np.ones(4))


# ---- scaling fit


def test_fit_square_root_and_linear():
    assert fit_scaling_exponent([(T, 3 * T) for T in (100, 200, 400, 800)]).slope == pytest.approx(1.0)
    fit = fit_scaling_exponent([(T, 2 * T**0.8) for T in (1e3, 2e3, 4e3, 8e3)])
    assert fit.slope == pytest.approx(0.8)
    assert fit.stderr == pytest.approx(0.0, abs=1e-12)


def test_fit_matches_least_squares():
    rng = np.random.default_rng(0)
    T = np.array([500, 1000, 2000, 4000, 8000.0])
    R = T**0.6 * np.exp(rng.normal(0, 0.1, 5))
    X = np.column_stack([np.log(T), np.ones(5)])
    coef = np.linalg.lstsq(X, np.log(R), rcond=None)[0]
    fit = fit_scaling_exponent(list(zip(T, R)))
    assert fit.slope == pytest.approx(coef[0], rel=1e-12)
    assert fit.intercept == pytest.approx(coef[1], rel=1e-12)


def test_fit_drops_nonpositive_with_warning():
    pts = [(100, 10.0), (200, -1.0), (400, 40.0), (800, 80.0), (1600, 0.0)]
    with pytest.warns(UserWarning, match="dropped 2"):
        fit = fit_scaling_exponent(pts)
    assert fit.n_points == 3


def test_fit_needs_three_points():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(InsufficientDataError):
            fit_scaling_exponent([(100, 1.0), (200, 2.0), (400, -1.0)])
    with pytest.raises(InsufficientDataError):
        fit_scaling_exponent([])
