import numpy as np
import pytest

from tvcontrol import ConfigurationError
from tvcontrol.controllers import ControllerSpec, build_controller, controller_step, default_explore_length
from tvcontrol.estimation import EstimatorConfig, compute_beta, cpd_threshold
from tvcontrol.lds import (
    CostSpec,
    DisturbanceRealization,
    SystemConfig,
    SystemPath,
    generate_disturbances,
    generate_system,
    markov_operator,
    rollout,
)


def est_cfg(h=2, N=7, sigma=0.1, mode="cpd", beta=1.0):
    return EstimatorConfig(N=N, h=h, lam=1.0, sigma=sigma, delta=0.1, mode=mode, beta=beta)


def setup(T=200, seed=0, setting="S-2", schedule="piecewise", n=3, m=2):
    q = n if setting == "S-2" else m
    cfg = SystemConfig(n=n, m=m, p=n, q=q, T=T, gamma=0.3, setting=setting, schedule=schedule,
                       num_changes=1 if schedule != "constant" else 0)
    sys = generate_system(cfg, seed=seed)
    dist = generate_disturbances(T, q, n, seed=seed + 1)
    costs = CostSpec.random_quadratic(n, m, seed=seed + 2, r_scale=0.3)
    return sys, dist, costs


def spec(kind, **kw):
    base = dict(kind=kind, eta=0.1, h=2, kappa_M=1.0)
    if kind != "olc-fk":
        base["estimator"] = est_cfg(mode="periodic" if kind == "olc-zk" else "cpd")
    base.update(kw)
    return ControllerSpec(**base)


ALL_KINDS = ["olc-fk", "olc-zk", "olc-zk-cpd", "fixed-M", "random-M", "fixed-G", "random-G", "olc-ti"]


# ---- full knowledge


def test_fk_no_disturbance_no_input():
    sys, _, costs = setup()
    dist = DisturbanceRealization(np.zeros((sys.T, 3)), np.zeros((sys.T, 3)), 0.0, 0.0)
    ctrl = build_controller(spec("olc-fk"), sys, dist, np.random.default_rng(0))
    trace = rollout(sys, dist, ctrl, costs)
    assert np.all(trace.u == 0)
    assert np.all(trace.M == 0)


def test_fk_zero_step_keeps_gains():
    sys, dist, costs = setup()
    ctrl = build_controller(spec("olc-fk", eta=0.0, M_init="random"), sys, dist, np.random.default_rng(0))
    trace = rollout(sys, dist, ctrl, costs)
    assert np.all(trace.M == trace.M[0]) and np.any(trace.M[0] != 0)


def test_fk_one_step_by_hand():
    # scalar, h = 1: y~_t = s_t + g u_{t-1}, u_t = M w_{t-1}
    T = 4
    a, b, c = 0.3, 0.8, 1.0
    sys = SystemPath(A=np.full((T, 1, 1), a), B=np.full((T, 1, 1), b), Bw=np.ones((T, 1, 1)),
                     C=np.full((T, 1, 1), c), change_times=(), kappa_a=1.0, kappa_b=1.0, gamma=0.7)
    w = np.array([[0.5], [-0.4], [0.9], [0.2]])
    dist = DisturbanceRealization(w, np.zeros((T, 1)), 1.0, 0.0)
    qc, rc, eta = 2.0, 0.5, 0.3
    costs = CostSpec.quadratic([[qc]], [[rc]])
    ctrl = build_controller(spec("olc-fk", h=1, eta=eta, kappa_M=10.0), sys, dist, np.random.default_rng(0))
    trace = rollout(sys, dist, ctrl, costs)

    # natural outputs: s_1 = 0, s_2 = w_1, s_3 = a w_1 + w_2
    s = [0.0, w[0, 0], a * w[0, 0] + w[1, 0]]
    g = c * b
    M = 0.0
    # t = 1: w_0 = 0 so the gradient is zero; t = 2: u_1 = M w_0 = 0, u_2 = M w_1
    for t in (1, 2, 3):
        w1 = w[t - 2, 0] if t >= 2 else 0.0
        w2 = w[t - 3, 0] if t >= 3 else 0.0
        y_tilde = s[t - 1] + g * M * w2
        u = M * w1
        grad = 2 * qc * y_tilde * g * w2 + 2 * rc * u * w1
        M = M - eta * grad
        assert trace.M[t, 0, 0, 0] == pytest.approx(M, rel=1e-12, abs=1e-15)


# ---- zero knowledge


def test_zk_deterministic():
    sys, dist, costs = setup()
    traces = [rollout(sys, dist, build_controller(spec(k), sys, dist, np.random.default_rng(5)), costs)
              for k in ("olc-zk-cpd", "olc-zk-cpd")]
    assert np.array_equal(traces[0].u, traces[1].u)
    assert np.array_equal(traces[0].G_hat, traces[1].G_hat)


def test_zero_policy_class_is_pure_exploration():
    sys, dist, costs = setup()
    for kind in ("olc-zk", "olc-zk-cpd"):
        ctrl = build_controller(spec(kind, kappa_M=0.0), sys, dist, np.random.default_rng(1))
        trace = rollout(sys, dist, ctrl, costs)
        np.testing.assert_array_equal(trace.u, trace.du)


def _no_memory_system(T=150, seed=0):
    rng = np.random.default_rng(seed)
    n, m = 3, 2
    B = rng.standard_normal((n, m))
    B /= np.linalg.norm(B, 2)
    C = rng.standard_normal((n, n))
    C /= np.linalg.norm(C, 2)
    return SystemPath(A=np.zeros((T, n, n)), B=np.tile(B, (T, 1, 1)), Bw=np.tile(np.eye(n), (T, 1, 1)),
                      C=np.tile(C, (T, 1, 1)), change_times=(), kappa_a=1.0, kappa_b=1.0, gamma=0.5)


def test_pinned_true_estimate_matches_full_knowledge():
    # with A = 0 every Markov block beyond the first vanishes, so truncation is exact
    sys = _no_memory_system()
    dist = generate_disturbances(sys.T, 3, 3, seed=3)
    costs = CostSpec.random_quadratic(3, 2, seed=4)
    G = markov_operator(sys, 10, 2)
    fk = rollout(sys, dist, build_controller(spec("olc-fk"), sys, dist, np.random.default_rng(0)), costs)
    pinned = spec("fixed-G", estimator=est_cfg(sigma=0.0))
    zk = rollout(sys, dist, build_controller(pinned, sys, dist, np.random.default_rng(0), fixed_G=G), costs)
    np.testing.assert_allclose(zk.u, fk.u, atol=1e-12)
    np.testing.assert_allclose(zk.cost, fk.cost, atol=1e-12)


def test_pinned_true_estimate_close_with_memory():
    sys, dist, costs = setup(T=300, schedule="constant")
    G = markov_operator(sys, 100, 4)
    fk = rollout(sys, dist, build_controller(spec("olc-fk", h=4), sys, dist, np.random.default_rng(0)), costs)
    pinned = spec("fixed-G", h=4, estimator=est_cfg(h=4, sigma=0.0))
    zk = rollout(sys, dist, build_controller(pinned, sys, dist, np.random.default_rng(0), fixed_G=G), costs)
    # gamma = 0.3 and h = 4: the dropped tail is at most 0.7^4 of the first block
    assert np.max(np.abs(zk.M - fk.M)) < 0.05
    assert abs(zk.total_cost - fk.total_cost) / fk.total_cost < 0.02


def test_cpd_controller_stationary_no_detection():
    sys, dist, costs = setup(T=400, schedule="constant")
    d = dist.kappa_w
    beta = compute_beta(0.1, 1.0, 0.1, 2, 7, n=3, m=2, kappa_a=sys.kappa_a, kappa_b=sys.kappa_b, gamma=sys.gamma,
                        kappa_M=1.0, kappa_w=d, kappa_e=0.0)
    ctrl = build_controller(spec("olc-zk-cpd", estimator=est_cfg(beta=beta)), sys, dist, np.random.default_rng(2))
    trace = rollout(sys, dist, ctrl, costs)
    assert trace.detections.sum() == 0


def test_cpd_detection_holds_estimate():
    sys, dist, costs = setup(T=600)
    ctrl = build_controller(spec("olc-zk-cpd"), sys, dist, np.random.default_rng(3), cpd_threshold=0.3)
    trace = rollout(sys, dist, ctrl, costs)
    times = np.flatnonzero(trace.detections) + 1
    assert len(times) > 0
    for t_d in times:
        # G_hat_t for t in [t_d, t_d + 2h) equals the estimate from t_d - 1
        for t in range(t_d, min(t_d + 4, sys.T + 1)):
            np.testing.assert_array_equal(trace.G_hat[t - 1], trace.G_hat[t_d - 2])


# ---- baselines


def test_fixed_M_zero_without_exploration():
    sys, dist, costs = setup()
    ctrl = build_controller(spec("fixed-M", estimator=est_cfg(sigma=0.0)), sys, dist, np.random.default_rng(0))
    trace = rollout(sys, dist, ctrl, costs)
    assert np.all(trace.u == 0)


def test_random_M_redrawn_each_step():
    sys, dist, costs = setup(T=50)
    trace = rollout(sys, dist, build_controller(spec("random-M"), sys, dist, np.random.default_rng(0)), costs)
    assert all(not np.array_equal(trace.M[i], trace.M[i + 1]) for i in range(49))


def test_random_G_redrawn_each_period():
    sys, dist, costs = setup(T=60)
    trace = rollout(sys, dist, build_controller(spec("random-G"), sys, dist, np.random.default_rng(0)), costs)
    t_p = 9
    changes = [t for t in range(2, 61) if not np.array_equal(trace.G_hat[t - 1], trace.G_hat[t - 2])]
    assert changes == list(range(t_p + 1, 61, t_p))


def test_olc_ti_full_exploration_is_noise_trace():
    sys, dist, costs = setup(T=120)
    ctrl = build_controller(spec("olc-ti", T_explore=120), sys, dist, np.random.default_rng(0))
    trace = rollout(sys, dist, ctrl, costs)
    replay = rollout(sys, dist, lambda t, y: trace.du[t - 1], costs)
    np.testing.assert_array_equal(trace.u, trace.du)
    assert trace.total_cost == replay.total_cost


def test_olc_ti_phases():
    sys, dist, costs = setup(T=200)
    ctrl = build_controller(spec("olc-ti", T_explore=50), sys, dist, np.random.default_rng(0))
    trace = rollout(sys, dist, ctrl, costs)
    assert np.all(trace.du[50:] == 0) and np.all(trace.du[:50] != 0)
    assert np.all(trace.M[:51] == 0)
    assert np.all(trace.G_hat[:50] == 0) and np.any(trace.G_hat[50] != 0)
    assert np.all(trace.G_hat[50:] == trace.G_hat[50])
    assert default_explore_length(1000) == 100


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_gains_stay_in_class(kind):
    sys, dist, costs = setup(T=150)
    ctrl = build_controller(spec(kind, eta=5.0, kappa_M=0.7, M_init="random"), sys, dist, np.random.default_rng(0))
    trace = rollout(sys, dist, ctrl, costs)
    norms = np.linalg.norm(trace.M.reshape(sys.T, 2, -1), axis=2)
    assert norms.max() <= 0.7 + 1e-12


def test_information_discipline():
    sys, dist, costs = setup(T=30)
    ctrl = build_controller(spec("olc-zk-cpd"), sys, dist, np.random.default_rng(0))
    x = sys.initial_state()
    for t in range(1, sys.T + 1):
        y = sys.C[t - 1] @ x
        u = ctrl.act(t, y)
        # the disturbance buffer ends at w_{t-1} while acting
        expected = dist.w[t - 2] if t >= 2 else np.zeros(3)
        np.testing.assert_array_equal(ctrl.state.w_hist[0], expected)
        ctrl.feedback(t, costs.at(t), dist.w[t - 1])
        x = sys.A[t - 1] @ x + sys.B[t - 1] @ u + sys.Bw[t - 1] @ dist.w[t - 1]


def test_controller_step_helper():
    sys, dist, costs = setup(T=5)
    ctrl = build_controller(spec("olc-fk"), sys, dist, np.random.default_rng(0))
    u = controller_step(ctrl, 1, np.zeros(3), costs.at(1), dist.w[0])
    assert u.shape == (2,)


def test_perturbation_variance():
    sys, dist, costs = setup(T=10_000, schedule="constant", n=2, m=2)
    sigma = 0.4
    ctrl = build_controller(spec("fixed-M", estimator=est_cfg(sigma=sigma)), sys, dist, np.random.default_rng(9))
    trace = rollout(sys, dist, ctrl, costs)
    var = trace.du.var(axis=0)
    assert np.all(np.abs(var - sigma**2) <= 0.1 * sigma**2)


# ---- construction checks


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        ControllerSpec(kind="lqr")


def test_estimator_presence_rules():
    with pytest.raises(ConfigurationError):
        ControllerSpec(kind="olc-zk")
    with pytest.raises(ConfigurationError):
        ControllerSpec(kind="olc-fk", estimator=est_cfg())
    with pytest.raises(ConfigurationError):
        ControllerSpec(kind="olc-zk", h=3, estimator=est_cfg(h=2))
