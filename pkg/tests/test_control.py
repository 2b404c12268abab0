"""Muscle stiffness control, compensation, two-step and latent-space control."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mae import control, net
from mae import model as geo
from mae.control import ControlConfig, ControlError, LatentObjective, MSCParams
from mae.net import MaskCase
from mae.plant import PlantConfig, make_plant

MSC2 = MSCParams(T_bias=30.0, K_stiff=2.0)


def test_msc_at_target_is_bias():
    np.testing.assert_array_equal(control.msc_target_tension(np.ones(4), np.ones(4), MSC2), 30.0)


def test_msc_stretch_arithmetic():
    assert control.msc_target_tension([10.0], [0.0], MSC2)[0] == 30.0 + 20.0


def test_msc_slack_side_stays_at_bias():
    assert control.msc_target_tension([-5.0], [0.0], MSC2)[0] == 30.0


def test_l_comp_arithmetic():
    assert control.l_comp(30.0, MSC2) == 0.0
    assert control.l_comp(30.0 + 2.0 * 7.0, MSC2) == pytest.approx(-7.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 100.0), st.floats(0.1, 50.0), st.floats(0.0, 1000.0), st.floats(-200, 200),
       st.floats(-200, 200))
def test_compensation_round_trip(T_bias, K, extra, l_target, delta):
    msc = MSCParams(T_bias, K)
    T = T_bias + extra
    # a muscle that sits at l_target + delta under command l_target + delta + l_comp(T) pulls with T
    got = control.msc_target_tension(l_target + delta, l_target + delta + control.l_comp(T, msc), msc)
    assert got == pytest.approx(T, rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_msc_never_below_bias(a, b):
    n = min(len(a), len(b))
    assert np.all(control.msc_target_tension(a[:n], b[:n], MSC2) >= MSC2.T_bias)


def test_msc_and_control_config_validation():
    with pytest.raises(ValueError):
        MSCParams(K_stiff=0.0)
    with pytest.raises(ValueError):
        MSCParams(T_bias=-1.0)
    with pytest.raises(ValueError):
        ControlConfig(batch=1)
    with pytest.raises(ValueError):
        ControlConfig(gamma_max=0.0)


def test_two_step_at_bias_is_the_raw_decode(small_net):
    msc = MSCParams()
    theta, T = np.array([0.1, -0.2]), np.full(3, msc.T_bias)
    raw = net.decode_units(small_net, net.encode_case(small_net, MaskCase.CASE1, theta=theta, T=T))[2]
    np.testing.assert_array_equal(control.control_two_step(small_net, theta, T, msc), raw)


def test_jacobian_of_constant_network_is_zero():
    p = net.zero_params(2, 3)
    p.biases[-1][:] = 0.7
    assert np.all(control.muscle_jacobian_mae(p, np.zeros(2), np.full(3, 30.0)) == 0)


def test_jacobian_columns_are_forward_differences(small_net):
    theta, T, h = np.array([0.2, -0.1]), np.full(3, 50.0), 1e-3
    G = control.muscle_jacobian_mae(small_net, theta, T, h)
    base = control.decode_length(small_net, theta, T)
    for d in range(2):
        step = control.decode_length(small_net, theta + h * np.eye(2)[d], T) - base
        np.testing.assert_allclose(G @ (h * np.eye(2)[d]), step, rtol=1e-9, atol=1e-12)


def test_learned_jacobian_matches_geometry(arm, trained):
    rng = np.random.default_rng(0)
    errs = []
    for _ in range(20):
        theta = rng.uniform(*(arm.joint_limits.T * 0.9))
        G = control.muscle_jacobian_mae(trained, theta, np.full(arm.M, 30.0))
        G_true = geo.muscle_jacobian_analytic(arm, theta)
        errs.append(np.linalg.norm(G - G_true) / np.linalg.norm(G_true))
    assert max(errs) < 0.2


def test_antagonists_produce_opposing_torques(arm, trained):
    theta = np.radians([0.0, -45.0, 0.0, -45.0, 0.0])
    G = control.muscle_jacobian_mae(trained, theta, np.full(arm.M, 30.0))
    # muscles 3 and 4 span shoulder pitch from opposite sides; torque is -G^T T
    tau3, tau4 = -G[2, 1], -G[3, 1]
    assert tau3 * tau4 < 0
    G_true = geo.muscle_jacobian_analytic(arm, theta)
    assert np.sign(tau3) == np.sign(-G_true[2, 1])


def test_two_step_reaches_targets_on_nominal_plant(arm, trained):
    plant = make_plant(arm, PlantConfig(max_offset=0.0, elongation_scale=1.0))
    msc = plant.msc
    rng = np.random.default_rng(1)
    errs = []
    for _ in range(20):
        theta = rng.uniform(*arm.joint_limits.T)
        plant.reset(rng.uniform(*arm.joint_limits.T))
        s = plant.step(control.control_two_step(trained, theta, np.full(arm.M, msc.T_bias), msc))
        s = plant.step(control.control_two_step(trained, theta, s.T, msc))
        errs.append(np.linalg.norm(s.theta - theta))
    assert np.mean(errs) < 0.1


# ------------------------------------------------------------- latent search

def min_tension_qp(G, tau):
    """Active-set enumeration of min |T| s.t. tau + G^T T = 0, T >= 0."""
    M = G.shape[0]
    best = None
    for k in range(1, M + 1):
        for S in itertools.combinations(range(M), k):
            A = G[list(S)].T
            T_S = np.linalg.pinv(A) @ (-tau)
            if np.linalg.norm(A @ T_S + tau) > 1e-8 or np.any(T_S < -1e-12):
                continue
            T = np.zeros(M)
            T[list(S)] = T_S
            if best is None or np.linalg.norm(T) < np.linalg.norm(best):
                best = T
    return best


@pytest.mark.parametrize("seed", range(8))
def test_objective_ranks_the_qp_optimum_first(seed):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(2, 5))
    D = int(rng.integers(1, M))
    G = rng.normal(0, 30, size=(M, D))
    tau = -G.T @ rng.uniform(10, 100, size=M)
    T_star = min_tension_qp(G, tau)
    obj = LatentObjective(D, M, w_tension=1.0, tau_target=tau, G=G, w_torque=1.0)

    def value(T):
        y = np.r_[np.zeros(D), T / net.TENSION_SCALE, np.zeros(M)]
        return obj(y)[0]

    assert value(T_star) == pytest.approx(np.linalg.norm(T_star) / net.TENSION_SCALE, abs=1e-9)
    _, _, Vt = np.linalg.svd(G.T)
    null = Vt[D:]  # directions that keep the torque balanced
    for _ in range(20):
        T = T_star + null.T @ rng.normal(0, 20, size=M - D)
        if np.any(T < 0):
            continue
        assert value(T) >= value(T_star) - 1e-12
    T_off = T_star + rng.uniform(1, 5, size=M)
    direct = (np.linalg.norm(T_off) / net.TENSION_SCALE
              + np.linalg.norm(tau + G.T @ T_off) / control.TORQUE_UNIT)
    assert value(T_off) == pytest.approx(direct, rel=1e-12)


def test_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    D, M = 2, 3
    obj = LatentObjective(D, M, w_tension=0.5, theta_ref=rng.normal(size=D), w_theta=1.0,
                          l_ref=rng.normal(0, 20, M), w_length=2.0,
                          tau_target=rng.normal(0, 100, D), G=rng.normal(0, 30, (M, D)), w_torque=0.1)
    y = rng.normal(size=(1, D + 2 * M))
    _, g = obj.value_grad(y)
    h = 1e-6
    fd = np.array([(obj(y + h * e)[0] - obj(y - h * e)[0]) / (2 * h) for e in np.eye(D + 2 * M)])
    np.testing.assert_allclose(g[0], fd, rtol=1e-6, atol=1e-8)


def test_latent_control_trace_never_increases(small_net):
    rng = np.random.default_rng(3)
    for _ in range(20):
        r = control.control_latent(small_net, rng.normal(size=2), rng.uniform(30, 200, 3), rng.normal(0, 100, 2))
        assert np.all(np.diff(r.trace) <= 0)
        assert len(r.trace) == ControlConfig().epochs + 1


def test_latent_control_aborts_on_non_finite_loss(small_net):
    with pytest.raises(ControlError):
        control.control_latent(small_net, np.zeros(2), np.full(3, 30.0), np.array([np.nan, 0.0]))


def test_latent_control_outputs_are_consistent(arm, learned):
    msc = MSCParams()
    theta = np.radians([0.0, -60.0, 0.0, -45.0, 0.0])
    r = control.control_latent(learned, theta, np.full(arm.M, 60.0), -geo.gravity_torque(arm, theta))
    th, T, l = net.decode_units(learned, r.z)
    np.testing.assert_array_equal(T, r.T_calc)
    np.testing.assert_array_equal(th, r.theta_calc)
    np.testing.assert_allclose(r.l_target, l + control.l_comp(T, msc))


def test_latent_control_improves_torque_balance(arm, learned):
    rng = np.random.default_rng(4)
    for _ in range(20):
        theta = rng.uniform(*arm.joint_limits.T)
        T_now = rng.uniform(30, 200, arm.M)
        tau = -geo.gravity_torque(arm, theta)
        r = control.control_latent(learned, theta, T_now, tau)
        G = control.muscle_jacobian_mae(learned, theta, T_now)
        T0 = net.decode_units(learned, net.encode_case(learned, MaskCase.CASE1, theta=theta, T=T_now))[1]
        assert np.linalg.norm(tau + G.T @ r.T_calc) <= np.linalg.norm(tau + G.T @ T0)
