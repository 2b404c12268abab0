"""Synthetic plant: quasi-static equilibrium under muscle stiffness control."""
import numpy as np
import pytest

from mae import model as geo
from mae.control import MSCParams
from mae.experiments import geometric_command
from mae.model import ElongationParams, GeometricModel, LinkSpec, MuscleRoute
from mae.plant import (Plant, PlantConfig, PlantSolverError, SolverSettings, make_plant,
                       sample_initial_data)

MASS, COM_Y, COM_Z = 1.0, 30.0, -100.0
MSC = MSCParams(T_bias=30.0, K_stiff=10.0, T_limit=200.0)


def pendulum(mass=MASS):
    """Roll joint 100 mm under the base with two antagonists 40 mm either side."""
    routes = tuple(MuscleRoute(((0, (0.0, s * 40.0, -60.0)), (1, (0.0, s * 40.0, -60.0)))) for s in (1, -1))
    return GeometricModel([(1, 0, 0)], [(-1.0, 1.0)],
                          (LinkSpec(100.0), LinkSpec(200.0, mass, (0.0, COM_Y, COM_Z))),
                          routes, ElongationParams(0.0, 0.0, 1.0))


def oracle_lengths(theta):
    # child point rotated about x, hand-written; the base point stays fixed
    theta = np.asarray(theta, dtype=float)
    out = []
    for s in (1, -1):
        y, z = s * 40.0, -60.0
        cy = y * np.cos(theta) - z * np.sin(theta)
        cz = -100.0 + y * np.sin(theta) + z * np.cos(theta)
        out.append(np.hypot(cy - y, cz - z))
    return np.stack(out, axis=-1)


def oracle_residual(theta, l_target):
    """Gravity torque minus muscle torque, from closed-form geometry."""
    h = 1e-6
    rel = oracle_lengths(theta) - oracle_lengths(0.0)
    dl = (oracle_lengths(theta + h) - oracle_lengths(theta - h)) / (2 * h)
    T = MSC.T_bias + np.maximum(0.0, MSC.K_stiff * (rel - l_target))
    # com height is -100 + COM_Y sin(theta) + COM_Z cos(theta)
    tau_g = -MASS * geo.GRAVITY * (COM_Y * np.cos(theta) - COM_Z * np.sin(theta))
    return tau_g - np.sum(T * dl, axis=-1)


@pytest.mark.parametrize("l_target", [(-3.0, 2.0), (1.0, -4.0), (0.0, 0.0), (-8.0, -8.0)])
def test_one_dof_equilibrium_matches_grid_search(l_target):
    l_target = np.array(l_target)
    plant = Plant(pendulum(), PlantConfig(friction_torque=0.0), MSC)
    theta = plant.step(l_target).theta[0]
    grid = np.linspace(-1.0, 1.0, 20001)
    best = grid[np.argmin(oracle_residual(grid, l_target) ** 2)]
    fine = np.linspace(best - 2e-4, best + 2e-4, 4001)
    best = fine[np.argmin(oracle_residual(fine, l_target) ** 2)]
    assert abs(theta - best) < 1e-3


def test_symmetric_pair_holds_posture_at_bias_tension():
    plant = Plant(pendulum(mass=0.0), PlantConfig(friction_torque=0.0), MSC)
    plant.reset()
    state = plant.step(plant.state.l.copy())
    assert state.theta[0] == 0.0
    np.testing.assert_allclose(state.T, MSC.T_bias)


@pytest.fixture(scope="module")
def true_plant(arm):
    return make_plant(arm)


def test_step_is_idempotent_at_equilibrium(arm, true_plant):
    rng = np.random.default_rng(0)
    for _ in range(5):
        theta = rng.uniform(*arm.joint_limits.T)
        cmd = geometric_command(arm, theta, rng.uniform(30, 200, size=arm.M), true_plant.msc)
        first = true_plant.step(cmd).theta.copy()
        again = true_plant.step(cmd).theta
        assert np.max(np.abs(again - first)) < 1e-6


def test_postconditions_on_random_commands(arm, true_plant):
    rng = np.random.default_rng(1)
    lo, hi = arm.joint_limits.T
    for _ in range(10):
        cmd = geometric_command(arm, rng.uniform(lo, hi), rng.uniform(30, 200, size=arm.M), true_plant.msc)
        cmd = cmd + rng.normal(0.0, 5.0, size=arm.M)
        s = true_plant.step(cmd)
        assert np.all(s.T >= 0)
        assert np.all(s.theta >= lo) and np.all(s.theta <= hi)
        assert s.equilibrium_residual <= true_plant.settings.tol
        free = (s.theta > lo) & (s.theta < hi)  # a joint on its stop is held by the stop
        tau = true_plant._evaluate(s.theta, cmd)[3]
        assert np.all(np.abs(tau[free]) <= true_plant.friction[free] + 1e-3)


def test_disabled_muscle_carries_no_tension(arm):
    plant = make_plant(arm, PlantConfig(disabled_muscles={1}))
    s = plant.reset(np.zeros(arm.D))
    assert s.T[1] == 0.0
    assert np.all(np.delete(s.T, 1) >= plant.msc.T_bias - 1e-9)


def test_end_load_changes_the_equilibrium(arm):
    plant = make_plant(arm)
    theta = np.radians([0, -60, 0, -45, 0])
    cmd = geometric_command(arm, theta, np.full(arm.M, 30.0), plant.msc)
    free = plant.reset(theta, cmd)
    plant.set_end_load(3.6)
    loaded = plant.step(cmd)
    assert np.linalg.norm(loaded.T) > np.linalg.norm(free.T) + 10.0


def test_solver_failure_reports_residual(arm):
    plant = make_plant(arm, settings=SolverSettings(tol=1e-12, max_iter=0, fallback_iter=0))
    cmd = geometric_command(arm, np.radians([0, -90, 0, -60, 0]), np.full(arm.M, 100.0), plant.msc)
    with pytest.raises(PlantSolverError) as info:
        plant.step(cmd)
    assert info.value.residual > 0


def test_non_finite_command_is_rejected(true_plant, arm):
    with pytest.raises(ValueError):
        true_plant.step(np.full(arm.M, np.nan))


def test_initial_data_satisfies_its_definition(arm):
    rng = np.random.default_rng(2)
    theta, T, l = sample_initial_data(arm, 500, rng)
    l_abs = geo.muscle_length_abs(arm, theta)
    expected = geo.muscle_length_rel(arm, theta) - geo.elongation(arm.elongation, l_abs, T)
    np.testing.assert_allclose(l, expected, atol=1e-9)
    assert T.min() >= 0.0 and T.max() <= 500.0


def test_initial_data_covers_joint_ranges(arm):
    theta, _, _ = sample_initial_data(arm, 10000, np.random.default_rng(3))
    lo, hi = arm.joint_limits.T
    coverage = (theta.max(axis=0) - theta.min(axis=0)) / (hi - lo)
    assert np.all(coverage >= 0.95)


def test_zero_sample_is_the_zero_triple(arm):
    l_abs = geo.muscle_length_abs(arm, np.zeros(arm.D))
    l = geo.muscle_length_rel(arm, np.zeros(arm.D)) - geo.elongation(arm.elongation, l_abs, np.zeros(arm.M))
    assert np.all(l == 0.0)


def test_initial_data_needs_positive_count(arm):
    with pytest.raises(ValueError):
        sample_initial_data(arm, 0, np.random.default_rng(0))
