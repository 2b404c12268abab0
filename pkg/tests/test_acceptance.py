"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a single ``criterion N: PASS|FAIL ...`` line before it
asserts, so ``pytest -v`` output doubles as the acceptance report.  The
trained networks and experiment metrics come from the session pipeline
(see conftest).
"""
import time

import numpy as np
import pytest

from mae import control, net, simulation as sim
from mae import model as geo
from mae.experiments import geometric_command
from mae.net import MASK_CASES
from mae.plant import Plant, PlantConfig, make_plant
from test_harness import SMALL, comparable, run_all
from test_plant import MSC, oracle_residual, pendulum


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return report


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def random_network(rng, D=None, M=None):
    D = D or int(rng.integers(1, 6))
    M = M or int(rng.integers(1, 11))
    p = net.init_params(D, M, rng)
    for b in p.biases:
        b[:] = rng.normal(0, 0.1, size=b.shape)
    return p


def gradient_errors(rng):
    """Worst relative error of parameter and latent gradients on one network."""
    p = random_network(rng)
    D, M = p.D, p.M
    x = net.build_input(rng.normal(size=D), rng.uniform(0, 400, M), rng.normal(0, 50, M),
                        MASK_CASES[int(rng.integers(3))])
    c = rng.normal(size=D + 2 * M)

    def loss(y):
        return float(c @ y + 0.5 * y @ y)

    _, y, cache = net.forward(p, x)
    grads = net.backward_params(p, cache, c + y)
    arrays = p.arrays()
    h = 1e-5
    analytic, numeric = [], []
    for _ in range(30):
        k = int(rng.integers(len(arrays)))
        idx = tuple(int(rng.integers(s)) for s in arrays[k].shape)
        old = arrays[k][idx]
        arrays[k][idx] = old + h
        up = loss(net.forward(p, x)[1])
        arrays[k][idx] = old - h
        down = loss(net.forward(p, x)[1])
        arrays[k][idx] = old
        analytic.append(grads[k][idx])
        numeric.append((up - down) / (2 * h))
    z = rng.normal(size=D + M)
    g = net.grad_wrt_latent(p, z, c + net.decode(p, z))
    fd = np.array([(loss(net.decode(p, z + h * e)) - loss(net.decode(p, z - h * e))) / (2 * h) for e in np.eye(D + M)])
    return max(rel_err(np.array(analytic), np.array(numeric)), rel_err(g, fd))


def test_criterion_1_gradient_integrity(verdict):
    rng = np.random.default_rng(100)
    start = time.perf_counter()
    errs = [gradient_errors(rng) for _ in range(25)]
    wall = time.perf_counter() - start
    verdict(1, max(errs) < 1e-5 and wall < 10.0,
            f"25 networks, worst rel err {max(errs):.2e} (< 1e-5), {wall:.1f} s (< 10 s)")


def test_criterion_2_plant_equilibrium(arm, verdict):
    plant = make_plant(arm)
    rng = np.random.default_rng(200)
    lo, hi = arm.joint_limits.T
    worst = -np.inf
    for k in range(1000):
        if k % 100 == 0:
            plant.reset(rng.uniform(lo, hi))
        cmd = geometric_command(arm, rng.uniform(lo, hi), rng.uniform(0, 300, arm.M), plant.msc)
        cmd = cmd + rng.normal(0.0, 5.0, arm.M)
        s = plant.step(cmd)
        tau = plant._evaluate(s.theta, cmd)[3]
        free = (s.theta > lo) & (s.theta < hi)  # a joint on its stop is held by the stop
        worst = max(worst, float(np.max(np.abs(tau[free]) - plant.friction[free], initial=-np.inf)))
    grid_errs = []
    for l_target in [(-3.0, 2.0), (1.0, -4.0), (0.0, 0.0), (-8.0, -8.0), (5.0, -1.0)]:
        l_target = np.array(l_target)
        theta = Plant(pendulum(), PlantConfig(friction_torque=0.0), MSC).step(l_target).theta[0]
        grid = np.linspace(-1.0, 1.0, 20001)
        best = grid[np.argmin(oracle_residual(grid, l_target) ** 2)]
        fine = np.linspace(best - 2e-4, best + 2e-4, 4001)
        best = fine[np.argmin(oracle_residual(fine, l_target) ** 2)]
        grid_errs.append(abs(theta - best))
    verdict(2, worst <= 1e-3 and max(grid_errs) < 1e-3,
            f"1000 steps, worst |tau| - friction {worst:.2e} N*mm (<= 1e-3); "
            f"1-DOF grid gap {max(grid_errs):.2e} rad (< 1e-3)")


def test_criterion_3_initial_training(pipeline, verdict):
    m = pipeline.stage("init_train")
    wall = pipeline.timing("init_train")["wall_s"]
    err = m["holdout_case2_theta_err_rad"]
    verdict(3, err < 0.05 and wall < 300.0, f"held-out CASE2 error {err:.4f} rad (< 0.05), {wall:.0f} s (< 300 s)")


def test_criterion_4_online_learning(pipeline, verdict):
    m = pipeline.stage("online_learn")
    wall = pipeline.timing("online_learn")["wall_s"]
    ratio = m["probe_ratio"]
    verdict(4, ratio <= 0.6 and wall < 600.0,
            f"error {m['probe_theta_err_pre_rad']:.3f} -> {m['probe_theta_err_post_rad']:.3f} rad, "
            f"ratio {ratio:.3f} (<= 0.6), {wall:.0f} s (< 600 s)")


def test_criterion_5_estimation_under_load(pipeline, verdict):
    m = pipeline.stage("estimate_eval")
    verdict(5, m["post_load_ratio"] <= 1.5,
            f"loaded {m['post_err_loaded_rad']:.3f} / free {m['post_err_free_rad']:.3f} rad = "
            f"{m['post_load_ratio']:.2f} (<= 1.5)")


def test_criterion_6_anomaly(pipeline, verdict):
    m = pipeline.stage("estimate_eval")
    ok = m["post_A_rise"] >= 2.0 and m["post_flag_within_5"] and m["pre_A_rise"] < m["post_A_rise"]
    verdict(6, ok, f"post rise {m['post_A_rise']:.2f}x (>= 2, within 5 steps: {m['post_flag_within_5']}), "
                   f"pre rise {m['pre_A_rise']:.2f}x (< post)")


def test_criterion_7_control_comparison(pipeline, verdict):
    m = pipeline.stage("control_eval")
    wall = pipeline.timing("control_eval")["wall_s"]
    c = m["checks"]
    ok = all(c.values()) and wall < 600.0
    verdict(7, ok, f"learned beat geometric at all postures: {c['learned_beat_geometric_all_postures']}; "
                   f"proposed/second error {m['proposed_over_second_err']:.2f} (<= 1.2); "
                   f"lower tension at {m['postures_proposed_lower_tension']}/5 postures (>= 4); {wall:.0f} s")


def test_criterion_8_latent_descent_monotone(learned, verdict):
    rng = np.random.default_rng(800)
    counts = {"control_latent": 0, "sim_step_torque": 0, "sim_step_fix": 0}
    bad = dict.fromkeys(counts, 0)
    for k in range(1000):
        p = learned if k % 3 == 0 else random_network(rng, D=int(rng.integers(1, 6)), M=int(rng.integers(1, 11)))
        D, M = p.D, p.M
        theta = rng.uniform(-1.5, 1.5, D)
        T = rng.uniform(0, 500, M)
        l = rng.normal(0, 30, M)
        tau = rng.normal(0, 2000, D)
        traces = {
            "control_latent": control.control_latent(p, theta, T, tau).trace,
            "sim_step_torque": sim.sim_step_torque(p, sim.SimState(theta, T, l), l + rng.normal(0, 5, M), tau)[1],
            "sim_step_fix": sim.sim_step_fix(p, sim.SimState(theta, T, l), l, rng.uniform(-1.5, 1.5, D))[1],
        }
        for name, trace in traces.items():
            counts[name] += 1
            bad[name] += int(len(trace) == 0 or np.any(np.diff(trace) > 0))
    detail = ", ".join(f"{k} {counts[k] - bad[k]}/{counts[k]}" for k in counts)
    verdict(8, not any(bad.values()), f"non-increasing traces: {detail}")


def test_criterion_9_simulation_fidelity(pipeline, verdict):
    m = pipeline.stage("simulate_eval")
    t = pipeline.timing("simulate_eval")
    tick = max(t["pre_max_tick_ms"], t["post_max_tick_ms"], t["scenario_max_tick_ms"])
    ok = m["theta_ratio"] <= 0.7 and m["tension_ratio"] <= 0.95 and tick <= 50.0
    verdict(9, ok, f"theta ratio {m['theta_ratio']:.2f} (<= 0.7), tension ratio {m['tension_ratio']:.2f} (<= 0.95), "
                   f"slowest tick {tick:.1f} ms (<= 50)")


def test_criterion_10_determinism(tmp_path, verdict):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL)
    codes = [run_all(tmp_path / name, cfg) for name in ("a", "b")]
    a, b = tmp_path / "a", tmp_path / "b"
    names = sorted(p.name for p in a.iterdir())
    diff = [n for n in names if not n.startswith("timing_") and comparable(a / n) != comparable(b / n)]
    same_set = names == sorted(p.name for p in b.iterdir())
    verdict(10, same_set and not diff and codes[0] == codes[1],
            f"{len(names)} artifacts over {len(codes[0])} commands, differing: {diff or 'none'} "
            f"(timing files and wall_ms columns excluded)")
