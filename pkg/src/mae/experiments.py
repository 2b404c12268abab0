"""Desk-scale experiments: initial training, online learning, estimation,
control comparison and simulation fidelity.

Each ``run_*`` function writes its CSV artifacts and ``metrics_<name>.json``
into ``out`` and returns the metrics dict.  ``checks`` inside it maps each
acceptance threshold to pass/fail; timings go to ``timing_<name>.json`` so
the metrics stay bit-reproducible.
"""
import csv
import json
import logging
import os
import time

import numpy as np

from . import control, estimation, net, simulation, training
from . import model as geo
from .plant import PlantSolverError, make_plant, sample_initial_data

log = logging.getLogger(__name__)

INIT_CKPT = "init.ckpt"
ONLINE_CKPT = "online.ckpt"

# stream tags so every experiment draws from its own reproducible generator
_TAGS = {"data": 1, "init": 2, "train": 3, "probe": 4, "explore": 5, "estimate": 6,
         "control": 7, "simulate": 8, "holdout": 9}


def rng_for(cfg, stream):
    return np.random.default_rng([cfg["seed"], _TAGS[stream]])


def build_model(cfg):
    return geo.load_model(cfg["model.path"]) if cfg["model.path"] else geo.default_model()


def build_plant(cfg, model):
    return make_plant(model, cfg.plant(), cfg.msc(), cfg.solver())


def geometric_command(model, theta, T, msc):
    """Length command from the nominal model holding ``theta`` at tension ``T``."""
    l_abs = geo.muscle_length_abs(model, theta)
    return l_abs - model._zero_lengths - geo.elongation(model.elongation, l_abs, T) + control.l_comp(T, msc)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _finish(out, name, metrics, checks, timing):
    metrics = {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in metrics.items()}
    metrics["checks"] = {k: bool(v) for k, v in checks.items()}
    _write_json(os.path.join(out, f"metrics_{name}.json"), metrics)
    _write_json(os.path.join(out, f"timing_{name}.json"), timing)
    return metrics


def holdout_errors(params, data):
    """Mean CASE2 joint error (rad) and relative tension reconstruction error."""
    theta, T, l = data
    r = estimation.estimate_joints(params, T, l)
    err = float(np.mean(np.linalg.norm(r.theta - theta, axis=1)))
    t_rel = float(np.mean(np.linalg.norm(r.T - T, axis=1)) / np.mean(np.linalg.norm(T, axis=1)))
    t_abs = float(np.mean(np.linalg.norm(r.T - T, axis=1)))
    return err, t_rel, t_abs


# ------------------------------------------------------------ initial train

def run_init_train(cfg, out):
    t_start = time.perf_counter()
    model = build_model(cfg)
    icfg = cfg.initial()
    data = sample_initial_data(model, icfg.n_samples, rng_for(cfg, "data"), icfg.tension_range)
    holdout = sample_initial_data(model, cfg["train.holdout"], rng_for(cfg, "holdout"), icfg.tension_range)
    params = net.init_params(model.D, model.M, rng_for(cfg, "init"))
    rows = []
    steps_per_epoch = icfg.batch_count()

    def on_epoch(epoch, p, log_rows):
        err, _, t_abs = holdout_errors(p, holdout)
        loss = float(np.mean([r[2] for r in log_rows[-steps_per_epoch:]]))
        rows.append([(epoch + 1) * steps_per_epoch, epoch, loss, err, t_abs,
                     round(1000.0 * (time.perf_counter() - t_start), 1)])

    params, _ = training.initial_train(params, data, icfg, rng_for(cfg, "train"), cfg.adam(), on_epoch)
    net.save_checkpoint(params, os.path.join(out, INIT_CKPT))
    _write_csv(os.path.join(out, "train_initial.csv"),
               ["step", "epoch", "loss", "mean_theta_err_rad", "mean_tension_err_N", "wall_ms"], rows)
    err, t_rel, _ = holdout_errors(params, holdout)
    wall = time.perf_counter() - t_start
    metrics = {"holdout_case2_theta_err_rad": err, "holdout_tension_rel_err": t_rel,
               "first_epoch_loss": rows[0][2], "final_epoch_loss": rows[-1][2]}
    checks = {"case2_theta_err_below_0.05": err < 0.05, "tension_recon_below_10pct": t_rel < 0.10}
    return _finish(out, "init_train", metrics, checks, {"wall_s": wall})


# ----------------------------------------------------------- online learning

def probe_set(cfg, model, plant, n, rng):
    """Plant readings at random postures under nominal commands with random tension."""
    msc = plant.msc
    triples = []
    for _ in range(n):
        theta = training.random_posture(model, rng)
        T = rng.uniform(msc.T_bias, msc.T_limit, size=model.M)
        triples.append(plant.step(geometric_command(model, theta, T, msc)).triple())
    return training.triples_to_arrays(triples)


def run_online_learn(cfg, out, freeze=False, checkpoint=None):
    t_start = time.perf_counter()
    model = build_model(cfg)
    params = net.load_checkpoint(checkpoint or os.path.join(out, INIT_CKPT))
    plant = build_plant(cfg, model)
    probe = probe_set(cfg, model, plant, cfg["train.probe"], rng_for(cfg, "probe"))
    ocfg = cfg.online()
    rng = rng_for(cfg, "explore")
    buffer = training.OnlineBuffer.from_config(model.D, model.M, ocfg)
    adam = cfg.adam()
    weights = cfg.loss_weights()
    probe_pre, _, _ = holdout_errors(params, probe)
    curve, log_rows = [], []
    failures = updates = 0
    every = cfg["train.checkpoint_every"]
    for cycle in range(cfg["train.cycles"]):
        theta_target = training.random_posture(model, rng)
        losses, errs = [], []
        for phase in (1, 2, 3):
            try:
                _, triple = training.explore_step(plant, params, phase, theta_target, rng)
            except PlantSolverError as exc:
                failures += 1
                log.warning("cycle %d phase %d: %s", cycle, phase, exc)
                if failures > cfg["train.retries"]:
                    raise
                plant.reset()
                break
            est = estimation.estimate_joints(params, triple.T, triple.l)
            err = float(np.linalg.norm(est.theta - triple.theta))
            errs.append(err)
            curve.append([cycle, phase, err])
            if training.accumulate_sample(buffer, triple) and not freeze and len(buffer) >= ocfg.thre:
                params, batch_losses = training.online_update(params, buffer, ocfg, rng, weights, adam)
                losses += batch_losses
                updates += 1
                if every and updates % every == 0:
                    net.save_checkpoint(params, os.path.join(out, f"online_{updates:05d}.ckpt"))
        probe_err, _, probe_t = holdout_errors(params, probe) if (cycle + 1) % 10 == 0 else ("", None, "")
        log_rows.append([cycle, cycle, float(np.mean(losses)) if losses else "",
                         float(np.mean(errs)) if errs else "", probe_err, probe_t,
                         round(1000.0 * (time.perf_counter() - t_start), 1)])
    if not freeze:
        net.save_checkpoint(params, os.path.join(out, ONLINE_CKPT))
    _write_csv(os.path.join(out, "online_curve.csv"), ["cycle", "phase", "theta_err_rad"], curve)
    _write_csv(os.path.join(out, "train_online.csv"),
               ["step", "epoch", "loss", "mean_theta_err_rad", "probe_theta_err_rad", "mean_tension_err_N", "wall_ms"],
               log_rows)
    probe_post, _, _ = holdout_errors(params, probe)
    # exponential fit of the per-cycle error curve: log(err) = a + b*cycle
    per_cycle = {}
    for c, _, e in curve:
        per_cycle.setdefault(c, []).append(e)
    cs = np.array(sorted(per_cycle))
    es = np.array([np.mean(per_cycle[c]) for c in cs])
    slope = float(np.polyfit(cs, np.log(np.maximum(es, 1e-12)), 1)[0]) if len(cs) > 1 else 0.0
    ratio = probe_post / probe_pre
    metrics = {"probe_theta_err_pre_rad": probe_pre, "probe_theta_err_post_rad": probe_post,
               "probe_ratio": ratio, "curve_log_slope": slope, "updates": updates,
               "buffer_size": len(buffer), "solver_failures": failures, "frozen": freeze}
    checks = {"probe_ratio_at_most_0.6": ratio <= 0.6, "curve_decreasing": slope < 0}
    if freeze:
        checks = {"no_updates_when_frozen": updates == 0}
    return _finish(out, "online_learn", metrics, checks, {"wall_s": time.perf_counter() - t_start})


# ---------------------------------------------------------------- estimation

def estimation_motion(cfg, model, plant, rng):
    """Random motion in three phases: free, with end load, load plus a disabled muscle."""
    n = cfg["estimate.phase_steps"]
    msc = plant.msc
    states = []
    for k in range(3 * n):
        if k == n:
            plant.set_end_load(cfg["estimate.load_mass"])
        if k == 2 * n:
            plant.disable_muscle(cfg["estimate.muscle"] - 1)
        theta = training.random_posture(model, rng)
        states.append(plant.step(geometric_command(model, theta, np.full(model.M, msc.T_bias), msc)).triple())
    return training.triples_to_arrays(states)


def anomaly_rise(A, start, window, horizon=5):
    """Peak score over ``horizon`` steps from ``start`` relative to the trailing median."""
    baseline = float(np.median(A[max(0, start - window):start]))
    return float(np.max(A[start:start + horizon]) / baseline), baseline


def run_estimate_eval(cfg, out, pre_path=None, post_path=None):
    t_start = time.perf_counter()
    model = build_model(cfg)
    pre = net.load_checkpoint(pre_path or os.path.join(out, INIT_CKPT))
    post = net.load_checkpoint(post_path or os.path.join(out, ONLINE_CKPT))
    plant = build_plant(cfg, model)
    theta, T, l = estimation_motion(cfg, model, plant, rng_for(cfg, "estimate"))
    n = cfg["estimate.phase_steps"]
    window, factor = cfg["estimate.window"], cfg["estimate.factor"]
    metrics = {}
    for name, params in (("pre", pre), ("post", post)):
        r = estimation.estimate_joints(params, T, l)
        err = np.linalg.norm(r.theta - theta, axis=1)
        A = np.atleast_1d(r.anomaly)
        flags = [estimation.detect_anomaly(A[:k + 1], window, factor) for k in range(len(A))]
        rows = [[k, *theta[k], *r.theta[k], A[k], int(flags[k])] for k in range(len(A))]
        D = model.D
        _write_csv(os.path.join(out, f"estimation_{name}.csv"),
                   ["t"] + [f"theta_true_{j}" for j in range(D)] + [f"theta_est_{j}" for j in range(D)]
                   + ["A", "flag"], rows)
        rise, baseline = anomaly_rise(A, 2 * n, window)
        metrics[f"{name}_err_free_rad"] = float(np.mean(err[:n]))
        metrics[f"{name}_err_loaded_rad"] = float(np.mean(err[n:2 * n]))
        metrics[f"{name}_A_baseline"] = baseline
        metrics[f"{name}_A_rise"] = rise
        metrics[f"{name}_flag_within_5"] = bool(any(flags[2 * n:2 * n + 5]))
    load_ratio = metrics["post_err_loaded_rad"] / metrics["post_err_free_rad"]
    metrics["post_load_ratio"] = load_ratio
    metrics["post_pre_free_ratio"] = metrics["post_err_free_rad"] / metrics["pre_err_free_rad"]
    checks = {"post_pre_free_ratio_below_0.6": metrics["post_pre_free_ratio"] < 0.6,
              "load_ratio_at_most_1.5": load_ratio <= 1.5,
              "post_anomaly_rise_at_least_2": metrics["post_A_rise"] >= 2.0,
              "pre_rise_below_post_rise": metrics["pre_A_rise"] < metrics["post_A_rise"]}
    return _finish(out, "estimate_eval", metrics, checks, {"wall_s": time.perf_counter() - t_start})


# ------------------------------------------------------------------- control

METHODS = ("geometric", "first", "second", "proposed")


def control_trial(method, params, model, plant, theta_eval, start, ccfg):
    """Move the plant from ``start`` toward ``theta_eval``; returns the settled state."""
    msc = plant.msc
    plant.reset(start)
    if method == "geometric":
        return plant.step(geo.muscle_length_rel(model, theta_eval) + control.l_comp(np.full(model.M, msc.T_bias), msc))
    state = plant.step(control.control_two_step(params, theta_eval, np.full(model.M, msc.T_bias), msc))
    if method == "second":
        state = plant.step(control.control_two_step(params, theta_eval, state.T, msc))
    elif method == "proposed":
        tau = -geo.gravity_torque(model, theta_eval)
        result = control.control_latent(params, theta_eval, state.T, tau, ccfg, msc)
        state = plant.step(result.l_target)
    return state


def run_control_eval(cfg, out, post_path=None):
    t_start = time.perf_counter()
    model = build_model(cfg)
    params = net.load_checkpoint(post_path or os.path.join(out, ONLINE_CKPT))
    plant = build_plant(cfg, model)
    ccfg = cfg.control()
    rng = rng_for(cfg, "control")
    n_post, n_trial = cfg["control.postures"], cfg["control.trials"]
    evals = [training.random_posture(model, rng) for _ in range(n_post)]
    rows, failures = [], 0
    err = {m: np.full((n_post, n_trial), np.nan) for m in METHODS}
    ten = {m: np.full((n_post, n_trial), np.nan) for m in METHODS}
    for i, theta_eval in enumerate(evals):
        for j in range(n_trial):
            start = training.random_posture(model, rng)
            for m in METHODS:
                try:
                    s = control_trial(m, params, model, plant, theta_eval, start, ccfg)
                except PlantSolverError:
                    failures += 1
                    continue
                err[m][i, j] = np.linalg.norm(s.theta - theta_eval)
                ten[m][i, j] = np.linalg.norm(s.T)
                rows.append([i, j, m, err[m][i, j], ten[m][i, j]])
    _write_csv(os.path.join(out, "control_eval.csv"),
               ["posture_id", "trial", "method", "theta_err_rad", "tension_norm_N"], rows)
    summary = []
    for m in METHODS:
        for i in range(n_post):
            summary.append([i, m, np.nanmean(err[m][i]), np.nanvar(err[m][i]),
                            np.nanmean(ten[m][i]), np.nanvar(ten[m][i])])
    _write_csv(os.path.join(out, "control_summary.csv"),
               ["posture_id", "method", "theta_err_mean", "theta_err_var", "tension_mean", "tension_var"], summary)
    mean_err = {m: np.nanmean(err[m], axis=1) for m in METHODS}
    mean_ten = {m: np.nanmean(ten[m], axis=1) for m in METHODS}
    learned_beat = all(np.all(mean_err[m] < mean_err["geometric"]) for m in ("first", "second", "proposed"))
    prop_vs_second = float(np.nanmean(err["proposed"]) / np.nanmean(err["second"]))
    lower_tension = int(np.sum(mean_ten["proposed"] < mean_ten["second"]))
    metrics = {f"{m}_theta_err_rad": float(np.nanmean(err[m])) for m in METHODS}
    metrics.update({f"{m}_tension_norm_N": float(np.nanmean(ten[m])) for m in METHODS})
    metrics.update({"proposed_over_second_err": prop_vs_second, "postures_proposed_lower_tension": lower_tension,
                    "solver_failures": failures})
    checks = {"learned_beat_geometric_all_postures": learned_beat,
              "proposed_err_within_1.2x_second": prop_vs_second <= 1.2,
              "proposed_lower_tension_4_of_5": lower_tension >= min(4, n_post)}
    return _finish(out, "control_eval", metrics, checks, {"wall_s": time.perf_counter() - t_start})


# ---------------------------------------------------------------- simulation

def fidelity_postures(model, steps, rng, span=0.6):
    """Piecewise-linear posture path through random waypoints, one per 10 ticks."""
    lo, hi = model.joint_limits.T
    n_way = steps // 10 + 1
    way = [np.clip(rng.uniform(lo, hi) * span, lo, hi) for _ in range(n_way)]
    path = []
    for a, b in zip(way[:-1], way[1:]):
        path += [a + (b - a) * (k + 1) / 10.0 for k in range(10)]
    return way[0], path[:steps]


def scenario_script(params, model, msc):
    """Elbow bend, downward then sideways push, then shoulder pitch forced to 30 deg."""
    bend = np.zeros(model.D)
    bend[3] = -np.pi / 2
    l_bend = control.decode_length(params, bend, np.full(model.M, msc.T_bias))
    fix = bend.copy()
    fix[1] = np.radians(30.0)
    text = (f"at 0 len {' '.join(repr(float(v)) for v in l_bend)}\n"
            "at 20 force 0 0 -50\n"
            "at 40 force 0 50 0\n"
            f"at 60 fix {' '.join(repr(float(v)) for v in fix)}\n"
            "at 79 end\n")
    return text


def run_simulate_eval(cfg, out, pre_path=None, post_path=None):
    t_start = time.perf_counter()
    model = build_model(cfg)
    pre = net.load_checkpoint(pre_path or os.path.join(out, INIT_CKPT))
    post = net.load_checkpoint(post_path or os.path.join(out, ONLINE_CKPT))
    plant = build_plant(cfg, model)
    msc = plant.msc
    scfg = cfg.sim()
    start, path = fidelity_postures(model, cfg["sim.steps"], rng_for(cfg, "simulate"))
    T_bias = np.full(model.M, msc.T_bias)
    s0 = plant.step(geometric_command(model, start, T_bias, msc))
    truth = [plant.step(geometric_command(model, th, T_bias, msc)) for th in path]
    # the simulator replays the lengths the plant actually reached
    script = "".join(f"at {k} len {' '.join(repr(float(v)) for v in s.l)}\n" for k, s in enumerate(truth))
    with open(os.path.join(out, "fidelity_script.txt"), "w") as fh:
        fh.write(script)
    events = simulation.parse_script(script, model.D, model.M)
    metrics, timing, per_tick = {}, {}, {}
    for name, params in (("pre", pre), ("post", post)):
        state = simulation.SimState(s0.theta.copy(), s0.T.copy(), s0.l.copy())
        traj = simulation.run_simulation(params, events, model, state, scfg)
        th = np.array(traj.theta[1:])
        Ts = np.array(traj.T[1:])
        e_th = np.linalg.norm(th - np.array([s.theta for s in truth]), axis=1)
        e_T = np.linalg.norm(Ts - np.array([s.T for s in truth]), axis=1)
        per_tick[name] = (e_th, e_T)
        _write_csv(os.path.join(out, f"sim_trajectory_{name}.csv"),
                   ["tick", "mode"] + [f"theta_{j}" for j in range(model.D)] + [f"T_{i}" for i in range(model.M)],
                   traj.rows())
        metrics[f"{name}_theta_err_rad"] = float(np.mean(e_th))
        metrics[f"{name}_tension_err_N"] = float(np.mean(e_T))
        metrics[f"{name}_rejected_ticks"] = traj.rejected
        timing[f"{name}_max_tick_ms"] = float(np.max(traj.wall_ms[1:]))
        timing[f"{name}_mean_tick_ms"] = float(np.mean(traj.wall_ms[1:]))
    _write_csv(os.path.join(out, "sim_fidelity.csv"),
               ["tick", "theta_err_pre", "theta_err_post", "tension_err_pre", "tension_err_post"],
               [[k, per_tick["pre"][0][k], per_tick["post"][0][k], per_tick["pre"][1][k], per_tick["post"][1][k]]
                for k in range(len(truth))])
    # loss-switching scenario on the learned simulator
    text = scenario_script(post, model, msc)
    with open(os.path.join(out, "scenario_script.txt"), "w") as fh:
        fh.write(text)
    events = simulation.parse_script(text, model.D, model.M)
    state = simulation.initial_state(post, np.zeros(model.D), msc.T_bias)
    traj = simulation.run_simulation(post, events, model, state, scfg)
    _write_csv(os.path.join(out, "sim_scenario.csv"),
               ["tick", "mode"] + [f"theta_{j}" for j in range(model.D)] + [f"T_{i}" for i in range(model.M)],
               traj.rows())
    timing["scenario_max_tick_ms"] = float(np.max(traj.wall_ms[1:]))
    metrics["scenario_ticks"] = len(traj.ticks) - 1
    metrics["scenario_rejected_ticks"] = traj.rejected
    metrics["theta_ratio"] = metrics["post_theta_err_rad"] / metrics["pre_theta_err_rad"]
    metrics["tension_ratio"] = metrics["post_tension_err_N"] / metrics["pre_tension_err_N"]
    checks = {"theta_ratio_at_most_0.7": metrics["theta_ratio"] <= 0.7,
              "tension_ratio_at_most_0.95": metrics["tension_ratio"] <= 0.95,
              "scenario_completes": traj.rejected == 0 and metrics["scenario_ticks"] == 80}
    timing["wall_s"] = time.perf_counter() - t_start
    return _finish(out, "simulate_eval", metrics, checks, timing)


# -------------------------------------------------------------------- report

EXPERIMENTS = ("init_train", "online_learn", "estimate_eval", "control_eval", "simulate_eval")


def run_report(out):
    """Collect every metrics file into ``report.csv``; returns (all_passed, rows)."""
    rows, ok = [], True
    for name in EXPERIMENTS:
        path = os.path.join(out, f"metrics_{name}.json")
        if not os.path.exists(path):
            rows.append([name, "metrics file present", "FAIL"])
            ok = False
            continue
        with open(path) as fh:
            metrics = json.load(fh)
        for check, passed in sorted(metrics.get("checks", {}).items()):
            rows.append([name, check, "PASS" if passed else "FAIL"])
            ok &= bool(passed)
    _write_csv(os.path.join(out, "report.csv"), ["experiment", "check", "result"], rows)
    return ok, rows
