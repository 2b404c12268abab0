"""Quasi-static simulator driven by the autoencoder's latent space.

Each step searches the latent state for a decoded (theta, T, l) that realizes
the commanded muscle lengths while balancing a target torque (TORQUE mode) or
while holding a forced posture (FIX mode).
"""
import enum
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as geo
from . import net
from .control import TORQUE_UNIT, ControlError, LatentObjective, latent_descent, muscle_jacobian_mae
from .net import MaskCase


class SimMode(enum.Enum):
    TORQUE = "torque"
    FIX = "fix"


class ScriptError(ValueError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class SimConfig:
    w_tension: float = 0.1
    w_length: float = 1.0
    w_torque: float = 0.001
    w_fix: float = 1.0
    gamma_max: float = 0.2
    batch: int = 10
    epochs: int = 3
    jacobian_step: float = 1e-3
    torque_unit: float = TORQUE_UNIT
    fix_encoding: MaskCase = MaskCase.CASE3

    def __post_init__(self):
        if min(self.w_tension, self.w_length, self.w_torque, self.w_fix) < 0:
            raise ValueError("simulation weights must be non-negative")
        if self.gamma_max <= 0 or self.batch < 2:
            raise ValueError("need gamma_max > 0 and at least two step candidates")


@dataclass
class SimState:
    theta: np.ndarray
    T: np.ndarray
    l: np.ndarray
    mode: SimMode = SimMode.TORQUE

    def copy(self):
        return SimState(self.theta.copy(), self.T.copy(), self.l.copy(), self.mode)


def _finish(params, state, z, l_cmd, mode):
    theta, T, _ = net.decode_units(params, z)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(T))):
        return state, False
    return SimState(theta, T, np.asarray(l_cmd, dtype=float).copy(), mode), True


def sim_step_torque(params, state, l_cmd, tau_target, config=None):
    """Advance one tick under commanded lengths and a torque to balance.

    Returns ``(new_state, loss_trace)``; a non-finite result leaves the state
    unchanged and returns an empty trace.
    """
    config = config or SimConfig()
    D, M = params.D, params.M
    G = muscle_jacobian_mae(params, state.theta, state.T, config.jacobian_step)
    objective = LatentObjective(D, M, w_tension=config.w_tension,
                                l_ref=l_cmd, w_length=config.w_length,
                                tau_target=tau_target, G=G, w_torque=config.w_torque,
                                torque_unit=config.torque_unit)
    z0 = net.encode_case(params, MaskCase.CASE2, T=state.T, l=state.l)
    try:
        z, trace = latent_descent(params, z0, objective, config.gamma_max, config.batch, config.epochs)
    except ControlError:
        return state, []
    new, ok = _finish(params, state, z, l_cmd, SimMode.TORQUE)
    return new, trace if ok else []


def sim_step_fix(params, state, l_cmd, theta_fix, config=None, encoding=None):
    """Advance one tick with the posture pulled toward ``theta_fix``."""
    config = config or SimConfig()
    encoding = encoding or config.fix_encoding
    D, M = params.D, params.M
    objective = LatentObjective(D, M, w_tension=config.w_tension,
                                l_ref=l_cmd, w_length=config.w_length,
                                theta_ref=theta_fix, w_theta=config.w_fix)
    z0 = net.encode_case(params, encoding, theta=state.theta, T=state.T, l=state.l)
    try:
        z, trace = latent_descent(params, z0, objective, config.gamma_max, config.batch, config.epochs)
    except ControlError:
        return state, []
    new, ok = _finish(params, state, z, l_cmd, SimMode.FIX)
    return new, trace if ok else []


# ------------------------------------------------------------------ scripts

@dataclass
class ScriptEvent:
    tick: int
    kind: str  # "len", "force", "fix" or "end"
    values: np.ndarray
    lineno: int = 0


_ARITY = {"len": "M", "force": 3, "fix": "D", "end": 0}


def parse_script(text, D, M):
    """Parse ``at <tick> len|force|fix <values>`` lines.

    ``at <tick> end`` extends the run without changing any command.  Blank
    lines and ``#`` comments are skipped.  Events come back sorted by tick,
    keeping file order within a tick.
    """
    events = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        if tokens[0] != "at" or len(tokens) < 3:
            raise ScriptError(lineno, "expected 'at <tick> <event> ...'")
        try:
            tick = int(tokens[1])
        except ValueError:
            raise ScriptError(lineno, f"bad tick {tokens[1]!r}") from None
        if tick < 0:
            raise ScriptError(lineno, "tick must be non-negative")
        kind = tokens[2]
        if kind not in _ARITY:
            raise ScriptError(lineno, f"unknown event {kind!r}")
        need = {"M": M, "D": D}.get(_ARITY[kind], _ARITY[kind])
        vals = tokens[3:]
        if len(vals) != need:
            raise ScriptError(lineno, f"{kind} takes {need} values, got {len(vals)}")
        try:
            values = np.array([float(v) for v in vals])
        except ValueError:
            raise ScriptError(lineno, "values must be numbers") from None
        if not np.all(np.isfinite(values)):
            raise ScriptError(lineno, "values must be finite")
        events.append(ScriptEvent(tick, kind, values, lineno))
    events.sort(key=lambda e: e.tick)
    return events


def format_script(events):
    lines = []
    for e in events:
        vals = " ".join(repr(float(v)) for v in e.values)
        lines.append(f"at {e.tick} {e.kind} {vals}".rstrip())
    return "\n".join(lines) + "\n"


@dataclass
class Trajectory:
    ticks: list = field(default_factory=list)
    modes: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    T: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    rejected: int = 0

    def record(self, tick, state, wall_ms=0.0):
        self.ticks.append(tick)
        self.modes.append(state.mode.value)
        self.theta.append(state.theta.copy())
        self.T.append(state.T.copy())
        self.wall_ms.append(wall_ms)

    def rows(self):
        for k, th, T, mode in zip(self.ticks, self.theta, self.T, self.modes):
            yield [k, mode, *th, *T]


def initial_state(params, theta, T_bias=30.0):
    """Simulator state at posture ``theta`` with bias tension on every muscle."""
    theta = np.asarray(theta, dtype=float)
    T = np.full(params.M, float(T_bias))
    z = net.encode_case(params, MaskCase.CASE1, theta=theta, T=T)
    l = net.decode_units(params, z)[2]
    return SimState(theta.copy(), T, l)


def run_simulation(params, events, model, state, config=None, end_mass=0.0):
    """Step the simulator once per tick from 0 to the last event tick.

    ``len`` events set the commanded lengths, ``force`` events set the
    external end-effector force and return to TORQUE mode, ``fix`` events
    switch to FIX mode at the given posture.  The target torque in TORQUE
    mode is minus the geometric model's gravity-plus-force torque at the
    current simulated posture.  The initial state is logged before tick 0.
    """
    config = config or SimConfig()
    traj = Trajectory()
    traj.record(-1, state)
    if not events:
        return traj
    last = max(e.tick for e in events)
    l_cmd = state.l.copy()
    force = np.zeros(3)
    theta_fix = None
    pos = 0
    for tick in range(last + 1):
        while pos < len(events) and events[pos].tick == tick:
            e = events[pos]
            if e.kind == "len":
                l_cmd = e.values.copy()
            elif e.kind == "force":
                force = e.values.copy()
                theta_fix = None
            elif e.kind == "fix":
                theta_fix = e.values.copy()
            pos += 1
        t0 = time.perf_counter()
        if theta_fix is None:
            posture = model.clip(state.theta)
            tau = -geo._gravity_unchecked(model, posture, end_mass, force)
            new, trace = sim_step_torque(params, state, l_cmd, tau, config)
        else:
            new, trace = sim_step_fix(params, state, l_cmd, theta_fix, config)
        if not trace:
            traj.rejected += 1
        state = new
        traj.record(tick, state, 1000.0 * (time.perf_counter() - t0))
    return traj
