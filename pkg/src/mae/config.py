"""Experiment configuration: flat ``section.key = value`` files.

Every tunable constant lives in :data:`KEYS` with its default and where the
default comes from (``original``, ``design`` or ``deviation``).  Unknown keys are
rejected, and :func:`dump_config` writes the effective values with those
annotations.
"""
from dataclasses import dataclass

from .control import ControlConfig, MSCParams
from .net import AdamConfig
from .plant import PlantConfig, SolverSettings
from .simulation import SimConfig
from .training import InitialTrainConfig, LossWeights, OnlineTrainConfig


class ConfigError(ValueError):
    def __init__(self, message, lineno=None):
        super().__init__(message if lineno is None else f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Key:
    default: object
    source: str  # "original", "design" or "deviation"
    doc: str


KEYS = {
    "seed": Key(0, "design", "master seed for data, initialization and exploration"),
    "model.path": Key("", "design", "model description file; empty means the built-in arm"),
    "net.lr": Key(0.001, "design", "Adam step size"),
    "net.beta1": Key(0.9, "design", "Adam first-moment decay"),
    "net.beta2": Key(0.999, "design", "Adam second-moment decay"),
    "net.eps": Key(1e-8, "design", "Adam epsilon"),
    "train.w_theta": Key(1.0, "original", "initial loss weight on joint angles"),
    "train.w_tension": Key(10.0, "original", "initial loss weight on tensions"),
    "train.w_length": Key(10.0, "original", "initial loss weight on lengths"),
    "train.batch_size": Key(100, "deviation", "samples per initial-training step"),
    "train.epochs": Key(30, "original", "initial-training epochs"),
    "train.samples": Key(300000, "deviation", "initial dataset size"),
    "train.tension_max": Key(500.0, "design", "upper end of sampled tensions, N"),
    "train.holdout": Key(2000, "design", "held-out nominal samples for evaluation"),
    "train.thre": Key(20, "original", "buffer size before online updates start"),
    "train.data": Key(10, "original", "random stored readings per online batch"),
    "train.online_batches": Key(10, "original", "batches per online epoch"),
    "train.online_epochs": Key(10, "original", "epochs per online update"),
    "train.theta_threshold": Key(0.1, "design", "joint deviation for accepting a reading, rad"),
    "train.tension_threshold": Key(10.0, "design", "tension deviation for accepting a reading, N"),
    "train.capacity": Key(1000, "design", "online buffer capacity"),
    "train.cycles": Key(300, "design", "exploration cycles per online session"),
    "train.probe": Key(40, "design", "plant readings used to track estimation error"),
    "train.checkpoint_every": Key(0, "design", "write a checkpoint every K online updates (0: only at the end)"),
    "train.retries": Key(20, "design", "plant solver failures tolerated per session"),
    "plant.seed": Key(1, "design", "perturbation seed of the true plant"),
    "plant.max_offset": Key(10.0, "design", "via-point offset of the true plant, mm"),
    "plant.elongation_scale": Key(1.5, "design", "elongation scale of the true plant"),
    "plant.friction": Key(100.0, "design", "Coulomb friction band per joint, N*mm"),
    "plant.T_bias": Key(30.0, "original", "MSC bias tension, N"),
    "plant.K_stiff": Key(10.0, "deviation", "MSC stiffness, N/mm"),
    "plant.T_limit": Key(200.0, "original", "upper exploration tension, N"),
    "plant.tol": Key(1e-3, "design", "equilibrium tolerance, N*mm"),
    "control.w1": Key(1.0, "original", "tension weight"),
    "control.w2": Key(1.0, "original", "joint-angle weight"),
    "control.w3": Key(0.01, "original", "torque weight"),
    "control.gamma_max": Key(0.5, "original", "largest latent step"),
    "control.batch": Key(10, "original", "step candidates per epoch"),
    "control.epochs": Key(10, "original", "latent descent epochs"),
    "control.jacobian_step": Key(1e-3, "design", "finite-difference step for G, rad"),
    "control.torque_unit": Key(10.0, "design", "N*mm per unit of torque residual"),
    "control.postures": Key(5, "original", "evaluation postures"),
    "control.trials": Key(5, "original", "random start postures per evaluation posture"),
    "sim.w4": Key(0.1, "original", "tension weight"),
    "sim.w5": Key(1.0, "original", "length weight"),
    "sim.w6": Key(0.001, "original", "torque weight"),
    "sim.w7": Key(1.0, "original", "forced-posture weight"),
    "sim.gamma_max": Key(0.2, "original", "largest latent step"),
    "sim.batch": Key(10, "original", "step candidates per epoch"),
    "sim.epochs": Key(3, "original", "latent descent epochs per tick"),
    "sim.torque_unit": Key(10.0, "design", "N*mm per unit of torque residual"),
    "sim.steps": Key(60, "design", "ticks in the fidelity script"),
    "estimate.load_mass": Key(3.6, "original", "end load during estimation, kg"),
    "estimate.muscle": Key(2, "original", "muscle disabled during estimation (1-based)"),
    "estimate.window": Key(50, "design", "anomaly median window"),
    "estimate.factor": Key(2.0, "design", "anomaly threshold factor"),
    "estimate.phase_steps": Key(20, "design", "motion steps per estimation phase"),
}


def _coerce(name, text, lineno=None):
    default = KEYS[name].default
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot read {text!r} as {type(default).__name__}", lineno) from None
    return text


class ExperimentConfig:
    """Effective configuration: defaults overlaid with file and CLI values."""

    def __init__(self, values=None):
        self.values = {k: v.default for k, v in KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, name, value, lineno=None):
        if name not in KEYS:
            raise ConfigError(f"unknown key {name!r}", lineno)
        if isinstance(value, str):
            value = _coerce(name, value, lineno)
        self.values[name] = value

    def __getitem__(self, name):
        return self.values[name]

    # -- builders for the module configs
    def adam(self):
        v = self.values
        return AdamConfig(v["net.lr"], v["net.beta1"], v["net.beta2"], v["net.eps"])

    def loss_weights(self):
        v = self.values
        return LossWeights(v["train.w_theta"], v["train.w_tension"], v["train.w_length"])

    def initial(self):
        v = self.values
        return InitialTrainConfig(weights=self.loss_weights(), batch_size=v["train.batch_size"],
                                  epochs=v["train.epochs"], n_samples=v["train.samples"],
                                  tension_range=(0.0, v["train.tension_max"]))

    def online(self):
        v = self.values
        return OnlineTrainConfig(v["train.thre"], v["train.data"], v["train.online_batches"],
                                 v["train.online_epochs"], v["train.theta_threshold"],
                                 v["train.tension_threshold"], v["train.capacity"])

    def msc(self):
        v = self.values
        return MSCParams(v["plant.T_bias"], v["plant.K_stiff"], v["plant.T_limit"])

    def plant(self):
        v = self.values
        return PlantConfig(v["plant.seed"], v["plant.max_offset"], v["plant.elongation_scale"],
                           v["plant.friction"])

    def solver(self):
        return SolverSettings(tol=self.values["plant.tol"])

    def control(self):
        v = self.values
        return ControlConfig(v["control.w1"], v["control.w2"], v["control.w3"], v["control.gamma_max"],
                             v["control.batch"], v["control.epochs"], v["control.jacobian_step"],
                             v["control.torque_unit"])

    def sim(self):
        v = self.values
        return SimConfig(v["sim.w4"], v["sim.w5"], v["sim.w6"], v["sim.w7"], v["sim.gamma_max"],
                         v["sim.batch"], v["sim.epochs"], torque_unit=v["sim.torque_unit"])


def parse_config(text):
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        cfg.set(key, value, lineno)
    return cfg


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg):
    """Effective config text; each line notes where its default comes from."""
    lines = []
    for name, key in KEYS.items():
        value = cfg[name]
        note = key.source if value == key.default else f"{key.source}, default {key.default!r}"
        lines.append(f"{name} = {value}  # {note}: {key.doc}")
    return "\n".join(lines) + "\n"
