"""Initial training from the geometric model and online learning from the plant."""
import logging
from dataclasses import dataclass

import numpy as np

from . import net
from .control import control_two_step
from .net import MASK_CASES, MaskCase, SensorTriple

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LossWeights:
    theta: float = 1.0
    tension: float = 10.0
    length: float = 10.0


@dataclass
class InitialTrainConfig:
    """Initial training settings.

    ``batch_size`` samples per Adam step; setting ``batches`` instead splits
    each epoch into that many equal batches.
    """

    weights: LossWeights = None
    batch_size: int = 100
    batches: int = None
    epochs: int = 30
    n_samples: int = 300000
    tension_range: tuple = (0.0, 500.0)

    def __post_init__(self):
        if self.weights is None:
            self.weights = LossWeights()
        if min(self.weights.theta, self.weights.tension, self.weights.length) <= 0:
            raise ValueError("loss weights must be positive")
        if self.n_samples < self.batch_size or (self.batches and self.n_samples < self.batches):
            raise ValueError("dataset must hold at least one full batch")

    def batch_count(self):
        return self.batches if self.batches else self.n_samples // self.batch_size


@dataclass
class OnlineTrainConfig:
    thre: int = 20  # buffer size before updates start
    data: int = 10  # random stored samples per batch
    batches: int = 10
    epochs: int = 10
    theta_threshold: float = 0.1  # rad
    tension_threshold: float = 10.0  # N
    capacity: int = 1000

    def __post_init__(self):
        if self.data > self.thre:
            raise ValueError("C_data must not exceed C_thre")


def _split(y, D, M):
    return y[..., :D], y[..., D:D + M], y[..., D + M:]


def _norm_grad(e):
    """Row-wise L2 norms and their gradients (zero where the norm is zero)."""
    n = np.linalg.norm(e, axis=-1)
    safe = np.where(n > 0, n, 1.0)
    return n, np.where((n > 0)[..., None], e / safe[..., None], 0.0)


def initial_loss(predicted, target, weights, D, M):
    """Weighted sum of per-channel L2 errors on scaled units (mean over a batch)."""
    value, _ = initial_loss_grad(predicted, target, weights, D, M)
    return value


def initial_loss_grad(predicted, target, weights, D, M):
    """Loss and its gradient with respect to ``predicted`` (both scaled)."""
    predicted = np.atleast_2d(predicted)
    target = np.atleast_2d(target)
    e = predicted - target
    eth, eT, el = _split(e, D, M)
    nth, gth = _norm_grad(eth)
    nT, gT = _norm_grad(eT)
    nl, gl = _norm_grad(el)
    N = e.shape[0]
    value = float(np.mean(weights.theta * nth + weights.tension * nT + weights.length * nl))
    grad = np.concatenate([weights.theta * gth, weights.tension * gT, weights.length * gl], axis=-1) / N
    return value, grad


def triples_to_arrays(triples):
    theta = np.array([t.theta for t in triples])
    T = np.array([t.T for t in triples])
    l = np.array([t.l for t in triples])
    return theta, T, l


def train_batch(params, inputs, targets, weights, adam=None):
    """One Adam step on a batch of (masked input, scaled target) pairs; returns the loss."""
    _, out, cache = net.forward(params, inputs)
    loss, g = initial_loss_grad(out, targets, weights, params.D, params.M)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite training loss {loss}")
    net.adam_update(params, net.backward_params(params, cache, g), adam)
    return loss


def initial_train(params, dataset, config, rng, adam=None, callback=None):
    """Train on geometric-model data with a random mask per sample.

    ``dataset`` is ``(theta, T, l)`` arrays or a list of SensorTriple.  Each
    epoch shuffles the data into ``config.batch_count()`` batches.  Returns the
    updated params and the per-batch loss log ``[(epoch, batch, loss), ...]``.
    """
    if not isinstance(dataset, tuple):
        dataset = triples_to_arrays(dataset)
    theta, T, l = dataset
    n = len(theta)
    targets = net.scale_units(theta, T, l)
    bits = np.array([c.value for c in MASK_CASES], dtype=float)
    log_rows = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        cases = bits[rng.integers(0, 3, size=n)]
        for b, idx in enumerate(np.array_split(order, config.batch_count())):
            x = net.build_input(theta[idx], T[idx], l[idx], cases[idx])
            loss = train_batch(params, x, targets[idx], config.weights, adam)
            log_rows.append((epoch, b, loss))
        if callback is not None:
            callback(epoch, params, log_rows)
        log.debug("initial epoch %d loss %.5f", epoch, log_rows[-1][2])
    return params, log_rows


# ---------------------------------------------------------- online learning

class OnlineBuffer:
    """Ring of accepted plant readings, evicting the oldest when full."""

    def __init__(self, D, M, capacity=1000, theta_threshold=0.1, tension_threshold=10.0):
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        self.D, self.M = D, M
        self.capacity = capacity
        self.theta_threshold = theta_threshold
        self.tension_threshold = tension_threshold
        self.theta = np.empty((0, D))
        self.T = np.empty((0, M))
        self.l = np.empty((0, M))

    @classmethod
    def from_config(cls, D, M, config):
        return cls(D, M, config.capacity, config.theta_threshold, config.tension_threshold)

    def __len__(self):
        return len(self.theta)

    def newest(self):
        return SensorTriple(self.theta[-1], self.T[-1], self.l[-1])

    def deviates(self, triple):
        if len(self) == 0:
            return True
        dth = np.min(np.linalg.norm(self.theta - triple.theta, axis=1))
        dT = np.min(np.linalg.norm(self.T - triple.T, axis=1))
        return bool(dth > self.theta_threshold or dT > self.tension_threshold)

    def append(self, triple):
        keep = slice(1, None) if len(self) >= self.capacity else slice(None)
        self.theta = np.vstack([self.theta[keep], triple.theta])
        self.T = np.vstack([self.T[keep], triple.T])
        self.l = np.vstack([self.l[keep], triple.l])


def accumulate_sample(buffer, triple, still=True):
    """Store ``triple`` if the plant is still and it deviates from stored data.

    Returns True when the triple was stored.
    """
    if not still or not buffer.deviates(triple):
        return False
    buffer.append(triple)
    return True


def build_online_batch(buffer, rng, config):
    """Newest reading, the zero triple and ``config.data`` random readings,
    each under all three masks.  Returns ``(inputs, targets)`` or None while
    the buffer holds fewer than ``config.thre`` readings.
    """
    if len(buffer) < config.thre:
        return None
    D, M = buffer.D, buffer.M
    pick = rng.choice(len(buffer), size=config.data, replace=False)
    theta = np.vstack([buffer.theta[-1], np.zeros(D), buffer.theta[pick]])
    T = np.vstack([buffer.T[-1], np.zeros(M), buffer.T[pick]])
    l = np.vstack([buffer.l[-1], np.zeros(M), buffer.l[pick]])
    k = len(theta)
    bits = np.repeat(np.array([c.value for c in MASK_CASES], dtype=float), k, axis=0)
    theta, T, l = np.tile(theta, (3, 1)), np.tile(T, (3, 1)), np.tile(l, (3, 1))
    return net.build_input(theta, T, l, bits), net.scale_units(theta, T, l)


def online_update(params, buffer, config, rng, weights=None, adam=None):
    """Train a copy of ``params`` on freshly drawn online batches.

    Returns ``(new_params, losses)``; ``params`` itself is never modified, so
    a failed update leaves the caller's network untouched.
    """
    weights = weights or LossWeights()
    work = params.copy()
    losses = []
    for _ in range(config.epochs):
        for _ in range(config.batches):
            batch = build_online_batch(buffer, rng, config)
            if batch is None:
                raise TrainingError(f"online buffer holds {len(buffer)} readings, needs {config.thre}")
            losses.append(train_batch(work, batch[0], batch[1], weights, adam))
    return work, losses


def random_posture(model, rng):
    lo, hi = model.joint_limits.T
    return rng.uniform(lo, hi)


def explore_step(plant, params, phase, theta_target, rng):
    """One phase of the exploration motion; returns ``(l_target, triple)``.

    Phase 1 commands ``theta_target`` at the bias tension, phase 2 repeats it
    with the settled tension as reference, phase 3 uses a reference tension
    drawn per muscle from ``[T_bias, T_limit]``.
    """
    msc = plant.msc
    M = plant.model.M
    if phase == 1:
        T_ref = np.full(M, msc.T_bias)
    elif phase == 2:
        T_ref = plant.state.T.copy()
    elif phase == 3:
        T_ref = rng.uniform(msc.T_bias, msc.T_limit, size=M)
    else:
        raise ValueError(f"exploration phase must be 1, 2 or 3, got {phase}")
    l_target = control_two_step(params, theta_target, T_ref, msc)
    state = plant.step(l_target)
    return l_target, state.triple()
