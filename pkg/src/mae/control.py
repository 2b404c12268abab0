"""Muscle-length control through the autoencoder.

Covers muscle stiffness control, elongation compensation, the two-step
controller, the finite-difference muscle Jacobian and the latent-space
controller that searches ``z`` for a low-tension command.
"""
from dataclasses import dataclass, field

import numpy as np

from . import net
from .net import MaskCase


# N*mm per unit of the torque residual in the latent losses (N*cm)
TORQUE_UNIT = 10.0


class ControlError(RuntimeError):
    pass


@dataclass
class MSCParams:
    """Muscle stiffness control ``T = T_bias + max(0, K_stiff*(l - l_target))``."""

    T_bias: float = 30.0  # N
    K_stiff: float = 10.0  # N/mm
    T_limit: float = 200.0  # N

    def __post_init__(self):
        if self.T_bias < 0 or self.K_stiff <= 0:
            raise ValueError("MSC needs T_bias >= 0 and K_stiff > 0")


@dataclass
class ControlConfig:
    w_tension: float = 1.0
    w_theta: float = 1.0
    w_torque: float = 0.01
    gamma_max: float = 0.5
    batch: int = 10
    epochs: int = 10
    jacobian_step: float = 1e-3  # rad
    torque_unit: float = TORQUE_UNIT

    def __post_init__(self):
        if self.gamma_max <= 0 or self.batch < 2:
            raise ValueError("need gamma_max > 0 and at least two step candidates")


def msc_target_tension(l_current, l_target, msc):
    return msc.T_bias + np.maximum(0.0, msc.K_stiff * (np.asarray(l_current, dtype=float) - np.asarray(l_target, dtype=float)))


def l_comp(T, msc):
    """Length offset that makes MSC produce tension ``T`` (mm)."""
    return -(np.asarray(T, dtype=float) - msc.T_bias) / msc.K_stiff


def decode_length(params, theta, T):
    """Muscle lengths predicted from joint angles and tensions (mask case 1)."""
    z = net.encode_case(params, MaskCase.CASE1, theta=theta, T=T)
    return net.decode_units(params, z)[2]


def control_two_step(params, theta_target, T_ref, msc):
    """Length command for ``theta_target`` given a reference tension.

    Call with ``T_ref = T_bias`` first and with the settled tension second.
    """
    return decode_length(params, theta_target, T_ref) + l_comp(T_ref, msc)


def muscle_jacobian_mae(params, theta, T, step=1e-3):
    """Forward-difference muscle Jacobian dl/dtheta from the network (M x D, mm/rad)."""
    theta = np.asarray(theta, dtype=float)
    D = len(theta)
    batch = np.vstack([theta, theta + np.eye(D) * step])
    l = decode_length(params, batch, np.broadcast_to(T, (D + 1, params.M)))
    return (l[1:] - l[0]).T / step


# ------------------------------------------------------------ latent search

def _norms(e):
    n = np.linalg.norm(e, axis=-1)
    safe = np.where(n > 0, n, 1.0)
    return n, np.where((n > 0)[..., None], e / safe[..., None], 0.0)


class LatentObjective:
    """Weighted sum of L2 terms evaluated on decoded (scaled) outputs.

    Terms: tension norm, theta error, length error and the torque imbalance
    ``tau_target + G^T T`` in multiples of ``torque_unit`` N*mm (T in newtons,
    G in mm/rad).  Unused terms have weight 0.  ``value_grad`` works on a
    batch of scaled outputs.
    """

    def __init__(self, D, M, w_tension=0.0, theta_ref=None, w_theta=0.0, l_ref=None, w_length=0.0,
                 tau_target=None, G=None, w_torque=0.0, torque_unit=TORQUE_UNIT):
        self.D, self.M = D, M
        self.w_tension = w_tension
        self.theta_ref = None if theta_ref is None else np.asarray(theta_ref, dtype=float)
        self.w_theta = w_theta
        self.l_ref = None if l_ref is None else np.asarray(l_ref, dtype=float) / net.LENGTH_SCALE
        self.w_length = w_length
        self.tau_target = None if tau_target is None else np.asarray(tau_target, dtype=float)
        self.G = None if G is None else np.asarray(G, dtype=float)
        self.w_torque = w_torque
        self.torque_unit = torque_unit

    def value_grad(self, y):
        y = np.atleast_2d(y)
        D, M = self.D, self.M
        th, Ts, ls = y[:, :D], y[:, D:D + M], y[:, D + M:]
        value = np.zeros(len(y))
        grad = np.zeros_like(y)
        if self.w_tension:
            n, g = _norms(Ts)
            value += self.w_tension * n
            grad[:, D:D + M] += self.w_tension * g
        if self.w_theta:
            n, g = _norms(th - self.theta_ref)
            value += self.w_theta * n
            grad[:, :D] += self.w_theta * g
        if self.w_length:
            n, g = _norms(ls - self.l_ref)
            value += self.w_length * n
            grad[:, D + M:] += self.w_length * g
        if self.w_torque:
            T_newton = Ts * net.TENSION_SCALE
            r = (self.tau_target + T_newton @ self.G) / self.torque_unit
            n, g = _norms(r)
            value += self.w_torque * n
            grad[:, D:D + M] += self.w_torque * (g @ self.G.T) * (net.TENSION_SCALE / self.torque_unit)
        return value, grad

    def __call__(self, y):
        return self.value_grad(y)[0]


def latent_descent(params, z0, objective, gamma_max, batch, epochs):
    """Normalized-gradient descent in latent space with a step-size sweep.

    Each epoch tries ``batch`` step sizes spread evenly over ``[0, gamma_max]``
    (0 included) along ``-g/|g|`` and keeps the lowest-loss candidate, so the
    trace never increases.  Returns ``(z, trace)`` where ``trace[k]`` is the
    loss after ``k`` epochs.
    """
    z = np.asarray(z0, dtype=float).copy()
    gammas = np.linspace(0.0, gamma_max, batch)
    y = net.decode(params, z)
    loss, dy = objective.value_grad(y)
    loss = float(loss[0])
    if not np.isfinite(loss):
        raise ControlError(f"non-finite latent loss {loss}")
    trace = [loss]
    for _ in range(epochs):
        g = net.grad_wrt_latent(params, z, dy[0])
        gnorm = np.linalg.norm(g)
        if gnorm == 0 or not np.isfinite(gnorm):
            trace.append(loss)
            continue
        cands = z - gammas[:, None] * (g / gnorm)
        ys = net.decode(params, cands)
        losses, grads = objective.value_grad(ys)
        best = int(np.argmin(losses))
        if not np.isfinite(losses[best]):
            raise ControlError("non-finite latent loss")
        if losses[best] < loss:
            z, loss, dy = cands[best], float(losses[best]), grads[best:best + 1]
        trace.append(loss)
    return z, trace


@dataclass
class LatentControlResult:
    l_target: np.ndarray
    T_calc: np.ndarray
    theta_calc: np.ndarray
    l_calc: np.ndarray
    trace: list = field(default_factory=list)
    z: np.ndarray = None


def control_latent(params, theta_target, T_current, tau_target, config=None, msc=None):
    """Latent-space controller: low tension, target posture, balanced torque.

    ``tau_target`` is the joint torque the muscles must supply (N*mm), i.e.
    the negative of the gravity torque at ``theta_target``.
    """
    config = config or ControlConfig()
    msc = msc or MSCParams()
    D, M = params.D, params.M
    G = muscle_jacobian_mae(params, theta_target, T_current, config.jacobian_step)
    objective = LatentObjective(D, M, w_tension=config.w_tension,
                                theta_ref=theta_target, w_theta=config.w_theta,
                                tau_target=tau_target, G=G, w_torque=config.w_torque,
                                torque_unit=config.torque_unit)
    z0 = net.encode_case(params, MaskCase.CASE1, theta=theta_target, T=T_current)
    z, trace = latent_descent(params, z0, objective, config.gamma_max, config.batch, config.epochs)
    theta_c, T_c, l_c = net.decode_units(params, z)
    return LatentControlResult(l_c + l_comp(T_c, msc), T_c, theta_c, l_c, trace, z)
