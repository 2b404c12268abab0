"""Synthetic musculoskeletal plant standing in for the physical robot.

The plant holds a perturbed copy of the geometric model and settles into a
quasi-static equilibrium for every commanded muscle length under muscle
stiffness control (MSC).
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as geo
from .control import MSCParams, msc_target_tension
from .net import SensorTriple

log = logging.getLogger(__name__)


class PlantSolverError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.4g} N*mm)")
        self.residual = residual


@dataclass
class PlantConfig:
    seed: int = 1
    max_offset: float = 10.0  # mm, via-point displacement of the true plant
    elongation_scale: float = 1.5
    friction_torque: object = 100.0  # N*mm, scalar or per joint
    disabled_muscles: frozenset = field(default_factory=frozenset)
    end_load_mass: float = 0.0  # kg hanging from the end effector

    def __post_init__(self):
        if np.any(np.asarray(self.friction_torque) < 0):
            raise ValueError("friction torque must be non-negative")
        self.disabled_muscles = frozenset(int(i) for i in self.disabled_muscles)


@dataclass
class PlantState:
    theta: np.ndarray
    T: np.ndarray
    l: np.ndarray
    equilibrium_residual: float = 0.0

    def triple(self):
        return SensorTriple(self.theta.copy(), self.T.copy(), self.l.copy())


@dataclass
class SolverSettings:
    tol: float = 1e-3  # N*mm
    max_iter: int = 200
    fallback_iter: int = 2000


class Plant:
    """Perturbed true plant with MSC actuation.

    ``model`` is the plant's own geometry (already perturbed, see
    :func:`make_plant`).
    """

    def __init__(self, model, config=None, msc=None, settings=None):
        self.model = model
        self.config = config or PlantConfig()
        self.msc = msc or MSCParams()
        self.settings = settings or SolverSettings()
        self.friction = np.broadcast_to(np.asarray(self.config.friction_torque, dtype=float), (model.D,)).copy()
        self.active = np.ones(model.M, dtype=bool)
        for i in self.config.disabled_muscles:
            self.active[i] = False
        self.state = self.rest_state()

    # -- configuration events
    def set_end_load(self, mass):
        self.config.end_load_mass = float(mass)

    def disable_muscle(self, index):
        self.active[index] = False
        self.config.disabled_muscles = self.config.disabled_muscles | {int(index)}

    def enable_muscle(self, index):
        self.active[index] = True
        self.config.disabled_muscles = self.config.disabled_muscles - {int(index)}

    # -- physics pieces
    def _tensions(self, l_geo, l_abs, l_target):
        """Solve ``T = MSC(l_geo - L_e(l_abs, T), l_target)`` per muscle."""
        msc = self.msc
        e = self.model.elongation
        T = np.full_like(l_geo, msc.T_bias)
        stretch = l_geo - geo.elongation(e, l_abs, T) - l_target
        loaded = stretch > 0
        # phi(T) = T - T_bias - K*(l_geo - L_e(T) - l_target) is increasing and
        # concave, so Newton from T_bias approaches the root from below
        for _ in range(50):
            phi = T - msc.T_bias - msc.K_stiff * (l_geo - geo.elongation(e, l_abs, T) - l_target)
            dphi = 1.0 + msc.K_stiff * geo.elongation_slope(e, l_abs, T)
            step = np.where(loaded, phi / dphi, 0.0)
            T = T - step
            if np.max(np.abs(step)) < 1e-12:
                break
        T = np.where(self.active, T, 0.0)
        return T

    def _evaluate(self, theta, l_target):
        """Tensions, sensed lengths, muscle Jacobian and joint residual at ``theta``."""
        m = self.model
        D = m.D
        h = 1e-4
        batch = np.concatenate([theta[None], theta + np.eye(D) * h, theta - np.eye(D) * h])
        L = geo._lengths(m, batch)
        l_abs = L[0]
        G = (L[1:D + 1] - L[D + 1:]).T / (2.0 * h)
        l_geo = l_abs - m._zero_lengths
        T = self._tensions(l_geo, l_abs, l_target)
        l = l_geo - geo.elongation(m.elongation, l_abs, T)
        tau = geo._gravity_unchecked(m, theta, self.config.end_load_mass) - G.T @ T
        return T, l, G, tau

    def _excess(self, theta, tau):
        """Net torque beyond the friction band, ignoring pushes into a joint stop."""
        lo, hi = self.model.joint_limits.T
        ex = np.sign(tau) * np.maximum(np.abs(tau) - self.friction, 0.0)
        ex[(theta >= hi - 1e-12) & (ex > 0)] = 0.0
        ex[(theta <= lo + 1e-12) & (ex < 0)] = 0.0
        return ex

    def residual(self, theta, l_target):
        T, l, G, tau = self._evaluate(np.asarray(theta, dtype=float), np.asarray(l_target, dtype=float))
        return self._excess(theta, tau)

    # -- public API
    def rest_state(self):
        D, M = self.model.D, self.model.M
        theta = np.zeros(D)
        return PlantState(theta, np.zeros(M), np.zeros(M), 0.0)

    def reset(self, theta=None, l_target=None):
        """Place the plant at ``theta`` (default zero) and settle it there."""
        theta = np.zeros(self.model.D) if theta is None else self.model.clip(np.asarray(theta, dtype=float))
        if l_target is None:
            l_target = self.hold_command(theta)
        self.state = PlantState(theta, np.zeros(self.model.M), np.zeros(self.model.M))
        return self.step(l_target)

    def hold_command(self, theta):
        """Length command that holds ``theta`` with the plant's own geometry (ground truth)."""
        m = self.model
        theta = np.asarray(theta, dtype=float)
        l_abs = geo._lengths(m, theta[None])[0]
        return l_abs - m._zero_lengths - geo.elongation(m.elongation, l_abs, np.full(m.M, self.msc.T_bias))

    def step(self, l_target):
        """Settle to the equilibrium reached from the current posture under ``l_target``."""
        l_target = np.asarray(l_target, dtype=float)
        if not np.all(np.isfinite(l_target)):
            raise ValueError("muscle length command must be finite")
        theta, res = self._solve(self.state.theta.copy(), l_target)
        T, l, G, tau = self._evaluate(theta, l_target)
        self.state = PlantState(theta, T, l, res)
        return self.state

    def _torque_jacobian(self, theta, l_target, tau, h=1e-6):
        D = self.model.D
        J = np.empty((D, D))
        for j in range(D):
            tp = theta.copy()
            tp[j] += h
            J[:, j] = (self._evaluate(tp, l_target)[3] - tau) / h
        return J

    def _solve(self, theta, l_target):
        """Damped Newton toward the stable equilibrium reached from ``theta``.

        Net joint torque is minus the gradient of gravity plus MSC spring
        energy, so steps use the symmetrized stiffness made positive definite
        and are accepted only if they lower that energy (trapezoidal estimate).
        This keeps the solver away from unstable equilibria.
        """
        s = self.settings
        lo, hi = self.model.joint_limits.T
        T, l, G, tau = self._evaluate(theta, l_target)
        ex = self._excess(theta, tau)
        norm = np.max(np.abs(ex))
        for _ in range(s.max_iter):
            if norm <= s.tol:
                return theta, norm
            moving = ex != 0
            J = self._torque_jacobian(theta, l_target, tau)[np.ix_(moving, moving)]
            H = -0.5 * (J + J.T)
            w = np.linalg.eigvalsh(H)
            shift = max(0.0, 1e-3 * max(abs(w[-1]), 1.0) - w[0])
            delta = np.zeros_like(theta)
            delta[moving] = np.linalg.solve(H + shift * np.eye(len(H)), ex[moving])
            scale = min(1.0, 0.3 / max(np.max(np.abs(delta)), 1e-300))
            alpha = scale
            accepted = False
            for _ in range(40):
                cand = np.clip(theta + alpha * delta, lo, hi)
                _, _, _, tau_c = self._evaluate(cand, l_target)
                ex_c = self._excess(cand, tau_c)
                work = 0.5 * (ex + ex_c) @ (cand - theta)  # energy released by the move
                norm_c = np.max(np.abs(ex_c))
                if work > 0 or norm_c < norm:
                    theta, tau, ex, norm = cand, tau_c, ex_c, norm_c
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                break
        if norm <= s.tol:
            return theta, norm
        theta, norm = self._descend(theta, l_target)
        if norm > s.tol:
            raise PlantSolverError("plant equilibrium did not converge", norm)
        return theta, norm

    def _descend(self, theta, l_target):
        """Fallback: descent on the squared torque excess, started downhill."""
        lo, hi = self.model.joint_limits.T
        _, _, _, tau = self._evaluate(theta, l_target)
        ex = self._excess(theta, tau)
        f = 0.5 * ex @ ex
        step = 1e-8
        for _ in range(self.settings.fallback_iter):
            if np.max(np.abs(ex)) <= self.settings.tol:
                break
            J = self._torque_jacobian(theta, l_target, tau)
            grad = J.T @ ex
            while step > 1e-20:
                cand = np.clip(theta - step * grad, lo, hi)
                _, _, _, tau_c = self._evaluate(cand, l_target)
                ex_c = self._excess(cand, tau_c)
                f_c = 0.5 * ex_c @ ex_c
                if f_c < f:
                    theta, tau, ex, f = cand, tau_c, ex_c, f_c
                    step *= 2.0
                    break
                step *= 0.5
            else:
                break
        return theta, float(np.max(np.abs(ex)))

    def sense(self):
        return self.state.triple()


def make_plant(nominal, config=None, msc=None, settings=None):
    """Build the true plant by perturbing ``nominal`` with ``config.seed``."""
    config = config or PlantConfig()
    rng = np.random.default_rng(config.seed)
    true_model = geo.perturb_model(nominal, rng, config.max_offset, config.elongation_scale)
    return Plant(true_model, config, msc, settings)


def sample_initial_data(model, n, rng, tension_range=(0.0, 500.0)):
    """Training triples from the geometric model: random postures and tensions.

    Returns arrays ``(theta, T, l)`` with ``l = f_geo(theta) - L_e(f_geo_abs(theta), T)``.
    """
    if n <= 0:
        raise ValueError("need a positive sample count")
    lo, hi = model.joint_limits.T
    theta = rng.uniform(lo, hi, size=(n, model.D))
    T = rng.uniform(tension_range[0], tension_range[1], size=(n, model.M))
    l_abs = geo._lengths(model, theta)
    l = l_abs - model._zero_lengths - geo.elongation(model.elongation, l_abs, T)
    return theta, T, l
