"""Geometric musculoskeletal model.

A serial chain of ``D`` revolute joints moving ``D + 1`` links, with ``M``
muscles routed as straight segments through via-points fixed on the links.
Lengths are in millimeters, masses in kilograms, torques in N*mm.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from ._accel import USE_NUMBA, njit

GRAVITY = 9.80665  # m/s^2; with lever arms in mm the torque comes out in N*mm
LIMIT_TOL = 1e-9


class LimitError(ValueError):
    """Joint angles outside the model's joint limits."""


class ModelFormatError(ValueError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class LinkSpec:
    length: float  # mm, distance from this link's joint to the next joint along -z
    mass: float = 0.0
    center_of_mass: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("link length must be positive")
        if self.mass < 0:
            raise ValueError("link mass must be non-negative")


@dataclass(frozen=True)
class MuscleRoute:
    points: tuple  # ((link_index, (x, y, z)), ...) start, relays, end

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValueError("a muscle route needs at least two via-points")


@dataclass(frozen=True)
class ElongationParams:
    """Tension-dependent elongation ``k_d*l_abs*T + a*(1 - exp(-b*T))``.

    Each field is a scalar or one value per muscle.
    """

    dyneema_compliance: object = 1e-5
    element_amplitude: object = 3.0
    element_rate: object = 0.01

    def __post_init__(self):
        if np.any(np.asarray(self.dyneema_compliance) < 0) or np.any(np.asarray(self.element_amplitude) < 0):
            raise ValueError("elongation compliance and amplitude must be non-negative")
        if np.any(np.asarray(self.element_rate) <= 0):
            raise ValueError("elongation rate must be positive")


@dataclass(frozen=True, eq=False)
class GeometricModel:
    joint_axes: np.ndarray  # (D, 3) unit axes, expressed in the parent link frame
    joint_limits: np.ndarray  # (D, 2) radians
    links: tuple  # D + 1 LinkSpec; link 0 is the fixed base
    routes: tuple  # M MuscleRoute
    elongation: ElongationParams = field(default_factory=ElongationParams)
    joint_names: tuple = ()

    def __post_init__(self):
        axes = np.array(self.joint_axes, dtype=float).reshape(-1, 3)
        norms = np.linalg.norm(axes, axis=1)
        if np.any(norms == 0):
            raise ValueError("joint axis must be non-zero")
        axes = axes / norms[:, None]
        limits = np.array(self.joint_limits, dtype=float).reshape(-1, 2)
        D = len(axes)
        if D < 1:
            raise ValueError("model needs at least one joint")
        if len(limits) != D or np.any(limits[:, 0] >= limits[:, 1]):
            raise ValueError("joint limits must be (min, max) with min < max for every joint")
        if len(self.links) != D + 1:
            raise ValueError(f"expected {D + 1} links for {D} joints, got {len(self.links)}")
        if len(self.routes) < 1:
            raise ValueError("model needs at least one muscle")
        for m, route in enumerate(self.routes):
            for link, _ in route.points:
                if not 0 <= link <= D:
                    raise ValueError(f"muscle {m} references missing link {link}")
        object.__setattr__(self, "joint_axes", axes)
        object.__setattr__(self, "joint_limits", limits)
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "routes", tuple(self.routes))

        pt_link, pt_off, ptr = [], [], [0]
        for route in self.routes:
            for link, off in route.points:
                pt_link.append(link)
                pt_off.append(off)
            ptr.append(len(pt_link))
        object.__setattr__(self, "_pt_link", np.array(pt_link, dtype=np.int64))
        object.__setattr__(self, "_pt_off", np.array(pt_off, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "_route_ptr", np.array(ptr, dtype=np.int64))
        object.__setattr__(self, "_link_len", np.array([lk.length for lk in self.links], dtype=float))
        object.__setattr__(self, "_link_mass", np.array([lk.mass for lk in self.links], dtype=float))
        object.__setattr__(self, "_link_com", np.array([lk.center_of_mass for lk in self.links], dtype=float))
        zero = _lengths(self, np.zeros((1, D)))[0]
        object.__setattr__(self, "_zero_lengths", zero)

    @property
    def D(self):
        return len(self.joint_axes)

    @property
    def M(self):
        return len(self.routes)

    def check_limits(self, theta):
        theta = np.asarray(theta, dtype=float)
        lo, hi = self.joint_limits[:, 0], self.joint_limits[:, 1]
        if np.any(theta < lo - LIMIT_TOL) or np.any(theta > hi + LIMIT_TOL):
            raise LimitError(f"joint angles {theta} outside limits")

    def clip(self, theta):
        return np.clip(theta, self.joint_limits[:, 0], self.joint_limits[:, 1])


# ---------------------------------------------------------------- kinematics

def _rodrigues(axis, angle):
    """Rotation matrices for a unit ``axis`` and an array of angles, shape (..., 3, 3)."""
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def link_frames(model, theta):
    """World rotation and origin of every link, for a batch of postures.

    Returns ``R`` of shape (N, D+1, 3, 3) and ``p`` of shape (N, D+1, 3).
    Joint ``j`` sits at ``(0, 0, -length)`` of link ``j`` and turns link ``j+1``.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    N, D = theta.shape
    R = np.empty((N, D + 1, 3, 3))
    p = np.empty((N, D + 1, 3))
    R[:, 0] = np.eye(3)
    p[:, 0] = 0.0
    for j in range(D):
        offset = np.array([0.0, 0.0, -model._link_len[j]])
        p[:, j + 1] = p[:, j] + R[:, j] @ offset
        R[:, j + 1] = R[:, j] @ _rodrigues(model.joint_axes[j], theta[:, j])
    return R, p


def _lengths_numpy(model, theta):
    R, p = link_frames(model, theta)
    lk = model._pt_link
    pts = p[:, lk] + np.einsum("npij,pj->npi", R[:, lk], model._pt_off)
    seg = np.linalg.norm(np.diff(pts, axis=1), axis=2)  # (N, P-1)
    ptr = model._route_ptr
    # a segment belongs to a route iff both of its endpoints do
    keep = np.ones(seg.shape[1], dtype=bool)
    keep[ptr[1:-1] - 1] = False
    csum = np.concatenate([np.zeros((seg.shape[0], 1)), np.cumsum(seg * keep, axis=1)], axis=1)
    return csum[:, ptr[1:] - 1] - csum[:, ptr[:-1]]


@njit
def _lengths_kernel(theta, axes, link_len, pt_link, pt_off, route_ptr):
    N, D = theta.shape
    M = route_ptr.shape[0] - 1
    P = pt_link.shape[0]
    out = np.zeros((N, M))
    R = np.zeros((D + 1, 3, 3))
    p = np.zeros((D + 1, 3))
    pts = np.zeros((P, 3))
    for n in range(N):
        for a in range(3):
            for b in range(3):
                R[0, a, b] = 1.0 if a == b else 0.0
            p[0, a] = 0.0
        for j in range(D):
            x, y, z = axes[j, 0], axes[j, 1], axes[j, 2]
            s = np.sin(theta[n, j])
            c = np.cos(theta[n, j])
            t = 1.0 - c
            Q00 = c + t * x * x
            Q01 = t * x * y - s * z
            Q02 = t * x * z + s * y
            Q10 = t * x * y + s * z
            Q11 = c + t * y * y
            Q12 = t * y * z - s * x
            Q20 = t * x * z - s * y
            Q21 = t * y * z + s * x
            Q22 = c + t * z * z
            for a in range(3):
                p[j + 1, a] = p[j, a] - R[j, a, 2] * link_len[j]
                r0, r1, r2 = R[j, a, 0], R[j, a, 1], R[j, a, 2]
                R[j + 1, a, 0] = r0 * Q00 + r1 * Q10 + r2 * Q20
                R[j + 1, a, 1] = r0 * Q01 + r1 * Q11 + r2 * Q21
                R[j + 1, a, 2] = r0 * Q02 + r1 * Q12 + r2 * Q22
        for q in range(P):
            k = pt_link[q]
            for a in range(3):
                pts[q, a] = p[k, a] + R[k, a, 0] * pt_off[q, 0] + R[k, a, 1] * pt_off[q, 1] + R[k, a, 2] * pt_off[q, 2]
        for m in range(M):
            total = 0.0
            for q in range(route_ptr[m], route_ptr[m + 1] - 1):
                dx = pts[q + 1, 0] - pts[q, 0]
                dy = pts[q + 1, 1] - pts[q, 1]
                dz = pts[q + 1, 2] - pts[q, 2]
                total += np.sqrt(dx * dx + dy * dy + dz * dz)
            out[n, m] = total
    return out


def _lengths(model, theta):
    """Absolute muscle lengths for a batch of postures, no limit check."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if USE_NUMBA:
        return _lengths_kernel(np.ascontiguousarray(theta), model.joint_axes, model._link_len,
                               model._pt_link, model._pt_off, model._route_ptr)
    return _lengths_numpy(model, theta)


def muscle_length_abs(model, theta):
    """Absolute muscle lengths in mm; accepts one posture (D,) or a batch (N, D)."""
    theta = np.asarray(theta, dtype=float)
    model.check_limits(theta)
    out = _lengths(model, theta)
    return out[0] if theta.ndim == 1 else out


def muscle_length_rel(model, theta):
    """Muscle lengths relative to the all-zero posture, in mm."""
    return muscle_length_abs(model, theta) - model._zero_lengths


def elongation(params, l_abs, T):
    """Muscle elongation (mm) under tension ``T`` (N) for absolute length ``l_abs`` (mm)."""
    T = np.asarray(T, dtype=float)
    if np.any(T < 0):
        raise ValueError("elongation is only defined for non-negative tension")
    k_d = np.asarray(params.dyneema_compliance, dtype=float)
    a = np.asarray(params.element_amplitude, dtype=float)
    b = np.asarray(params.element_rate, dtype=float)
    return k_d * np.asarray(l_abs, dtype=float) * T + a * (1.0 - np.exp(-b * T))


def elongation_slope(params, l_abs, T):
    """Derivative of :func:`elongation` with respect to ``T``."""
    k_d = np.asarray(params.dyneema_compliance, dtype=float)
    a = np.asarray(params.element_amplitude, dtype=float)
    b = np.asarray(params.element_rate, dtype=float)
    return k_d * np.asarray(l_abs, dtype=float) + a * b * np.exp(-b * np.asarray(T, dtype=float))


def _jacobian_unchecked(model, theta, h=1e-4):
    D = model.D
    E = np.eye(D) * h
    batch = np.concatenate([theta + E, theta - E])
    L = _lengths(model, batch)
    return (L[:D] - L[D:]).T / (2.0 * h)


def muscle_jacobian_analytic(model, theta, h=1e-4):
    """Ground-truth muscle Jacobian dl/dtheta (M x D, mm/rad) by central differences."""
    theta = np.asarray(theta, dtype=float)
    model.check_limits(theta)
    return _jacobian_unchecked(model, theta, h)


def end_effector(model, theta):
    """World position (mm) of the distal end of the last link."""
    R, p = link_frames(model, theta)
    return p[0, -1] + R[0, -1] @ np.array([0.0, 0.0, -model._link_len[-1]])


def _joint_torque_from_forces(model, theta, points_forces):
    """Joint torques (N*mm) produced by world forces applied at link-frame points.

    ``points_forces`` is a list of (link, local point, world force in N).
    """
    R, p = link_frames(model, theta)
    R, p = R[0], p[0]
    D = model.D
    tau = np.zeros(D)
    # joint j sits at the origin of link j+1 and turns everything distal to it
    for link, local, force in points_forces:
        c = p[link] + R[link] @ local
        for j in range(min(link, D)):
            w = R[j] @ model.joint_axes[j]
            tau[j] += np.cross(w, c - p[j + 1]) @ force
    return tau


def gravity_torque(model, theta, end_mass=0.0, end_force=None):
    """Gravitational (plus end-load) torque acting on each joint, N*mm.

    This is minus the gradient of the potential energy; muscles must supply
    the opposite of it to hold the posture.
    """
    theta = np.asarray(theta, dtype=float)
    model.check_limits(theta)
    return _gravity_unchecked(model, theta, end_mass, end_force)


def _gravity_unchecked(model, theta, end_mass=0.0, end_force=None):
    down = np.array([0.0, 0.0, -GRAVITY])
    loads = [(i, model._link_com[i], model._link_mass[i] * down)
             for i in range(1, model.D + 1) if model._link_mass[i] > 0]
    tip = np.array([0.0, 0.0, -model._link_len[-1]])
    force = end_mass * down
    if end_force is not None:
        force = force + np.asarray(end_force, dtype=float)
    if np.any(force != 0):
        loads.append((model.D, tip, force))
    return _joint_torque_from_forces(model, theta, loads)


def potential_energy(model, theta, end_mass=0.0):
    """Gravitational potential energy in N*mm (used as a test oracle)."""
    R, p = link_frames(model, theta)
    R, p = R[0], p[0]
    U = 0.0
    for i in range(1, model.D + 1):
        U += model._link_mass[i] * GRAVITY * (p[i] + R[i] @ model._link_com[i])[2]
    tip = p[-1] + R[-1] @ np.array([0.0, 0.0, -model._link_len[-1]])
    return U + end_mass * GRAVITY * tip[2]


# ------------------------------------------------------------- construction

def default_model():
    """Five-DOF shoulder/elbow arm with ten muscles.

    Joints: shoulder roll, pitch, yaw, elbow pitch, elbow yaw.  Every joint
    is spanned by at least two antagonist muscles.
    """
    axes = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 1, 0), (0, 0, 1)]
    limits = np.radians([(-40, 20), (-120, 30), (-40, 40), (-100, 0), (-35, 35)])
    links = (
        LinkSpec(5.0),                                   # torso, shoulder roll at its tip
        LinkSpec(5.0, 0.0),                              # shoulder roll -> pitch
        LinkSpec(5.0, 0.0),                              # shoulder pitch -> yaw
        LinkSpec(280.0, 1.6, (0.0, 0.0, -130.0)),        # upper arm
        LinkSpec(5.0, 0.0),                              # elbow pitch -> yaw
        LinkSpec(250.0, 1.1, (0.0, 0.0, -110.0)),        # forearm and hand
    )
    routes = (
        MuscleRoute(((0, (0.0, 60.0, 30.0)), (1, (0.0, 60.0, -60.0)))),         # 1 roll, lateral
        MuscleRoute(((0, (0.0, -60.0, 30.0)), (1, (0.0, -60.0, -60.0)))),       # 2 roll, medial
        MuscleRoute(((1, (-27.4, 0.0, -80.2)), (2, (18.1, 0.0, -67.6)))),  # 3 pitch, raises the arm
        MuscleRoute(((1, (20.7, 0.0, -82.3)), (2, (-65.8, 0.0, 23.9)))),  # 4 pitch, lowers the arm
        MuscleRoute(((2, (0.0, 50.0, -20.0)), (3, (50.0, 0.0, -80.0)))),        # 5 yaw, internal
        MuscleRoute(((2, (0.0, -50.0, -20.0)), (3, (50.0, 0.0, -80.0)))),       # 6 yaw, external
        MuscleRoute(((2, (40.0, 0.0, -30.0)), (5, (30.0, 0.0, -60.0)))),        # 7 biarticular flexor
        MuscleRoute(((3, (-35.0, 0.0, -150.0)), (5, (-35.0, 0.0, 20.0)))),      # 8 elbow extensor
        MuscleRoute(((4, (0.0, 45.0, 10.0)), (5, (45.0, 0.0, -80.0)))),         # 9 pronator
        MuscleRoute(((4, (0.0, -45.0, 10.0)), (5, (45.0, 0.0, -80.0)))),        # 10 supinator
    )
    return GeometricModel(axes, limits, links, routes, ElongationParams(),
                          ("S-r", "S-p", "S-y", "E-p", "E-y"))


def perturb_model(model, rng, max_offset=10.0, elongation_scale=1.5):
    """Copy of ``model`` with every via-point displaced by up to ``max_offset`` mm
    in a random direction and the elongation parameters scaled."""
    routes = []
    for route in model.routes:
        pts = []
        for link, off in route.points:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            shift = direction * rng.uniform(0.0, max_offset)
            pts.append((link, tuple(np.asarray(off, dtype=float) + shift)))
        routes.append(MuscleRoute(tuple(pts)))
    e = model.elongation
    elong = ElongationParams(
        np.asarray(e.dyneema_compliance, dtype=float) * elongation_scale,
        np.asarray(e.element_amplitude, dtype=float) * elongation_scale,
        e.element_rate,
    )
    return replace(model, routes=tuple(routes), elongation=elong)


# ------------------------------------------------------------ text format

def _floats(tokens, n, lineno, what):
    if len(tokens) != n:
        raise ModelFormatError(lineno, f"{what} expects {n} numbers, got {len(tokens)}")
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ModelFormatError(lineno, f"{what}: {exc}") from None


def parse_model(text):
    """Parse the line-oriented model description.

    ::

        joint <name> <ax> <ay> <az> <min_deg> <max_deg>
        link <length_mm> <mass_kg> <cx> <cy> <cz>
        route <link> <x> <y> <z> [<link> <x> <y> <z> ...]
        elongation <k_d> <a> <b>

    ``#`` starts a comment.  The first ``link`` is the base.
    """
    axes, limits, names, links, routes = [], [], [], [], []
    elong = ElongationParams()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *tok = line.split()
        try:
            if key == "joint":
                if len(tok) != 6:
                    raise ModelFormatError(lineno, "joint expects a name and 5 numbers")
                vals = _floats(tok[1:], 5, lineno, "joint")
                if not vals[3] < vals[4]:
                    raise ModelFormatError(lineno, "joint limits must satisfy min < max")
                names.append(tok[0])
                axes.append(vals[:3])
                limits.append(np.radians(vals[3:]))
            elif key == "link":
                vals = _floats(tok, 5, lineno, "link")
                links.append(LinkSpec(vals[0], vals[1], tuple(vals[2:])))
            elif key == "route":
                if not tok or len(tok) % 4:
                    raise ModelFormatError(lineno, "route expects groups of <link x y z>")
                pts = []
                for k in range(0, len(tok), 4):
                    try:
                        link = int(tok[k])
                    except ValueError:
                        raise ModelFormatError(lineno, f"bad link index {tok[k]!r}") from None
                    pts.append((link, tuple(_floats(tok[k + 1:k + 4], 3, lineno, "via-point"))))
                routes.append(MuscleRoute(tuple(pts)))
            elif key == "elongation":
                elong = ElongationParams(*_floats(tok, 3, lineno, "elongation"))
            else:
                raise ModelFormatError(lineno, f"unknown keyword {key!r}")
        except ModelFormatError:
            raise
        except ValueError as exc:
            raise ModelFormatError(lineno, str(exc)) from None
    try:
        return GeometricModel(np.array(axes), np.array(limits), tuple(links), tuple(routes), elong, tuple(names))
    except ValueError as exc:
        raise ModelFormatError(0, str(exc)) from None


def format_model(model):
    lines = []
    names = model.joint_names or tuple(f"j{j}" for j in range(model.D))

    def num(*vals):
        return " ".join(repr(float(v)) for v in vals)

    for name, ax, (lo, hi) in zip(names, model.joint_axes, np.degrees(model.joint_limits)):
        lines.append(f"joint {name} {num(*ax, lo, hi)}")
    for lk in model.links:
        lines.append(f"link {num(lk.length, lk.mass, *lk.center_of_mass)}")
    for route in model.routes:
        parts = [f"{link} {num(*o)}" for link, o in route.points]
        lines.append("route " + " ".join(parts))
    e = model.elongation
    if np.ndim(e.dyneema_compliance) == 0 and np.ndim(e.element_amplitude) == 0 and np.ndim(e.element_rate) == 0:
        lines.append(f"elongation {float(e.dyneema_compliance)!r} {float(e.element_amplitude)!r} {float(e.element_rate)!r}")
    return "\n".join(lines) + "\n"


def load_model(path):
    with open(path) as fh:
        return parse_model(fh.read())
