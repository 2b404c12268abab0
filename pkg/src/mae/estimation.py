"""Joint-angle estimation from tensions and lengths, and the anomaly score."""
from dataclasses import dataclass

import numpy as np

from . import net
from .net import MaskCase


@dataclass
class EstimationResult:
    theta: np.ndarray  # rad
    T: np.ndarray  # N, reconstructed
    l: np.ndarray  # mm, reconstructed
    anomaly: object  # scalar, or one value per row for batched input


def estimate_joints(params, T, l):
    """Decode joint angles from (T, l); works on one reading or a batch.

    The anomaly score is the summed L2 reconstruction error of the tension
    and length channels, on scaled units.
    """
    T = np.asarray(T, dtype=float)
    l = np.asarray(l, dtype=float)
    z = net.encode_case(params, MaskCase.CASE2, T=T, l=l)
    y = net.decode(params, z)
    D, M = params.D, params.M
    T_hat_s, l_hat_s = y[..., D:D + M], y[..., D + M:]
    A = (np.linalg.norm(T_hat_s - T / net.TENSION_SCALE, axis=-1)
         + np.linalg.norm(l_hat_s - l / net.LENGTH_SCALE, axis=-1))
    theta, T_hat, l_hat = net.unscale_units(y, D, M)
    return EstimationResult(theta, T_hat, l_hat, A if A.ndim else float(A))


def detect_anomaly(history, window=50, factor=2.0):
    """True when the newest score exceeds ``factor`` times the median of the
    up to ``window`` scores before it.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    history = np.asarray(history, dtype=float)
    if history.size < 2:
        return False
    past = history[-1 - window:-1]
    return bool(history[-1] > factor * np.median(past))
