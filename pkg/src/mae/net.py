"""The masked autoencoder: scaling, masking, forward/backward passes and Adam."""
import enum
import io
from dataclasses import dataclass, field

import numpy as np

THETA_SCALE = 1.0  # rad
TENSION_SCALE = 200.0  # N
LENGTH_SCALE = 100.0  # mm
CHECKPOINT_MAGIC = "MAE-CHECKPOINT"
CHECKPOINT_VERSION = 1


class MaskCase(enum.Enum):
    """Which channel is hidden from the network; the value is the mask bits."""

    CASE1 = (1, 1, 0)  # (theta, T) -> l
    CASE2 = (0, 1, 1)  # (T, l) -> theta
    CASE3 = (1, 0, 1)  # (theta, l) -> T

    @property
    def bits(self):
        return np.array(self.value, dtype=float)


MASK_CASES = (MaskCase.CASE1, MaskCase.CASE2, MaskCase.CASE3)


@dataclass
class SensorTriple:
    """One synchronized reading in physical units: rad, N, mm."""

    theta: np.ndarray
    T: np.ndarray
    l: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.T = np.asarray(self.T, dtype=float)
        self.l = np.asarray(self.l, dtype=float)

    @classmethod
    def zeros(cls, D, M):
        return cls(np.zeros(D), np.zeros(M), np.zeros(M))

    def copy(self):
        return SensorTriple(self.theta.copy(), self.T.copy(), self.l.copy())


def layer_sizes(D, M):
    return (D + 2 * M + 3, 200, 30, D + M, 30, 200, D + 2 * M)


# index of the affine layer whose output is the latent z, and the output layer
LATENT_LAYER = 2
OUTPUT_LAYER = 5


def scale_units(theta, T, l):
    """Concatenate a triple (or batches of them) into scaled network units."""
    return np.concatenate([np.asarray(theta, dtype=float) / THETA_SCALE,
                           np.asarray(T, dtype=float) / TENSION_SCALE,
                           np.asarray(l, dtype=float) / LENGTH_SCALE], axis=-1)


def unscale_units(y, D, M):
    """Inverse of :func:`scale_units`; returns ``(theta, T, l)``."""
    y = np.asarray(y, dtype=float)
    return (y[..., :D] * THETA_SCALE,
            y[..., D:D + M] * TENSION_SCALE,
            y[..., D + M:D + 2 * M] * LENGTH_SCALE)


def build_input(theta, T, l, case):
    """Scaled triple with the masked channel zeroed, followed by the mask bits.

    Accepts single triples or batches; ``case`` may be a MaskCase or an array of
    mask bits with one row per sample.
    """
    x = scale_units(theta, T, l)
    D = np.shape(theta)[-1]
    M = np.shape(T)[-1]
    bits = case.bits if isinstance(case, MaskCase) else np.asarray(case, dtype=float)
    bits = np.broadcast_to(bits, x.shape[:-1] + (3,))
    keep = np.concatenate([np.repeat(bits[..., :1], D, axis=-1),
                           np.repeat(bits[..., 1:2], M, axis=-1),
                           np.repeat(bits[..., 2:], M, axis=-1)], axis=-1)
    return np.concatenate([x * keep, bits], axis=-1)


@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class NetworkParams:
    D: int
    M: int
    weights: list  # W[k] has shape (out, in)
    biases: list
    adam_m: list = field(default=None)
    adam_v: list = field(default=None)
    adam_t: int = 0

    def __post_init__(self):
        if self.adam_m is None:
            self.adam_m = [np.zeros_like(p) for p in self.arrays()]
        if self.adam_v is None:
            self.adam_v = [np.zeros_like(p) for p in self.arrays()]

    @property
    def sizes(self):
        return layer_sizes(self.D, self.M)

    def arrays(self):
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self):
        return NetworkParams(self.D, self.M,
                             [W.copy() for W in self.weights], [b.copy() for b in self.biases],
                             [a.copy() for a in self.adam_m], [a.copy() for a in self.adam_v], self.adam_t)

    def equals(self, other):
        mine = self.arrays() + self.adam_m + self.adam_v
        theirs = other.arrays() + other.adam_m + other.adam_v
        return (self.D == other.D and self.M == other.M and self.adam_t == other.adam_t
                and all(np.array_equal(a, b) for a, b in zip(mine, theirs)))


def init_params(D, M, rng):
    """Symmetric uniform initialization, zero biases."""
    sizes = layer_sizes(D, M)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(D, M, weights, biases)


def zero_params(D, M):
    sizes = layer_sizes(D, M)
    return NetworkParams(D, M, [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
                         [np.zeros(o) for o in sizes[1:]])


def _is_linear(k, first, last):
    # the latent layer and the output layer have identity activations
    return k == last or k == LATENT_LAYER


def _run(params, x, first, last):
    """Apply affine layers ``first..last`` inclusive; returns output and cache."""
    h = np.asarray(x, dtype=float)
    inputs, acts = [], []
    for k in range(first, last + 1):
        inputs.append(h)
        a = h @ params.weights[k].T + params.biases[k]
        h = a if _is_linear(k, first, last) else np.tanh(a)
        acts.append(h)
    return h, (first, inputs, acts)


def _back(params, cache, grad_out, want_params=True):
    first, inputs, acts = cache
    last = first + len(inputs) - 1
    g = np.asarray(grad_out, dtype=float)
    gW, gb = {}, {}
    for idx in range(len(inputs) - 1, -1, -1):
        k = first + idx
        if not _is_linear(k, first, last):
            g = g * (1.0 - acts[idx] ** 2)
        if want_params:
            h = inputs[idx]
            if g.ndim == 1:
                gW[k] = np.outer(g, h)
                gb[k] = g.copy()
            else:
                gW[k] = g.T @ h
                gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
    return g, gW, gb


def forward(params, x):
    """Full pass. Returns ``(z, output, cache)``; works on one input or a batch."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.sizes[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {params.sizes[0]}")
    out, cache = _run(params, x, 0, OUTPUT_LAYER)
    z = cache[2][LATENT_LAYER]
    return z, out, cache


def encode(params, x):
    z, _ = _run(params, x, 0, LATENT_LAYER)
    return z


def decode(params, z):
    """Decoder half only: latent (D+M) -> scaled (D+2M)."""
    out, _ = _run(params, z, LATENT_LAYER + 1, OUTPUT_LAYER)
    return out


def decode_with_cache(params, z):
    return _run(params, z, LATENT_LAYER + 1, OUTPUT_LAYER)


def encode_case(params, case, theta=None, T=None, l=None):
    """Latent state from the two channels the mask case keeps.

    Values for the masked channel are ignored.
    """
    D, M = params.D, params.M
    theta = np.zeros(D) if theta is None else np.asarray(theta, dtype=float)
    T = np.zeros(M) if T is None else np.asarray(T, dtype=float)
    l = np.zeros(M) if l is None else np.asarray(l, dtype=float)
    shape = np.broadcast_shapes(theta.shape[:-1], T.shape[:-1], l.shape[:-1])
    theta = np.broadcast_to(theta, shape + (D,))
    T = np.broadcast_to(T, shape + (M,))
    l = np.broadcast_to(l, shape + (M,))
    return encode(params, build_input(theta, T, l, case))


def decode_units(params, z):
    """Decode and convert back to physical units: ``(theta, T, l)``."""
    return unscale_units(decode(params, z), params.D, params.M)


def backward_params(params, cache, output_gradient):
    """Parameter gradients of a scalar loss given dLoss/dOutput.

    Returns a list in the order of :meth:`NetworkParams.arrays`.
    """
    _, gW, gb = _back(params, cache, output_gradient)
    grads = []
    for k in range(len(params.weights)):
        grads += [gW[k], gb[k]]
    return grads


def grad_wrt_latent(params, z, output_gradient):
    """dLoss/dz through the decoder, given dLoss/dOutput."""
    _, cache = decode_with_cache(params, z)
    g, _, _ = _back(params, cache, output_gradient, want_params=False)
    return g


def adam_update(params, grads, config=None):
    """One in-place Adam step; returns ``params``."""
    config = config or AdamConfig()
    params.adam_t += 1
    t = params.adam_t
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for p, g, m, v in zip(params.arrays(), grads, params.adam_m, params.adam_v):
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        p -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params


# -------------------------------------------------------------- checkpoints

def save_checkpoint(params, path):
    header = (f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n"
              f"D {params.D}\nM {params.M}\n"
              f"layers {' '.join(str(s) for s in params.sizes)}\n"
              f"adam_t {params.adam_t}\nend\n")
    body = np.concatenate([a.ravel() for a in params.arrays() + params.adam_m + params.adam_v])
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(body.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    stream = io.BytesIO(data)
    fields = {}
    first = stream.readline().decode("ascii").split()
    if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if int(first[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {first[1]}")
    while True:
        line = stream.readline().decode("ascii")
        if not line:
            raise ValueError(f"{path}: truncated header")
        if line.strip() == "end":
            break
        key, *vals = line.split()
        fields[key] = [int(v) for v in vals]
    D, M = fields["D"][0], fields["M"][0]
    sizes = tuple(fields["layers"])
    if sizes != layer_sizes(D, M):
        raise ValueError(f"{path}: layer sizes {sizes} inconsistent with D={D}, M={M}")
    body = np.frombuffer(stream.read(), dtype="<f8")
    template = zero_params(D, M)
    shapes = [a.shape for a in template.arrays()] * 3
    expected = sum(int(np.prod(s)) for s in shapes)
    if body.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {body.size}")
    arrays, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(body[pos:pos + n].reshape(s).astype(float))
        pos += n
    n = len(shapes) // 3
    params_arr, m, v = arrays[:n], arrays[n:2 * n], arrays[2 * n:]
    return NetworkParams(D, M, params_arr[0::2], params_arr[1::2], m, v, fields["adam_t"][0])
