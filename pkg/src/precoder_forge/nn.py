"""Small fully-connected networks with a Gaussian output head.

Every network maps a batch of real vectors to a Gaussian head: a mean vector
and one shared log-variance per sample.  Parameters live in a single flat
float64 vector (``ParameterStore``) so the optimizer and the checkpoint format
deal with one array.

With ``skip_dim > 0`` the last ``skip_dim`` entries of the input (the
conditioning vector) are concatenated again onto the input of every later
layer, including the head.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, FormatError, NonFiniteError, UnsupportedVersionError
from .rng import make_rng

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

CHECKPOINT_MAGIC = b"PCNN"
CHECKPOINT_VERSION = 1


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x, y):
    return (x > 0).astype(x.dtype)


def _tanh_grad(x, y):
    return 1.0 - y * y


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
    "linear": (lambda x: x, lambda x, y: np.ones_like(x)),
}


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden: tuple
    mean_dim: int
    activation: str = "relu"
    skip_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) < 1 or min(self.hidden) < 1:
            raise DimensionError(f"need at least one positive hidden width, got {self.hidden}")
        if self.input_dim < 1 or self.mean_dim < 1:
            raise DimensionError("input_dim and mean_dim must be positive")
        if not 0 <= self.skip_dim <= self.input_dim:
            raise DimensionError("skip_dim must lie in [0, input_dim]")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_shapes(self):
        """(fan_in, fan_out) of each dense layer, head last."""
        widths = list(self.hidden) + [self.mean_dim + 1]
        shapes = []
        fan_in = self.input_dim
        for i, w in enumerate(widths):
            shapes.append((fan_in, w))
            fan_in = w + self.skip_dim
        return shapes

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ParameterStore:
    """Flat parameter vector plus ``(name, shape)`` layout."""

    flat: np.ndarray
    layout: list = field(default_factory=list)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        self.layout = [(name, tuple(shape)) for name, shape in self.layout]
        total = sum(int(np.prod(s)) for _, s in self.layout)
        if total != self.flat.size:
            raise DimensionError(f"layout describes {total} values, vector has {self.flat.size}")

    def tensors(self, flat=None):
        """Views of ``flat`` (default: own parameters) in layout order."""
        flat = self.flat if flat is None else flat
        out, pos = [], 0
        for _, shape in self.layout:
            size = int(np.prod(shape))
            out.append(flat[pos:pos + size].reshape(shape))
            pos += size
        return out

    def copy(self):
        return ParameterStore(self.flat.copy(), list(self.layout))

    def to_bytes(self):
        """Layout JSON (u32 length prefixed) followed by little-endian f64 values."""
        meta = json.dumps([[n, list(s)] for n, s in self.layout]).encode()
        return struct.pack("<I", len(meta)) + meta + self.flat.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data):
        (n,) = struct.unpack_from("<I", data, 0)
        layout = [(name, tuple(s)) for name, s in json.loads(data[4:4 + n])]
        flat = np.frombuffer(data, dtype="<f8", offset=4 + n).astype(np.float64)
        return cls(flat, layout)

    def __eq__(self, other):
        return (
            isinstance(other, ParameterStore)
            and self.layout == other.layout
            and self.flat.tobytes() == other.flat.tobytes()
        )


def layout_for(spec):
    layout = []
    for i, (fi, fo) in enumerate(spec.layer_shapes()):
        layout += [(f"W{i}", (fi, fo)), (f"b{i}", (fo,))]
    return layout


def init_params(spec, seed, name=""):
    """Kaiming-uniform (fan-in) weights, zero biases."""
    rng = make_rng(seed, "init-params", name)
    layout = layout_for(spec)
    store = ParameterStore(np.zeros(sum(int(np.prod(s)) for _, s in layout)), layout)
    for (name, shape), t in zip(store.layout, store.tensors()):
        if name.startswith("W"):
            bound = np.sqrt(6.0 / shape[0])
            t[...] = rng.uniform(-bound, bound, size=shape)
    return store


@dataclass
class GaussianHead:
    """Mean ``(B, d)`` (or ``(d,)``) and one log-variance per sample."""

    mean: np.ndarray
    log_variance: np.ndarray

    @property
    def variance(self):
        return np.exp(self.log_variance)


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"expected input of width {dim}, got shape {x.shape}")
    return x, single


def forward(spec, params, x, return_cache=False):
    """Evaluate the network on ``x`` of shape ``(B, input_dim)`` or ``(input_dim,)``."""
    x, single = _as_batch(x, spec.input_dim)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("network input contains non-finite values")
    act, _ = ACTIVATIONS[spec.activation]
    tensors = params.tensors()
    n_layers = len(tensors) // 2
    cond = x[:, spec.input_dim - spec.skip_dim:] if spec.skip_dim else None
    inputs, pre, post = [], [], []
    h = x
    for i in range(n_layers):
        W, b = tensors[2 * i], tensors[2 * i + 1]
        if i > 0 and spec.skip_dim:
            h = np.concatenate([h, cond], axis=1)
        inputs.append(h)
        a = h @ W + b
        if i < n_layers - 1:
            pre.append(a)
            h = act(a)
            post.append(h)
    raw_lv = a[:, -1]
    head = GaussianHead(a[:, :-1], np.clip(raw_lv, LOGVAR_MIN, LOGVAR_MAX))
    if single:
        head = GaussianHead(head.mean[0], head.log_variance[0])
    if return_cache:
        return head, (inputs, pre, post, raw_lv, single)
    return head


def backward(spec, params, cache, d_mean, d_logvar):
    """Backpropagate head gradients.

    Returns ``(param_grad, input_grad)`` where ``param_grad`` is flat in the
    parameter layout and ``input_grad`` has the input's shape.  Gradients
    are summed over the batch.  The log-variance clamp passes no gradient
    outside its range.
    """
    inputs, pre, post, raw_lv, single = cache
    _, act_grad = ACTIVATIONS[spec.activation]
    d_mean = np.asarray(d_mean, dtype=np.float64)
    d_logvar = np.asarray(d_logvar, dtype=np.float64)
    if single:
        d_mean, d_logvar = d_mean[None, :], np.atleast_1d(d_logvar)
    B = inputs[0].shape[0]
    if d_mean.shape != (B, spec.mean_dim) or d_logvar.shape != (B,):
        raise DimensionError("upstream gradient shapes do not match the forward batch")
    tensors = params.tensors()
    grad_flat = np.zeros_like(params.flat)
    grads = params.tensors(grad_flat)
    n_layers = len(tensors) // 2
    live = (raw_lv >= LOGVAR_MIN) & (raw_lv <= LOGVAR_MAX)
    da = np.concatenate([d_mean, (d_logvar * live)[:, None]], axis=1)
    d_cond = 0.0
    for i in range(n_layers - 1, -1, -1):
        W = tensors[2 * i]
        grads[2 * i][...] = inputs[i].T @ da
        grads[2 * i + 1][...] = da.sum(axis=0)
        dh = da @ W.T
        if i == 0:
            break
        if spec.skip_dim:
            d_cond = d_cond + dh[:, -spec.skip_dim:]
            dh = dh[:, :-spec.skip_dim]
        da = dh * act_grad(pre[i - 1], post[i - 1])
    if spec.skip_dim:
        dh[:, -spec.skip_dim:] += d_cond
    if single:
        dh = dh[0]
    return grad_flat, dh


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grad, state, hp=AdamConfig()):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``.

    ``grad`` is the gradient of the loss being minimized.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise DimensionError("parameter, gradient and state lengths differ")
    t = state.t + 1
    m = hp.beta1 * state.m + (1 - hp.beta1) * grad
    v = hp.beta2 * state.v + (1 - hp.beta2) * grad * grad
    m_hat = m / (1 - hp.beta1 ** t)
    v_hat = v / (1 - hp.beta2 ** t)
    new = params - hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)
    return new, AdamState(m, v, t)


# checkpoint format: magic, u32 version, u32 json length, json, f64 block (LE)

def write_checkpoint(fh, nets, meta=None):
    """Write ``{name: (NetworkSpec, ParameterStore)}`` to a binary stream."""
    header = {"networks": [], "meta": meta or {}}
    blocks = []
    for name, (spec, store) in nets.items():
        header["networks"].append({
            "name": name,
            "spec": spec.to_dict(),
            "layout": [[n, list(s)] for n, s in store.layout],
            "size": int(store.flat.size),
        })
        blocks.append(store.flat.astype("<f8").tobytes())
    hjson = json.dumps(header, sort_keys=True).encode()
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hjson)))
    fh.write(hjson)
    for b in blocks:
        fh.write(b)


def read_checkpoint(fh):
    """Inverse of ``write_checkpoint``; returns ``(nets, meta)``."""
    data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, not a PCNN checkpoint", 0)
    if len(data) < 12:
        raise FormatError("truncated header", len(data))
    version, hlen = struct.unpack_from("<II", data, 4)
    if version > CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} > supported {CHECKPOINT_VERSION}", 4)
    if len(data) < 12 + hlen:
        raise FormatError("truncated JSON header", len(data))
    try:
        header = json.loads(data[12:12 + hlen])
    except ValueError as exc:
        raise FormatError(f"malformed JSON header: {exc}", 12) from exc
    pos = 12 + hlen
    nets = {}
    for entry in header["networks"]:
        size = entry["size"]
        end = pos + 8 * size
        if end > len(data):
            raise FormatError(f"parameter block for {entry['name']!r} truncated", len(data))
        flat = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64)
        nets[entry["name"]] = (
            NetworkSpec.from_dict(entry["spec"]),
            ParameterStore(flat, [(n, tuple(s)) for n, s in entry["layout"]]),
        )
        pos = end
    if pos != len(data):
        raise FormatError("trailing bytes after parameter blocks", pos)
    return nets, header["meta"]


def save_checkpoint(path, nets, meta=None):
    with open(path, "wb") as fh:
        write_checkpoint(fh, nets, meta)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return read_checkpoint(fh)
