"""Small dense ReLU network in float64 with hand-written backprop, Adam, and a binary checkpoint format."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SRLQNET\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sII")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    """Bad magic bytes or an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The payload is shorter (or longer) than its header promises."""


class CheckpointShapeError(CheckpointError):
    """Layer dimensions are invalid or differ from what the caller expects."""


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError(f"an MLP needs at least input and output dims, got {dims}")
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        return [((n_out, n_in), (n_out,))
                for n_in, n_out in zip(self.layer_dims[:-1], self.layer_dims[1:])]


@dataclass
class QNetwork:
    """Weights are stored (fan_out, fan_in) so a layer computes ``W @ x + b``.

    Gradients and Adam moments reuse this class since they share the shapes.
    """

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        expected = self.spec.shapes()
        if len(self.weights) != len(expected) or len(self.biases) != len(expected):
            raise CheckpointShapeError("layer count does not match spec")
        for (w_shape, b_shape), w, b in zip(expected, self.weights, self.biases):
            if w.shape != w_shape or b.shape != b_shape:
                raise CheckpointShapeError(f"parameter shapes {w.shape}/{b.shape} != {w_shape}/{b_shape}")

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> QNetwork:
        return QNetwork(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> QNetwork:
        return QNetwork(self.spec, [np.zeros_like(w) for w in self.weights],
                        [np.zeros_like(b) for b in self.biases])

    def equals(self, other: QNetwork) -> bool:
        """Bitwise equality of spec and every parameter."""
        if self.spec != other.spec:
            return False
        return all(a.tobytes() == b.tobytes() for a, b in zip(self.params(), other.params()))

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())


def init_network(spec: MlpSpec, rng: np.random.Generator) -> QNetwork:
    """He-uniform weights in ±sqrt(6 / fan_in), zero biases."""
    weights, biases = [], []
    for (n_out, n_in), (b_len,) in spec.shapes():
        bound = np.sqrt(6.0 / n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(b_len))
    return QNetwork(spec, weights, biases)


def _check_input(net: QNetwork, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.spec.input_dim or x.ndim not in (1, 2):
        raise ValueError(f"input shape {x.shape} incompatible with input dim {net.spec.input_dim}")
    return x


def _forward_cache(net: QNetwork, x: np.ndarray) -> list[np.ndarray]:
    # activations[0] is the input, activations[-1] the (linear) output; rows are samples
    acts = [x]
    last = len(net.weights) - 1
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(net: QNetwork, x) -> np.ndarray:
    """Q-values for one observation (1-D) or a batch (2-D, one row per sample)."""
    x = _check_input(net, x)
    if x.ndim == 1:
        return _forward_cache(net, x[None, :])[-1][0]
    return _forward_cache(net, x)[-1]


def batch_backward(net: QNetwork, x, actions, targets) -> tuple[QNetwork, float]:
    """Mean over the batch of the per-sample gradient of ½(Q(x)[a] - target)².

    Only the taken action's output receives an error signal.
    """
    x = _check_input(net, x)
    if x.ndim == 1:
        x = x[None, :]
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    if actions.shape[0] != n or targets.shape[0] != n:
        raise ValueError("batch sizes of inputs, actions and targets differ")
    if ((actions < 0) | (actions >= net.spec.output_dim)).any():
        raise ValueError("action index out of range")

    acts = _forward_cache(net, x)
    rows = np.arange(n)
    residual = acts[-1][rows, actions] - targets
    loss = float(0.5 * np.mean(residual * residual))

    delta = np.zeros_like(acts[-1])
    delta[rows, actions] = residual / n
    grads = net.zeros_like()
    for i in range(len(net.weights) - 1, -1, -1):
        grads.weights[i] = delta.T @ acts[i]
        grads.biases[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * (acts[i] > 0.0)
    return grads, loss


def backward(net: QNetwork, x, action_index: int, td_target: float) -> tuple[QNetwork, float]:
    """Exact gradient of ½(Q(x)[action_index] - td_target)² for one sample."""
    x = _check_input(net, x)
    if x.ndim != 1:
        raise ValueError("backward takes a single observation; use batch_backward for batches")
    return batch_backward(net, x, [action_index], [td_target])


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_network(cls, net: QNetwork, **hyper) -> AdamState:
        zeros = [np.zeros_like(p) for p in net.params()]
        return cls(m=zeros, v=[z.copy() for z in zeros], **hyper)


def adam_step(net: QNetwork, grads: QNetwork, state: AdamState) -> tuple[QNetwork, AdamState]:
    """One bias-corrected Adam update, applied to ``net`` and ``state`` in place."""
    params = net.params()
    grad_list = grads.params()
    if len(grad_list) != len(params) or any(g.shape != p.shape for g, p in zip(grad_list, params)):
        raise ValueError("gradient shapes do not match the network")
    if not all(np.isfinite(g).all() for g in grad_list):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grad_list, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return net, state


def save_checkpoint(net: QNetwork) -> bytes:
    dims = net.spec.layer_dims
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(dims)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(net.weights, net.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(data: bytes, expected_dims=None) -> QNetwork:
    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError(f"checkpoint is {len(data)} bytes, shorter than its header")
    magic, version, n_dims = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointVersionError(f"not a Q-network checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    offset = _HEADER.size
    if len(data) < offset + 4 * n_dims:
        raise CheckpointTruncatedError("checkpoint truncated inside the layer dims")
    dims = struct.unpack_from(f"<{n_dims}I", data, offset)
    offset += 4 * n_dims
    try:
        spec = MlpSpec(dims)
    except ValueError as exc:
        raise CheckpointShapeError(str(exc)) from None
    if expected_dims is not None and tuple(expected_dims) != spec.layer_dims:
        raise CheckpointShapeError(f"checkpoint dims {spec.layer_dims} != expected {tuple(expected_dims)}")

    n_values = sum(w[0] * w[1] + b[0] for w, b in spec.shapes())
    if len(data) != offset + 8 * n_values:
        raise CheckpointTruncatedError(
            f"payload has {len(data) - offset} bytes, header implies {8 * n_values}")
    weights, biases = [], []
    for w_shape, b_shape in spec.shapes():
        n_w = w_shape[0] * w_shape[1]
        weights.append(np.frombuffer(data, dtype="<f8", count=n_w, offset=offset)
                       .reshape(w_shape).astype(np.float64))
        offset += 8 * n_w
        biases.append(np.frombuffer(data, dtype="<f8", count=b_shape[0], offset=offset)
                      .astype(np.float64))
        offset += 8 * b_shape[0]
    return QNetwork(spec, weights, biases)


def write_checkpoint(net: QNetwork, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(net))


def read_checkpoint(path, expected_dims=None) -> QNetwork:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read(), expected_dims)


def numerical_gradient(net: QNetwork, x, action_index: int, td_target: float,
                       h: float = 1e-5) -> QNetwork:
    """Central-difference gradient of the single-sample TD loss."""
    def loss() -> float:
        q = forward(net, x)[action_index]
        return 0.5 * (q - td_target) ** 2

    grads = net.zeros_like()
    for p, g in zip(net.params(), grads.params()):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = loss()
            flat_p[i] = orig - h
            down = loss()
            flat_p[i] = orig
            flat_g[i] = (up - down) / (2.0 * h)
    return grads


def max_relative_error(analytic: QNetwork, numeric: QNetwork, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|) over all entries; entries with both below ``floor`` count as exact."""
    worst = 0.0
    for a, n in zip(analytic.params(), numeric.params()):
        scale = np.maximum(np.abs(a), np.abs(n))
        diff = np.abs(a - n)
        mask = scale > floor
        if mask.any():
            worst = max(worst, float((diff[mask] / scale[mask]).max()))
    return worst


def gradient_check(trials: int = 100, seed: int = 0, max_dims=(6, 8, 8, 2),
                   h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients on random small nets."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n_hidden = int(rng.integers(0, len(max_dims) - 1))
        dims = [int(rng.integers(1, max_dims[0] + 1))]
        dims += [int(rng.integers(1, max_dims[1 + i] + 1)) for i in range(n_hidden)]
        dims.append(max_dims[-1])
        net = init_network(MlpSpec(tuple(dims)), rng)
        for b in net.biases:
            b[:] = rng.normal(0.0, 0.1, size=b.shape)
        x = rng.normal(size=dims[0])
        action = int(rng.integers(dims[-1]))
        target = float(rng.normal())
        analytic, _ = backward(net, x, action, target)
        numeric = numerical_gradient(net, x, action, target, h)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
