"""Small dense feed-forward networks with exact gradients and Jacobians.

Networks are described by an immutable :class:`NetworkSpec` and carry their
weights in a separate :class:`ParameterSet`, so every operation here is a pure
function of its inputs. Weight matrices are stored as ``(out_dim, in_dim)``
and a layer computes ``act(x @ W.T + b)``.

All arithmetic is float64.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid", "identity")

_MAGIC = b"GDNNPARM"
_FORMAT_VERSION = 1
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}
_KIND_CODES = {"dense": 0}


class ShapeError(ValueError):
    """Raised when array shapes do not match a network spec."""


class CheckpointError(ValueError):
    """Raised for malformed or incompatible parameter containers."""


@dataclass(frozen=True)
class LayerSpec:
    out_dim: int
    activation: str = "identity"
    slope: float = 0.2
    kind: str = "dense"
    in_dim: int | None = None  # optional; checked against the previous width

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unsupported layer kind {self.kind!r}")
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if int(self.out_dim) < 1:
            raise ValueError(f"out_dim must be >= 1, got {self.out_dim}")
        if self.activation == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky_relu slope must lie in (0, 1), got {self.slope}")


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if int(self.input_dim) < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.in_dim is not None and layer.in_dim != width:
                raise ValueError(f"layer {i} expects input width {layer.in_dim}, "
                                 f"previous width is {width}")
            width = layer.out_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    @classmethod
    def mlp(cls, input_dim, hidden, output_dim, activation="tanh", output_activation="identity",
            slope=0.2) -> "NetworkSpec":
        """Build ``input -> hidden[0] -> ... -> output`` with one hidden activation."""
        layers = [LayerSpec(h, activation, slope) for h in hidden]
        layers.append(LayerSpec(output_dim, output_activation, slope))
        return cls(input_dim, tuple(layers))


@dataclass
class ParameterSet:
    """Per-layer weights ``(out, in)`` and biases ``(out,)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "ParameterSet":
        return ParameterSet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet([np.zeros_like(w) for w in self.weights],
                            [np.zeros_like(b) for b in self.biases])

    def check(self, spec: NetworkSpec) -> None:
        if len(self.weights) != len(spec.layers) or len(self.biases) != len(spec.layers):
            raise ShapeError("parameter layer count does not match spec")
        widths = spec.widths
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[i + 1], widths[i]) or b.shape != (widths[i + 1],):
                raise ShapeError(f"layer {i}: got W{w.shape} b{b.shape}, "
                                 f"expected W{(widths[i + 1], widths[i])}")

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


# Gradients have exactly the same layout as parameters.
GradientSet = ParameterSet


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)


def activate(h: np.ndarray, layer: LayerSpec) -> np.ndarray:
    act = layer.activation
    if act == "identity":
        return h
    if act == "relu":
        return np.maximum(h, 0.0)
    if act == "leaky_relu":
        return np.where(h >= 0.0, h, layer.slope * h)
    if act == "tanh":
        return np.tanh(h)
    # sigmoid, written to avoid overflow in exp for large |h|
    e = np.exp(-np.abs(h))
    return np.where(h >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation_derivative(h: np.ndarray, a: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Elementwise derivative; kinks at 0 take the right derivative."""
    act = layer.activation
    if act == "identity":
        return np.ones_like(h)
    if act == "relu":
        return (h >= 0.0).astype(h.dtype)
    if act == "leaky_relu":
        return np.where(h >= 0.0, 1.0, layer.slope)
    if act == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


def init_parameters(spec: NetworkSpec, seed: int, std: float = 0.02,
                    fan_in: bool = False) -> ParameterSet:
    """Weights ~ N(0, std^2), zero biases. Same spec and seed give identical output.

    With ``fan_in`` each layer uses ``std / sqrt(in_dim)`` instead.
    """
    rng = np.random.default_rng(seed)
    widths = spec.widths
    weights, biases = [], []
    for i in range(len(spec.layers)):
        scale = std / np.sqrt(widths[i]) if fan_in else std
        weights.append(rng.normal(0.0, scale, size=(widths[i + 1], widths[i])))
        biases.append(np.zeros(widths[i + 1]))
    return ParameterSet(weights, biases)


def _as_batch(spec: NetworkSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"input has shape {x.shape}, network expects last dim {spec.input_dim}")
    return x, single


def forward(spec: NetworkSpec, params: ParameterSet, x) -> tuple[np.ndarray, ForwardTrace]:
    """Evaluate the network on a vector ``(d,)`` or a batch ``(B, d)``.

    The returned trace always holds batched arrays; the output keeps the
    input's rank.
    """
    xb, single = _as_batch(spec, x)
    trace = ForwardTrace(inputs=xb)
    a = xb
    for layer, w, b in zip(spec.layers, params.weights, params.biases):
        h = a @ w.T + b
        a = activate(h, layer)
        trace.pre.append(h)
        trace.post.append(a)
    return (a[0] if single else a), trace


def predict(spec: NetworkSpec, params: ParameterSet, x) -> np.ndarray:
    return forward(spec, params, x)[0]


def backward(spec: NetworkSpec, params: ParameterSet, trace: ForwardTrace,
             output_grad, from_layer: int | None = None) -> tuple[np.ndarray, GradientSet]:
    """Reverse-mode pass: returns d(loss)/d(input) and d(loss)/d(params).

    ``output_grad`` is d(loss)/d(output) with the same shape as the forward
    output. Parameter gradients are summed over the batch.

    With ``from_layer=k`` the incoming gradient refers to the post-activation
    of layer ``k`` instead of the network output; layers above ``k`` get zero
    gradients.
    """
    n_layers = len(spec.layers)
    if len(trace.pre) != n_layers:
        raise ShapeError("trace layer count does not match spec")
    top = n_layers - 1 if from_layer is None else from_layer
    if not 0 <= top < n_layers:
        raise ShapeError(f"from_layer {from_layer} out of range")
    g = np.asarray(output_grad, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    if g.shape != trace.post[top].shape:
        raise ShapeError(f"output_grad shape {g.shape} != traced shape {trace.post[top].shape}")

    grads = params.zeros_like()
    for i in range(top, -1, -1):
        g = g * activation_derivative(trace.pre[i], trace.post[i], spec.layers[i])
        a_in = trace.post[i - 1] if i > 0 else trace.inputs
        grads.weights[i] = g.T @ a_in
        grads.biases[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return (g[0] if single else g), grads


def jacobian_batch(spec: NetworkSpec, params: ParameterSet, z) -> np.ndarray:
    """Forward-mode Jacobians for a batch of points, shape ``(B, m, n)``."""
    zb, _ = _as_batch(spec, z)
    batch = zb.shape[0]
    jac = np.broadcast_to(np.eye(spec.input_dim), (batch, spec.input_dim, spec.input_dim))
    a = zb
    for layer, w, b in zip(spec.layers, params.weights, params.biases):
        h = a @ w.T + b
        a = activate(h, layer)
        jac = np.einsum("oi,bin->bon", w, jac)
        jac *= activation_derivative(h, a, layer)[:, :, None]
    return jac


def jacobian_analytic(spec: NetworkSpec, params: ParameterSet, z) -> np.ndarray:
    """Exact ``m x n`` Jacobian of the network at a single latent vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError("jacobian_analytic takes a single vector; use jacobian_batch")
    return jacobian_batch(spec, params, z)[0]


def jacobian_finite_diff(spec: NetworkSpec, params: ParameterSet, z, h: float = 1e-4) -> np.ndarray:
    """Central differences ``(G(z + h e_i) - G(z - h e_i)) / 2h``, column by column."""
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError("jacobian_finite_diff takes a single vector")
    n = z.shape[0]
    steps = h * np.eye(n)
    plus = predict(spec, params, z[None, :] + steps)
    minus = predict(spec, params, z[None, :] - steps)
    return ((plus - minus) / (2.0 * h)).T


# -- checkpoint container -------------------------------------------------

def _write_spec(buf: io.BytesIO, spec: NetworkSpec) -> None:
    buf.write(struct.pack("<II", spec.input_dim, len(spec.layers)))
    for layer in spec.layers:
        buf.write(struct.pack("<BBdI", _KIND_CODES[layer.kind], _ACT_CODES[layer.activation],
                              layer.slope, layer.out_dim))


def _read_exact(buf: io.BytesIO, size: int, what: str) -> bytes:
    offset = buf.tell()
    data = buf.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated container reading {what} at byte offset {offset}")
    return data


def _read_spec(buf: io.BytesIO) -> NetworkSpec:
    input_dim, n_layers = struct.unpack("<II", _read_exact(buf, 8, "spec header"))
    kinds = {v: k for k, v in _KIND_CODES.items()}
    layers = []
    for _ in range(n_layers):
        offset = buf.tell()
        kind, act, slope, out_dim = struct.unpack("<BBdI", _read_exact(buf, 14, "layer spec"))
        if kind not in kinds or act >= len(ACTIVATIONS):
            raise CheckpointError(f"unknown layer kind/activation code at byte offset {offset}")
        try:
            layers.append(LayerSpec(out_dim, ACTIVATIONS[act], slope, kinds[kind]))
        except ValueError as exc:
            raise CheckpointError(f"invalid layer at byte offset {offset}: {exc}") from None
    try:
        return NetworkSpec(input_dim, tuple(layers))
    except ValueError as exc:
        raise CheckpointError(f"invalid network spec: {exc}") from None


def dump_parameters(spec: NetworkSpec, params: ParameterSet, role: str = "") -> bytes:
    """Serialize to the versioned binary container.

    Layout: magic, u32 version, length-prefixed utf-8 role tag, network spec
    descriptor, then W and b of every layer as little-endian float64.
    """
    params.check(spec)
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _FORMAT_VERSION))
    tag = role.encode("utf-8")
    buf.write(struct.pack("<I", len(tag)))
    buf.write(tag)
    _write_spec(buf, spec)
    for arr in params.arrays():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def parse_parameters(data: bytes) -> tuple[NetworkSpec, ParameterSet, str]:
    buf = io.BytesIO(data)
    if _read_exact(buf, len(_MAGIC), "magic") != _MAGIC:
        raise CheckpointError("not a parameter container (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    (tag_len,) = struct.unpack("<I", _read_exact(buf, 4, "role length"))
    role = _read_exact(buf, tag_len, "role").decode("utf-8")
    spec = _read_spec(buf)
    widths = spec.widths
    weights, biases = [], []
    for i in range(len(spec.layers)):
        shape = (widths[i + 1], widths[i])
        raw = _read_exact(buf, 8 * shape[0] * shape[1], f"layer {i} weights")
        weights.append(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
        raw = _read_exact(buf, 8 * shape[0], f"layer {i} biases")
        biases.append(np.frombuffer(raw, dtype="<f8").astype(np.float64))
    if buf.read(1):
        raise CheckpointError("trailing bytes after parameter container")
    return spec, ParameterSet(weights, biases), role


def save_parameters(path, spec: NetworkSpec, params: ParameterSet, role: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(dump_parameters(spec, params, role))


def load_parameters(path) -> tuple[NetworkSpec, ParameterSet, str]:
    with open(path, "rb") as fh:
        return parse_parameters(fh.read())
