"""Layer specs, networks as immutable parameter vectors, forward and backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod, sqrt

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "tanh", "none")
KINDS = ("dense", "conv2d", "activation")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "in_shape", tuple(int(d) for d in self.in_shape))
        object.__setattr__(self, "out_shape", tuple(int(d) for d in self.out_shape))
        if self.kind == "activation" and self.in_shape != self.out_shape:
            raise ShapeError("activation layers keep their shape")
        if self.kind == "conv2d":
            if len(self.in_shape) != 3 or len(self.out_shape) != 3:
                raise ShapeError("conv2d shapes are (channels, height, width)")
            kh, kw = self.kernel
            if kh < 1 or kw < 1 or kh != kw:
                raise ShapeError(f"conv2d {self.in_shape} -> {self.out_shape} implies no square kernel")

    @property
    def kernel(self) -> tuple[int, int]:
        _, h, w = self.in_shape
        _, oh, ow = self.out_shape
        return h - oh + 1, w - ow + 1

    @property
    def param_count(self) -> int:
        if self.kind == "dense":
            return prod(self.in_shape) * prod(self.out_shape) + prod(self.out_shape)
        if self.kind == "conv2d":
            c = self.in_shape[0]
            f = self.out_shape[0]
            k = self.kernel[0]
            return f * c * k * k + f
        return 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "in_shape": list(self.in_shape),
            "out_shape": list(self.out_shape),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], tuple(d["in_shape"]), tuple(d["out_shape"]), d.get("activation", "none"))


def dense(n_in, n_out, activation="none") -> LayerSpec:
    in_shape = tuple(n_in) if isinstance(n_in, (tuple, list)) else (n_in,)
    return LayerSpec("dense", in_shape, (n_out,), activation)


def conv2d(in_shape, filters, kernel, activation="none") -> LayerSpec:
    c, h, w = in_shape
    return LayerSpec("conv2d", (c, h, w), (filters, h - kernel + 1, w - kernel + 1), activation)


def activation(shape, kind) -> LayerSpec:
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (shape,)
    return LayerSpec("activation", shape, shape, kind)


@dataclass(frozen=True, eq=False)
class Network:
    """An ordered stack of layers with its parameters held in one flat vector.

    Instances are treated as values: ``params`` and ``velocity`` are made
    read-only, and every update builds a new Network.
    """

    layers: tuple[LayerSpec, ...]
    params: np.ndarray
    velocity: np.ndarray = field(default=None)
    seed: int | None = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].out_shape != layers[i + 1].in_shape:
                raise ShapeError(
                    f"layer {i} outputs {layers[i].out_shape} but layer {i + 1} expects {layers[i + 1].in_shape}"
                )
        n = sum(spec.param_count for spec in layers)
        params = np.array(self.params, dtype=np.float64).reshape(-1)
        if params.size != n:
            raise ShapeError(f"parameter vector has {params.size} entries, layers need {n}")
        velocity = np.zeros(n) if self.velocity is None else np.array(self.velocity, dtype=np.float64).reshape(-1)
        if velocity.size != n:
            raise ShapeError(f"velocity vector has {velocity.size} entries, layers need {n}")
        params.flags.writeable = False
        velocity.flags.writeable = False
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "velocity", velocity)

    @property
    def in_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape

    @property
    def n_params(self) -> int:
        return self.params.size

    def with_params(self, params, velocity=None) -> "Network":
        return Network(self.layers, params, self.velocity if velocity is None else velocity, self.seed)

    def _adopt(self, params: np.ndarray, velocity: np.ndarray) -> "Network":
        # fast path for optimizer steps: arrays are freshly allocated by the
        # caller and never shared, so they can be frozen in place
        if params.shape != self.params.shape or velocity.shape != self.velocity.shape:
            raise ShapeError("adopted arrays do not match the parameter layout")
        params.flags.writeable = False
        velocity.flags.writeable = False
        net = object.__new__(Network)
        for name, value in (("layers", self.layers), ("params", params), ("velocity", velocity), ("seed", self.seed)):
            object.__setattr__(net, name, value)
        return net

    def layer_params(self, index: int) -> tuple[np.ndarray, np.ndarray] | None:
        """Weight and bias views for layer ``index`` (None for activations)."""
        spec = self.layers[index]
        if spec.param_count == 0:
            return None
        start = sum(s.param_count for s in self.layers[:index])
        return _split_params(spec, self.params[start:start + spec.param_count])


def _split_params(spec: LayerSpec, flat: np.ndarray):
    if spec.kind == "dense":
        n_in, n_out = prod(spec.in_shape), prod(spec.out_shape)
        return flat[: n_in * n_out].reshape(n_in, n_out), flat[n_in * n_out:]
    c, f, k = spec.in_shape[0], spec.out_shape[0], spec.kernel[0]
    nw = f * c * k * k
    return flat[:nw].reshape(f, c, k, k), flat[nw:]


def _fans(spec: LayerSpec) -> tuple[int, int]:
    if spec.kind == "dense":
        return prod(spec.in_shape), prod(spec.out_shape)
    k = spec.kernel[0]
    return spec.in_shape[0] * k * k, spec.out_shape[0] * k * k


def init_network(layers, seed: int) -> Network:
    """Scaled-uniform weights in +/- sqrt(6 / (fan_in + fan_out)), zero biases."""
    layers = tuple(layers)
    rng = np.random.default_rng(seed)
    chunks = []
    for spec in layers:
        if spec.param_count == 0:
            continue
        fan_in, fan_out = _fans(spec)
        limit = sqrt(6.0 / (fan_in + fan_out))
        n_bias = spec.out_shape[0] if spec.kind == "conv2d" else prod(spec.out_shape)
        chunks.append(rng.uniform(-limit, limit, spec.param_count - n_bias))
        chunks.append(np.zeros(n_bias))
    params = np.concatenate(chunks) if chunks else np.zeros(0)
    return Network(layers, params, None, seed)


def zero_network(layers) -> Network:
    layers = tuple(layers)
    return Network(layers, np.zeros(sum(s.param_count for s in layers)))


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        # split by sign so large |z| never overflows exp
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(kind: str, out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return grad * (out > 0)
    if kind == "sigmoid":
        return grad * out * (1.0 - out)
    if kind == "tanh":
        return grad * (1.0 - out * out)
    return grad


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    # (B, C, H, W) -> (B, C, H-k+1, W-k+1, k, k)
    return np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))


def _batched(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    shape = net.in_shape
    if x.shape == shape:
        return x[None, ...], False
    if x.shape[1:] == shape:
        return x, True
    # flat vectors may feed a dense layer whose in_shape is multi-dimensional
    if net.layers[0].kind == "dense":
        if x.ndim == 1 and x.size == prod(shape):
            return x.reshape((1,) + shape), False
        if x.ndim == 2 and x.shape[1] == prod(shape):
            return x.reshape((x.shape[0],) + shape), True
    raise ShapeError(f"input shape {x.shape} does not match network input {shape} (optionally batched)")


def forward(net: Network, x) -> list[np.ndarray]:
    """Run ``net`` on ``x`` and return every activation, input first.

    ``x`` is either a single example of shape ``net.in_shape`` or a batch
    with a leading batch axis; the returned activations are always batched.
    """
    a, _ = _batched(net, x)
    acts = [a]
    offset = 0
    for spec in net.layers:
        n = spec.param_count
        if spec.kind == "dense":
            w, b = _split_params(spec, net.params[offset:offset + n])
            z = a.reshape(a.shape[0], -1) @ w + b
            a = _act(spec.activation, z).reshape((a.shape[0],) + spec.out_shape)
        elif spec.kind == "conv2d":
            w, b = _split_params(spec, net.params[offset:offset + n])
            win = _windows(a, spec.kernel[0])
            z = np.einsum("bchwij,fcij->bfhw", win, w, optimize=True) + b[None, :, None, None]
            a = _act(spec.activation, z)
        else:
            a = _act(spec.activation, a)
        offset += n
        acts.append(a)
    return acts


def output(net: Network, x) -> np.ndarray:
    return forward(net, x)[-1]


def backward(net: Network, acts: list[np.ndarray], grad_out: np.ndarray, need_input_grad: bool = False):
    """Reverse pass for activations produced by :func:`forward`.

    Returns ``(param_grad, input_grad)``; ``input_grad`` is None unless
    requested.
    """
    param_grad = np.zeros(net.n_params)
    g = np.asarray(grad_out, dtype=np.float64).reshape(acts[-1].shape)
    offset = net.n_params
    for i in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[i]
        a_in, a_out = acts[i], acts[i + 1]
        n = spec.param_count
        offset -= n
        g = _act_grad(spec.activation, a_out, g)
        last = i == 0 and not need_input_grad
        if spec.kind == "dense":
            w, _ = _split_params(spec, net.params[offset:offset + n])
            gw, gb = _split_params(spec, param_grad[offset:offset + n])
            flat_in = a_in.reshape(a_in.shape[0], -1)
            gz = g.reshape(g.shape[0], -1)
            np.matmul(flat_in.T, gz, out=gw)
            gz.sum(axis=0, out=gb)
            g = None if last else (gz @ w.T).reshape(a_in.shape)
        elif spec.kind == "conv2d":
            w, _ = _split_params(spec, net.params[offset:offset + n])
            gw, gb = _split_params(spec, param_grad[offset:offset + n])
            k = spec.kernel[0]
            win = _windows(a_in, k)
            gw[...] = np.einsum("bchwij,bfhw->fcij", win, g, optimize=True)
            gb[...] = g.sum(axis=(0, 2, 3))
            if not last:
                padded = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
                g = np.einsum("bfhwij,fcij->bchw", _windows(padded, k), w[:, :, ::-1, ::-1], optimize=True)
            else:
                g = None
        if g is None:
            break
    return param_grad, g
