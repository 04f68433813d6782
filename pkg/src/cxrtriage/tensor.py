"""Dense-tensor layer library with hand-written forward and backward passes.

Tensors are plain ``numpy.ndarray`` objects (NCHW for images, NC for
features).  Every layer exposes ``forward(x, tape=None)`` and
``backward(grad, tape)``.  A :class:`Tape` carries the per-call state
(training flag, dropout rng, cached activations, parameter gradients), so
a layer object itself is never mutated by inference and can be shared
between threads.  Training-mode batchnorm is the one exception: it
updates its running statistics in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import _kernels

BN_MOMENTUM = 0.9
BN_EPS = 1e-3


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class StateError(RuntimeError):
    pass


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    # a finite sum implies finite elements; a non-finite sum needs the full scan
    if not np.isfinite(np.sum(x)) and not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {where}")
    return x


class Tape:
    """Per-call record of a forward pass, consumed by ``backward``."""

    def __init__(self, train: bool = False, rng: np.random.Generator | None = None,
                 param_grads: bool = True):
        self.train = train
        self.param_grads = param_grads
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.cache: dict[int, object] = {}
        self.grads: dict[int, dict[str, np.ndarray]] = {}

    def save(self, layer: "Layer", value) -> None:
        self.cache[id(layer)] = value

    def load(self, layer: "Layer"):
        try:
            return self.cache[id(layer)]
        except KeyError:
            raise StateError(f"backward called on {layer.kind!r} before forward") from None

    def grads_of(self, layer: "Layer") -> dict[str, np.ndarray] | None:
        return self.grads.get(id(layer))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int):
    for i in range(k):
        for j in range(k):
            yield i, j, xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k * k, ho, wo), dtype=xp.dtype)
    for i, j, win in _windows(xp, k, stride, ho, wo):
        cols[:, :, i * k + j] = win
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None,
                   stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of an NCHW batch with an (F, C, K, K) kernel bank."""
    if x.ndim != 4 or weights.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weights.shape}")
    n, c, h, w = x.shape
    f, kc, k, k2 = weights.shape
    if kc != c or k != k2:
        raise ShapeError(f"conv2d kernel {weights.shape} incompatible with input channels {c}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {k} too large for input {h}x{w} with padding {padding}")
    if k == 1 and stride == 1 and padding == 0:
        out = np.matmul(weights.reshape(f, c), x.reshape(n, c, h * w))
    else:
        cols = _im2col(_pad(x, padding), k, stride, ho, wo)
        out = np.matmul(weights.reshape(f, c * k * k), cols)
    out = out.reshape(n, f, ho, wo)
    if bias is not None:
        out += bias.reshape(1, f, 1, 1)
    return out


def depthwise_conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None,
                             stride: int = 1, padding: int = 0) -> np.ndarray:
    """Per-channel spatial cross-correlation; ``weights`` is (C, 1, K, K)."""
    if x.ndim != 4 or weights.ndim != 4 or weights.shape[1] != 1:
        raise ShapeError(f"depthwise conv expects (C,1,K,K) kernel, got {weights.shape}")
    n, c, h, w = x.shape
    if weights.shape[0] != c:
        raise ShapeError(f"depthwise conv has {weights.shape[0]} kernels for {c} channels")
    k = weights.shape[2]
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"depthwise kernel {k} too large for input {h}x{w}")
    dtype = np.result_type(x, weights)
    out = np.empty((n, c, ho, wo), dtype=dtype)
    _kernels.depthwise_forward(np.ascontiguousarray(x, dtype=dtype),
                               np.ascontiguousarray(weights[:, 0], dtype=dtype), stride, padding, out)
    if bias is not None:
        out += bias.reshape(1, c, 1, 1)
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        s = np.exp(-x)
    s += 1
    return np.reciprocal(s, out=s)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = "layer"
    #: names of learnable arrays in ``params``
    param_names: tuple[str, ...] = ()
    #: names of non-learnable state arrays (batchnorm running statistics)
    buffer_names: tuple[str, ...] = ()

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.trainable = True

    def forward(self, x: np.ndarray, tape: Tape | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, tape: Tape) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind}

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def wants_param_grads(self, tape: Tape) -> bool:
        return tape.param_grads and self.trainable

    def _store_grads(self, tape: Tape, **grads: np.ndarray) -> None:
        tape.grads[id(self)] = grads


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 padding: int = 0, use_bias: bool = True):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding, self.use_bias = kernel, stride, padding, use_bias
        self.param_names = ("weights", "bias") if use_bias else ("weights",)
        self.params["weights"] = np.zeros((out_channels, in_channels, kernel, kernel))
        if use_bias:
            self.params["bias"] = np.zeros(out_channels)

    def config(self) -> dict:
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding,
                "use_bias": self.use_bias}

    def init_params(self, rng):
        fan_in = self.in_channels * self.kernel ** 2
        self.params["weights"] = he_uniform(rng, self.params["weights"].shape, fan_in)
        if self.use_bias:
            self.params["bias"] = np.zeros(self.out_channels)

    def forward(self, x, tape=None):
        check_finite(x, "conv2d input")
        out = conv2d_forward(x, self.params["weights"], self.params.get("bias"), self.stride, self.padding)
        if tape is not None:
            tape.save(self, x)
        return out

    def backward(self, grad, tape):
        x = tape.load(self)
        w = self.params["weights"]
        n, c, h, wd = x.shape
        f, _, k, _ = w.shape
        ho, wo = grad.shape[2:]
        g = grad.reshape(n, f, ho * wo)
        pointwise = k == 1 and self.stride == 1 and self.padding == 0
        cols = x.reshape(n, c, h * wd) if pointwise else _im2col(_pad(x, self.padding), k, self.stride, ho, wo)
        if self.wants_param_grads(tape):
            dw = np.einsum("nfp,nqp->fq", g, cols, optimize=True).reshape(w.shape)
            grads = {"weights": dw}
            if self.use_bias:
                grads["bias"] = grad.sum(axis=(0, 2, 3))
            self._store_grads(tape, **grads)
        dcols = np.matmul(w.reshape(f, -1).T, g)
        if pointwise:
            return dcols.reshape(x.shape)
        dcols = dcols.reshape(n, c, k * k, ho, wo)
        dxp = np.zeros((n, c, h + 2 * self.padding, wd + 2 * self.padding), dtype=dcols.dtype)
        s = self.stride
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, i * k + j]
        p = self.padding
        return dxp[:, :, p:p + h, p:p + wd] if p else dxp


class DepthwiseConv2D(Layer):
    kind = "depthwise_conv2d"

    def __init__(self, channels: int, kernel: int, stride: int = 1, padding: int = 0,
                 use_bias: bool = True):
        super().__init__()
        self.channels, self.kernel, self.stride, self.padding = channels, kernel, stride, padding
        self.use_bias = use_bias
        self.param_names = ("weights", "bias") if use_bias else ("weights",)
        self.params["weights"] = np.zeros((channels, 1, kernel, kernel))
        if use_bias:
            self.params["bias"] = np.zeros(channels)

    def config(self):
        return {"kind": self.kind, "channels": self.channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "use_bias": self.use_bias}

    def init_params(self, rng):
        self.params["weights"] = he_uniform(rng, self.params["weights"].shape, self.kernel ** 2)
        if self.use_bias:
            self.params["bias"] = np.zeros(self.channels)

    def forward(self, x, tape=None):
        check_finite(x, "depthwise_conv2d input")
        out = depthwise_conv2d_forward(x, self.params["weights"], self.params.get("bias"),
                                       self.stride, self.padding)
        if tape is not None:
            tape.save(self, x)
        return out

    def backward(self, grad, tape):
        x = tape.load(self)
        want = self.wants_param_grads(tape)
        w = np.ascontiguousarray(self.params["weights"][:, 0], dtype=grad.dtype)
        dx = np.zeros(x.shape, dtype=grad.dtype)
        dw = np.zeros_like(w)
        _kernels.depthwise_backward(np.ascontiguousarray(x, dtype=grad.dtype), w,
                                    np.ascontiguousarray(grad), self.stride, self.padding, dx, dw, want)
        if want:
            grads = {"weights": dw[:, None]}
            if self.use_bias:
                grads["bias"] = grad.sum(axis=(0, 2, 3))
            self._store_grads(tape, **grads)
        return dx


class Dense(Layer):
    kind = "dense"
    param_names = ("weights", "bias")

    def __init__(self, in_features: int, units: int):
        super().__init__()
        self.in_features, self.units = in_features, units
        self.params["weights"] = np.zeros((in_features, units))
        self.params["bias"] = np.zeros(units)

    def config(self):
        return {"kind": self.kind, "in_features": self.in_features, "units": self.units}

    def init_params(self, rng):
        self.params["weights"] = he_uniform(rng, (self.in_features, self.units), self.in_features)
        self.params["bias"] = np.zeros(self.units)

    def forward(self, x, tape=None):
        check_finite(x, "dense input")
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects (N, {self.in_features}), got {x.shape}")
        if tape is not None:
            tape.save(self, x)
        return x @ self.params["weights"] + self.params["bias"]

    def backward(self, grad, tape):
        x = tape.load(self)
        if self.wants_param_grads(tape):
            self._store_grads(tape, weights=x.T @ grad, bias=grad.sum(axis=0))
        return grad @ self.params["weights"].T


class BatchNorm(Layer):
    """Batch normalization over the channel axis (axis 1) of 2-D or 4-D input.

    A frozen (``trainable=False``) batchnorm always normalizes with its
    running statistics and never updates them, even on a training tape.
    """

    kind = "batchnorm"
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params.update(gamma=np.ones(channels), beta=np.zeros(channels),
                           running_mean=np.zeros(channels), running_var=np.ones(channels))

    def config(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def init_params(self, rng):
        c = self.channels
        self.params.update(gamma=np.ones(c), beta=np.zeros(c),
                           running_mean=np.zeros(c), running_var=np.ones(c))

    def _bshape(self, x):
        return (1, self.channels) + (1,) * (x.ndim - 2)

    def forward(self, x, tape=None):
        check_finite(x, "batchnorm input")
        if x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm over {self.channels} channels got input {x.shape}")
        bs = self._bshape(x)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if tape is not None and tape.train and self.trainable:
            x3 = np.ascontiguousarray(x).reshape(x.shape[0], self.channels, -1)
            xhat, out = np.empty_like(x3), np.empty_like(x3)
            mean, var = np.empty(self.channels), np.empty(self.channels)
            _kernels.batchnorm_train_forward(x3, gamma.astype(x.dtype), beta.astype(x.dtype),
                                             self.eps, xhat, out, mean, var)
            m = self.momentum
            dt = self.params["running_mean"].dtype
            self.params["running_mean"] = (m * self.params["running_mean"] + (1 - m) * mean).astype(dt)
            self.params["running_var"] = (m * self.params["running_var"] + (1 - m) * var).astype(dt)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            tape.save(self, ("batch", xhat, inv_std))
            return out.reshape(x.shape)
        inv_std = 1.0 / np.sqrt(self.params["running_var"].astype(np.float64) + self.eps)
        scale = (gamma * inv_std).astype(x.dtype)
        shift = (beta - self.params["running_mean"] * gamma * inv_std).astype(x.dtype)
        if tape is not None:
            tape.save(self, ("running", x, inv_std))
        return x * scale.reshape(bs) + shift.reshape(bs)

    def backward(self, grad, tape):
        mode, saved, inv_std = tape.load(self)
        bs = self._bshape(grad)
        axes = (0,) + tuple(range(2, grad.ndim))
        gamma = self.params["gamma"]
        if mode == "running":
            if self.wants_param_grads(tape):
                xhat = (saved - self.params["running_mean"].reshape(bs)) * inv_std.astype(grad.dtype).reshape(bs)
                self._store_grads(tape, gamma=(grad * xhat).sum(axis=axes), beta=grad.sum(axis=axes))
            return grad * (gamma * inv_std).astype(grad.dtype).reshape(bs)
        g3 = np.ascontiguousarray(grad).reshape(grad.shape[0], self.channels, -1)
        dx = np.empty_like(g3)
        dgamma, dbeta = np.empty(self.channels), np.empty(self.channels)
        _kernels.batchnorm_train_backward(g3, saved, gamma.astype(np.float64), inv_std, dx, dgamma, dbeta)
        if self.wants_param_grads(tape):
            dt = gamma.dtype
            self._store_grads(tape, gamma=dgamma.astype(dt), beta=dbeta.astype(dt))
        return dx.reshape(grad.shape)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, tape=None):
        check_finite(x, "relu input")
        if tape is not None:
            tape.save(self, x > 0)
        return np.maximum(x, 0)

    def backward(self, grad, tape):
        return grad * tape.load(self)


class Swish(Layer):
    kind = "swish"

    def forward(self, x, tape=None):
        check_finite(x, "swish input")
        s = sigmoid(x)
        if tape is not None:
            tape.save(self, (x, s))
        return x * s

    def backward(self, grad, tape):
        x, s = tape.load(self)
        return grad * (s * (1 + x * (1 - s)))


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, tape=None):
        check_finite(x, "sigmoid input")
        s = sigmoid(x)
        if tape is not None:
            tape.save(self, s)
        return s

    def backward(self, grad, tape):
        s = tape.load(self)
        return grad * s * (1 - s)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, tape=None):
        check_finite(x, "softmax input")
        s = softmax(x)
        if tape is not None:
            tape.save(self, s)
        return s

    def backward(self, grad, tape):
        s = tape.load(self)
        return s * (grad - (grad * s).sum(axis=1, keepdims=True))


class GlobalAveragePool(Layer):
    kind = "global_average_pool"

    def forward(self, x, tape=None):
        check_finite(x, "global_average_pool input")
        if tape is not None:
            tape.save(self, x.shape)
        return x.mean(axis=(2, 3))

    def backward(self, grad, tape):
        n, c, h, w = tape.load(self)
        return np.broadcast_to((grad / (h * w))[:, :, None, None], (n, c, h, w)).copy()


class ZeroPadding2D(Layer):
    kind = "zero_padding2d"

    def __init__(self, padding: int = 1):
        super().__init__()
        self.padding = padding

    def config(self):
        return {"kind": self.kind, "padding": self.padding}

    def forward(self, x, tape=None):
        check_finite(x, "zero_padding2d input")
        if tape is not None:
            tape.save(self, True)
        return _pad(x, self.padding)

    def backward(self, grad, tape):
        tape.load(self)
        p = self.padding
        return grad[:, :, p:-p, p:-p] if p else grad


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, tape=None):
        check_finite(x, "flatten input")
        if tape is not None:
            tape.save(self, x.shape)
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, tape):
        return grad.reshape(tape.load(self))


class Dropout(Layer):
    """Inverted dropout: identity at inference, survivors scaled by 1/(1-rate) in training."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def config(self):
        return {"kind": self.kind, "rate": self.rate}

    def forward(self, x, tape=None):
        check_finite(x, "dropout input")
        if tape is None or not tape.train or self.rate == 0.0:
            if tape is not None:
                tape.save(self, None)
            return x
        keep = tape.rng.random(x.shape, dtype=np.float32) >= self.rate
        mask = keep.astype(x.dtype) / x.dtype.type(1.0 - self.rate)
        tape.save(self, mask)
        return x * mask

    def backward(self, grad, tape):
        mask = tape.load(self)
        return grad if mask is None else grad * mask


class Sequential(Layer):
    """Ordered container; children are addressed by name (``a.b.c``)."""

    kind = "sequential"

    def __init__(self, layers: list[tuple[str, Layer]]):
        super().__init__()
        names = [n for n, _ in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        self.layers = list(layers)

    def children(self):
        return self.layers

    def config(self):
        return {"kind": self.kind,
                "layers": [dict(name=n, **layer.config()) for n, layer in self.layers]}

    def init_params(self, rng):
        for _, layer in self.layers:
            layer.init_params(rng)

    def __getitem__(self, name: str) -> Layer:
        head, _, rest = name.partition(".")
        for n, layer in self.layers:
            if n == head:
                return layer[rest] if rest else layer
        raise KeyError(name)

    def forward(self, x, tape=None):
        for _, layer in self.layers:
            x = layer.forward(x, tape)
        return x

    def backward(self, grad, tape, need_input_grad: bool = True):
        stop = 0
        if not need_input_grad:
            # layers before the first trainable one only need to pass gradients through
            while stop < len(self.layers) and not _any_trainable(self.layers[stop][1]):
                stop += 1
        for _, layer in reversed(self.layers[stop:]):
            grad = layer.backward(grad, tape)
        return grad if stop == 0 else None

    def set_trainable(self, flag: bool) -> None:
        for layer in iter_layers(self):
            layer.trainable = flag


class MBConv(Layer):
    """Inverted residual block: 1x1 expand, depthwise KxK, 1x1 project, each batch-normalized."""

    kind = "mbconv"

    def __init__(self, in_channels: int, out_channels: int, expansion_ratio: int = 4,
                 kernel: int = 3, stride: int = 1):
        super().__init__()
        if expansion_ratio < 1:
            raise ValueError("expansion_ratio must be >= 1")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.expansion_ratio, self.kernel, self.stride = expansion_ratio, kernel, stride
        mid = in_channels * expansion_ratio
        layers: list[tuple[str, Layer]] = []
        if expansion_ratio > 1:
            layers += [("expand", Conv2D(in_channels, mid, 1, use_bias=False)),
                       ("expand_bn", BatchNorm(mid)), ("expand_act", Swish())]
        layers += [("depthwise", DepthwiseConv2D(mid, kernel, stride, (kernel - 1) // 2, use_bias=False)),
                   ("depthwise_bn", BatchNorm(mid)), ("depthwise_act", Swish()),
                   ("project", Conv2D(mid, out_channels, 1, use_bias=False)),
                   ("project_bn", BatchNorm(out_channels))]
        self.body = Sequential(layers)

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels

    def children(self):
        return self.body.layers

    def __getitem__(self, name):
        return self.body[name]

    def config(self):
        return {"kind": self.kind, "in_channels": self.in_channels, "out_channels": self.out_channels,
                "expansion_ratio": self.expansion_ratio, "kernel": self.kernel, "stride": self.stride}

    def init_params(self, rng):
        self.body.init_params(rng)

    def forward(self, x, tape=None):
        out = self.body.forward(x, tape)
        return out + x if self.residual else out

    def backward(self, grad, tape):
        dx = self.body.backward(grad, tape)
        return dx + grad if self.residual else dx


LAYER_TYPES: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Conv2D, DepthwiseConv2D, Dense, BatchNorm, ReLU, Swish, Sigmoid,
                              Softmax, GlobalAveragePool, ZeroPadding2D, Flatten, Dropout, MBConv)
}


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    cfg.pop("name", None)
    if kind == "sequential":
        return Sequential([(c["name"], layer_from_config(c)) for c in cfg["layers"]])
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**cfg)


def iter_layers(root: Layer, prefix: str = "") -> Iterator[Layer]:
    yield from (layer for _, layer in named_layers(root, prefix))


def named_layers(root: Layer, prefix: str = "") -> Iterator[tuple[str, Layer]]:
    """Depth-first (name, layer) pairs of every leaf layer under ``root``."""
    kids = root.children()
    if not kids:
        yield prefix, root
        return
    for name, child in kids:
        yield from named_layers(child, f"{prefix}.{name}" if prefix else name)


def _any_trainable(layer: Layer) -> bool:
    return any(leaf.trainable and leaf.param_names for leaf in iter_layers(layer))


@dataclass
class ParamRef:
    """Handle on one array of one layer; ``name`` is ``<layer path>.<array>``."""

    name: str
    layer: Layer
    key: str

    @property
    def value(self) -> np.ndarray:
        return self.layer.params[self.key]

    @value.setter
    def value(self, v: np.ndarray) -> None:
        self.layer.params[self.key] = v

    @property
    def learnable(self) -> bool:
        return self.key in self.layer.param_names


def param_refs(root: Layer, include_buffers: bool = False) -> list[ParamRef]:
    refs = []
    for path, layer in named_layers(root):
        keys = layer.param_names + (layer.buffer_names if include_buffers else ())
        refs += [ParamRef(f"{path}.{k}", layer, k) for k in keys]
    return refs


def state_dict(root: Layer) -> dict[str, np.ndarray]:
    return {ref.name: ref.value for ref in param_refs(root, include_buffers=True)}


def load_state_dict(root: Layer, state: dict[str, np.ndarray]) -> None:
    refs = param_refs(root, include_buffers=True)
    missing = [r.name for r in refs if r.name not in state]
    if missing:
        raise KeyError(f"state is missing {missing[:3]}")
    for ref in refs:
        if state[ref.name].shape != ref.value.shape:
            raise ShapeError(f"{ref.name}: expected {ref.value.shape}, got {state[ref.name].shape}")
        ref.value = np.array(state[ref.name], copy=True)


def cast(root: Layer, dtype) -> Layer:
    for ref in param_refs(root, include_buffers=True):
        ref.value = ref.value.astype(dtype)
    return root


def gradients(root: Layer, tape: Tape) -> dict[str, np.ndarray]:
    """Parameter gradients recorded on ``tape``; frozen layers are absent."""
    out = {}
    for ref in param_refs(root):
        g = tape.grads_of(ref.layer)
        if g is not None and ref.key in g:
            out[ref.name] = g[ref.key]
    return out


def backward(graph: Layer, tape: Tape, upstream: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradient with respect to the graph input plus all trainable parameters."""
    dx = graph.backward(upstream, tape)
    return dx, gradients(graph, tape)


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_layer: dict[str, float] = field(default_factory=dict)
    n_probes: int = 0

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def grad_check(graph: Layer, x: np.ndarray, n_probes: int = 100, seed: int = 0,
               train: bool = False, h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    The scalar objective is ``sum(output * P)`` for a fixed random projection
    ``P``.  Probes are spread round-robin over the input and every trainable
    parameter array, so each array gets at least ``n_probes // n_arrays``
    coordinates.  Runs in float64; the graph is cast in place.
    """
    cast(graph, np.float64)
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)

    def run():
        tape = Tape(train=train, rng=np.random.default_rng(seed + 1))
        return graph.forward(x, tape), tape

    out, tape = run()
    proj = rng.standard_normal(out.shape)
    dx, grads = backward(graph, tape, proj)

    targets: list[tuple[str, np.ndarray, np.ndarray]] = [("input", x, dx)]
    for ref in param_refs(graph):
        if ref.name in grads:
            targets.append((ref.name, ref.value, grads[ref.name]))

    per_layer: dict[str, float] = {}
    for t in range(n_probes):
        name, arr, grad = targets[t % len(targets)]
        idx = tuple(int(rng.integers(0, d)) for d in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        plus = float(np.sum(run()[0] * proj))
        arr[idx] = orig - h
        minus = float(np.sum(run()[0] * proj))
        arr[idx] = orig
        numeric = (plus - minus) / (2 * h)
        err = relative_error(float(grad[idx]), numeric)
        layer_name = name.rsplit(".", 1)[0]
        per_layer[layer_name] = max(per_layer.get(layer_name, 0.0), err)
    return GradCheckReport(max(per_layer.values(), default=0.0), per_layer, n_probes)
