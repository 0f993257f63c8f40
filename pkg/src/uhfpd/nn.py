"""A small hand-differentiated 1-D CNN/MLP and the ADAM optimizer.

The network is fixed to five Conv1D+ReLU blocks, an average pooling layer,
a flatten layer, a 512-unit ReLU dense layer and a 4-way softmax output.
Activations use a channels-last ``(batch, length, channels)`` layout.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, DataError, ShapeMismatch

N_CONV = 5
DEBUG = False


def _check_finite(a: np.ndarray, where: str) -> None:
    if DEBUG and not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values after {where}")


class Layer:
    """Base layer: parameter-free identity."""

    params: tuple[str, ...] = ()

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.params]

    def gradients(self) -> list[np.ndarray]:
        return [getattr(self, "d" + name) for name in self.params]


class Conv1D(Layer):
    """Valid-padding strided 1-D convolution (cross-correlation).

    ``weight`` has shape ``(out_channels, in_channels, kernel)``.
    """

    params = ("weight", "bias")

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.weight = np.zeros((out_channels, in_channels, kernel), dtype=dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        self.input_grad = True

    def output_length(self, length: int) -> int:
        return (length - self.kernel) // self.stride + 1

    def forward(self, x):
        batch, length, channels = x.shape
        if channels != self.in_channels:
            raise ShapeMismatch(f"Conv1D expects {self.in_channels} channels, got {channels}")
        n_out = self.output_length(length)
        if n_out < 1:
            raise ShapeMismatch(f"input of length {length} is shorter than kernel {self.kernel}")
        # (B, n_out, C, K) -> rows of C*K
        windows = sliding_window_view(x, self.kernel, axis=1)[:, : (n_out - 1) * self.stride + 1: self.stride]
        self._cols = windows.reshape(batch * n_out, channels * self.kernel)
        self._in_shape = x.shape
        w = self.weight.reshape(self.out_channels, -1)
        out = self._cols @ w.T
        out += self.bias
        return out.reshape(batch, n_out, self.out_channels)

    def backward(self, dout):
        batch, n_out, _ = dout.shape
        g = dout.reshape(batch * n_out, self.out_channels)
        self.dweight = (g.T @ self._cols).reshape(self.weight.shape)
        self.dbias = g.sum(axis=0)
        if not self.input_grad:
            return None
        # kernel-major weight layout makes each tap's slice channel-contiguous
        w = self.weight.transpose(0, 2, 1).reshape(self.out_channels, -1)
        dcols = g @ w
        # col2im in stride-sized blocks: tap j = q*stride + r lands in block i + q
        s, c = self.stride, self.in_channels
        q_taps = -(-self.kernel // s)
        if q_taps * s != self.kernel:
            dcols = np.concatenate(
                [dcols, np.zeros((dcols.shape[0], (q_taps * s - self.kernel) * c), dcols.dtype)],
                axis=1)
        dcols = dcols.reshape(batch, n_out, q_taps, s * c)
        length = self._in_shape[1]
        n_blocks = max(n_out + q_taps - 1, -(-length // s))
        blocks = np.zeros((batch, n_blocks, s * c), dtype=dout.dtype)
        for q in range(q_taps):
            blocks[:, q: q + n_out] += dcols[:, :, q]
        return blocks.reshape(batch, n_blocks * s, c)[:, :length]


class ReLU(Layer):
    def forward(self, x):
        self._out = np.maximum(x, 0)
        return self._out

    def backward(self, dout):
        return dout * (self._out > 0)


class AvgPool1D(Layer):
    """Non-overlapping average pooling; ``window=None`` pools globally.

    Trailing positions that do not fill a whole window are dropped.
    """

    def __init__(self, window: int | None):
        self.window = window

    def output_length(self, length: int) -> int:
        return 1 if self.window is None else length // self.window

    def forward(self, x):
        batch, length, channels = x.shape
        w = length if self.window is None else self.window
        n_out = length // w
        if n_out < 1:
            raise ShapeMismatch(f"pool window {w} exceeds input length {length}")
        self._in_shape = x.shape
        self._w = w
        return x[:, : n_out * w].reshape(batch, n_out, w, channels).mean(axis=2)

    def backward(self, dout):
        batch, n_out, channels = dout.shape
        dx = np.zeros(self._in_shape, dtype=dout.dtype)
        dx[:, : n_out * self._w] = np.repeat(dout / self._w, self._w, axis=1)
        return dx


class Flatten(Layer):
    """``(B, L, C) -> (B, L*C)``, position-major and channel-minor."""

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._in_shape)


class Dense(Layer):
    """Fully connected layer; ``weight`` has shape ``(out_features, in_features)``."""

    params = ("weight", "bias")

    def __init__(self, in_features: int, out_features: int, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features), dtype=dtype)
        self.bias = np.zeros(out_features, dtype=dtype)

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeMismatch(f"Dense expects {self.in_features} features, got {x.shape[-1]}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, dout):
        self.dweight = dout.T @ self._x
        self.dbias = dout.sum(axis=0)
        return dout @ self.weight


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), targets].astype(np.float64).mean())
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1
    grad /= n
    return loss, grad


@dataclass(frozen=True)
class ModelSpec:
    """Shape hyperparameters of the network.

    ``pool_window`` is an integer window, ``"global"`` or ``"auto"``; auto
    picks the smallest window >= 2 that keeps the flattened feature count at
    or below ``max_flat`` (falling back to 1 if the conv output is a single
    position).
    """

    input_length: int
    channels: tuple[int, ...] = (16, 32, 64, 64, 128)
    kernel: int = 9
    stride: int = 3
    pool_window: int | str = "auto"
    hidden: int = 512
    n_classes: int = 4
    max_flat: int = 4096

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != N_CONV:
            raise ConfigError(f"the network has exactly {N_CONV} conv layers")
        if self.n_classes != 4:
            raise ConfigError("the output layer has exactly 4 classes")
        if min(self.channels) < 1 or self.kernel < 1 or self.stride < 1 or self.hidden < 1:
            raise ConfigError("channels, kernel, stride and hidden must be positive")
        if self.conv_output_length() < 1:
            raise ConfigError(
                f"input length {self.input_length} too short for kernel {self.kernel}, "
                f"stride {self.stride}"
            )
        window = self.resolved_pool_window()
        if window is not None and window > self.conv_output_length():
            raise ConfigError("pool window exceeds conv output length")

    def conv_output_length(self) -> int:
        length = self.input_length
        for _ in range(N_CONV):
            length = (length - self.kernel) // self.stride + 1
            if length < 1:
                return 0
        return length

    def resolved_pool_window(self) -> int | None:
        if self.pool_window == "global":
            return None
        if self.pool_window != "auto":
            return int(self.pool_window)
        length = self.conv_output_length()
        if length == 1:
            return 1
        for w in range(2, length + 1):
            if (length // w) * self.channels[-1] <= self.max_flat:
                return w
        return length

    def flat_features(self) -> int:
        window = self.resolved_pool_window()
        n = 1 if window is None else self.conv_output_length() // window
        return n * self.channels[-1]


class Network:
    """The five-conv CNN/MLP classifier with hand-written backward pass.

    Parameters are initialised He-uniform (fan-in), biases zero, from
    ``init_seed``.
    """

    def __init__(self, spec: ModelSpec, init_seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.init_seed = init_seed
        self.dtype = np.dtype(dtype)
        layers: list[Layer] = []
        in_ch = 1
        for out_ch in spec.channels:
            layers += [Conv1D(in_ch, out_ch, spec.kernel, spec.stride, self.dtype), ReLU()]
            in_ch = out_ch
        layers += [
            AvgPool1D(spec.resolved_pool_window()),
            Flatten(),
            Dense(spec.flat_features(), spec.hidden, self.dtype),
            ReLU(),
            Dense(spec.hidden, spec.n_classes, self.dtype),
        ]
        # the raw input never needs a gradient during training
        layers[0].input_grad = False
        self.layers = layers
        self._init(init_seed)

    def _init(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if isinstance(layer, (Conv1D, Dense)):
                fan_in = layer.weight[0].size
                limit = math.sqrt(6.0 / fan_in)
                layer.weight[...] = rng.uniform(-limit, limit, size=layer.weight.shape)
                layer.bias[...] = 0

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.parameters()]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.gradients()]

    def set_parameters(self, values) -> None:
        params = self.parameters()
        values = list(values)
        if len(values) != len(params):
            raise ShapeMismatch(f"expected {len(params)} parameter arrays, got {len(values)}")
        for p, v in zip(params, values):
            if p.shape != np.shape(v):
                raise ShapeMismatch(f"parameter shape {p.shape} != {np.shape(v)}")
            p[...] = v

    def astype(self, dtype) -> "Network":
        net = Network(self.spec, self.init_seed, dtype)
        net.set_parameters([p.astype(dtype) for p in self.parameters()])
        return net

    def _as_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != self.spec.input_length:
            raise ShapeMismatch(
                f"model expects inputs of length {self.spec.input_length}, got shape {x.shape}"
            )
        return x[:, :, None]

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Forward pass; ``x`` is ``(batch, length)`` or a single ``(length,)`` vector."""
        h = self._as_input(x)
        for layer in self.layers:
            h = layer.forward(h)
            _check_finite(h, type(layer).__name__)
        return h

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x).astype(np.float64))

    def loss_and_grads(self, x: np.ndarray, targets) -> tuple[float, list[np.ndarray]]:
        """Mean cross-entropy of the batch; gradients are returned in parameter order."""
        logits = self.logits(x)
        targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
        if targets.shape[0] != logits.shape[0]:
            raise ShapeMismatch("one target per input required")
        if targets.min() < 0 or targets.max() >= self.spec.n_classes:
            raise DataError("target outside the output classes")
        loss, g = cross_entropy(logits, targets)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return loss, self.gradients()

    def input_gradient(self, x: np.ndarray, targets) -> np.ndarray:
        """Gradient of the mean loss w.r.t. the network input."""
        logits = self.logits(x)
        _, g = cross_entropy(logits, np.atleast_1d(targets))
        self.layers[0].input_grad = True
        try:
            for layer in reversed(self.layers):
                g = layer.backward(g)
        finally:
            self.layers[0].input_grad = False
        return g[:, :, 0]


def backward(model: Network, x: np.ndarray, target) -> tuple[list[np.ndarray], float]:
    """Gradients and loss ``-log p_target`` for one input vector."""
    loss, grads = model.loss_and_grads(np.asarray(x)[None], [int(target)])
    return [g.copy() for g in grads], loss


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params],
                   **hyper)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """One in-place ADAM update of ``params`` (and ``state``)."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeMismatch("params, grads and optimizer state disagree in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


# -- checkpoint format -------------------------------------------------------
#
#   magic      4s   b"PDNN"
#   version    u16  1
#   input_len  u32
#   n_conv     u8   (5)
#   n_conv x (out_channels u32, kernel u32, stride u32)
#   pool       u32  window, 0 = global
#   hidden     u32
#   n_classes  u32
#   init_seed  i64
#   n_tensors  u32
#   n_tensors x (ndim u8, ndim x u32 dims, float32 LE data in C order)
#
# Tensor order: for each conv layer weight (out, in, kernel) then bias; then
# dense weight (out, in), bias; then output weight, bias. Dense input
# features are ordered position-major, channel-minor.

CKPT_MAGIC = b"PDNN"
CKPT_VERSION = 1


def checkpoint_bytes(net: Network) -> bytes:
    spec = net.spec
    out = [struct.pack("<4sHIB", CKPT_MAGIC, CKPT_VERSION, spec.input_length, N_CONV)]
    for c in spec.channels:
        out.append(struct.pack("<III", c, spec.kernel, spec.stride))
    window = spec.resolved_pool_window()
    out.append(struct.pack("<IIIqI", window or 0, spec.hidden, spec.n_classes,
                           net.init_seed, len(net.parameters())))
    for p in net.parameters():
        out.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        out.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(out)


def network_from_bytes(buf: bytes, dtype=np.float32) -> Network:
    from .exceptions import LengthMismatch, MagicMismatch

    magic, version, input_length, n_conv = struct.unpack_from("<4sHIB", buf, 0)
    if magic != CKPT_MAGIC:
        raise MagicMismatch(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION or n_conv != N_CONV:
        raise DataError(f"unsupported checkpoint (version {version}, {n_conv} conv layers)")
    off = struct.calcsize("<4sHIB")
    convs = []
    for _ in range(n_conv):
        convs.append(struct.unpack_from("<III", buf, off))
        off += 12
    window, hidden, n_classes, init_seed, n_tensors = struct.unpack_from("<IIIqI", buf, off)
    off += struct.calcsize("<IIIqI")
    kernels = {k for _, k, _ in convs}
    strides = {s for _, _, s in convs}
    if len(kernels) != 1 or len(strides) != 1:
        raise DataError("per-layer kernel/stride variation is not supported")
    spec = ModelSpec(
        input_length,
        channels=tuple(c for c, _, _ in convs),
        kernel=kernels.pop(),
        stride=strides.pop(),
        pool_window=window if window else "global",
        hidden=hidden,
        n_classes=n_classes,
    )
    tensors = []
    for _ in range(n_tensors):
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        count = int(np.prod(shape))
        if off + 4 * count > len(buf):
            raise LengthMismatch("truncated checkpoint")
        tensors.append(np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape))
        off += 4 * count
    if off != len(buf):
        raise LengthMismatch("trailing bytes in checkpoint")
    net = Network(spec, init_seed, dtype)
    net.set_parameters(tensors)
    return net


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path, dtype=np.float32) -> Network:
    return network_from_bytes(Path(path).read_bytes(), dtype)


def with_input_length(spec: ModelSpec, length: int) -> ModelSpec:
    return replace(spec, input_length=length)
