"""Small classifier families trained inside the unrolled loops.

Two families: `dense-mlp` (optionally zero hidden layers, which makes it a
linear softmax classifier) and `conv-lite` (one 3x3 valid convolution,
then dense layers).  Parameters live in a single flat vector so the whole
model can be treated as one differentiation variable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tensor

CONV_KERNEL = 3

_ACTIVATIONS = ("relu", "tanh")
_FAMILIES = ("dense-mlp", "conv-lite")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; everything about shapes derives from it."""

    family: str
    input_shape: tuple[int, ...]
    classes: int
    widths: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown model family '{self.family}'")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.family == "conv-lite":
            if len(self.input_shape) != 3 or self.input_shape[0] != self.input_shape[1]:
                raise ValueError("conv-lite needs square (H, W, C) input")
            if not self.widths:
                raise ValueError("conv-lite needs widths[0] as the filter count")
            if self.input_shape[0] < CONV_KERNEL:
                raise ValueError("input side smaller than the convolution kernel")

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape, dtype=np.int64))


def param_layout(spec: ModelSpec):
    """Deterministic (name, shape, offset) layout for a flat parameter vector."""
    entries = []
    offset = 0

    def put(name, shape):
        nonlocal offset
        entries.append((name, tuple(shape), offset))
        offset += int(np.prod(shape, dtype=np.int64))

    if spec.family == "dense-mlp":
        dims = [spec.input_size, *spec.widths, spec.classes]
        for i in range(len(dims) - 1):
            put(f"w{i}", (dims[i], dims[i + 1]))
            put(f"b{i}", (dims[i + 1],))
    else:
        side, _, cin = spec.input_shape
        filters = spec.widths[0]
        out_side = side - CONV_KERNEL + 1
        put("conv_w", (CONV_KERNEL, CONV_KERNEL, cin, filters))
        put("conv_b", (filters,))
        dims = [out_side * out_side * filters, *spec.widths[1:], spec.classes]
        for i in range(len(dims) - 1):
            put(f"w{i}", (dims[i], dims[i + 1]))
            put(f"b{i}", (dims[i + 1],))
    return entries


def param_count(spec: ModelSpec) -> int:
    layout = param_layout(spec)
    name, shape, offset = layout[-1]
    return offset + int(np.prod(shape, dtype=np.int64))


def init(spec: ModelSpec, seed: int) -> ParamVector:
    """Zero-mean Gaussian parameters, per-layer scale 1/sqrt(fan-in)."""
    rng = np.random.default_rng(int(seed))
    layout = param_layout(spec)
    flat = np.zeros(param_count(spec))
    fan_in = {}
    for name, shape, offset in layout:
        if name.startswith("conv_w"):
            fan_in_here = shape[0] * shape[1] * shape[2]
        elif name.startswith("w"):
            fan_in_here = shape[0]
        else:  # biases share the scale of their layer's weights
            fan_in_here = fan_in[name.replace("b", "w", 1) if name.startswith("b") else "conv_w"]
        fan_in[name] = fan_in_here
        size = int(np.prod(shape, dtype=np.int64))
        scale = 1.0 / np.sqrt(fan_in_here)
        flat[offset : offset + size] = rng.normal(0.0, scale, size=size)
    return ParamVector(flat, layout)


def _param_views(spec: ModelSpec, theta: Tensor) -> dict[str, Tensor]:
    views = {}
    for name, shape, offset in param_layout(spec):
        size = int(np.prod(shape, dtype=np.int64))
        piece = ad.slice_nd(theta, (offset,), (offset + size,))
        views[name] = ad.reshape(piece, shape)
    return views


def _activate(x: Tensor, activation: str) -> Tensor:
    return ad.relu(x) if activation == "relu" else ad.tanh(x)


def _conv_valid(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 valid convolution via shifted slices and one matmul (im2col)."""
    b, side, _, cin = x.shape
    k = CONV_KERNEL
    out_side = side - k + 1
    filters = kernel.shape[3]
    patches = []
    for di in range(k):
        for dj in range(k):
            patches.append(
                ad.slice_nd(
                    x,
                    (0, di, dj, 0),
                    (b, di + out_side, dj + out_side, cin),
                )
            )
    stacked = ad.concat(patches, axis=3)  # (b, out, out, k*k*cin), (di, dj, c) order
    cols = ad.reshape(stacked, (b * out_side * out_side, k * k * cin))
    kmat = ad.reshape(kernel, (k * k * cin, filters))
    prod = ad.add(ad.matmul(cols, kmat), bias)
    return ad.reshape(prod, (b, out_side, out_side, filters))


def forward(spec: ModelSpec, theta, x) -> Tensor:
    """Logits of shape (batch, classes).

    `theta` may be a ParamVector or a flat tensor on a tape; `x` may be an
    array or a tensor with shape (batch, *input_shape) or (batch, input_size).
    """
    if isinstance(theta, ParamVector):
        theta = ad.constant(theta.flat)
    if not isinstance(x, Tensor):
        x = ad.constant(np.asarray(x, dtype=np.float64))
    params = _param_views(spec, theta)
    batch = x.shape[0]

    if spec.family == "conv-lite":
        if x.shape[1:] != spec.input_shape:
            x = ad.reshape(x, (batch,) + spec.input_shape)
        h = _activate(_conv_valid(x, params["conv_w"], params["conv_b"]), spec.activation)
        h = ad.reshape(h, (batch, h.size // batch))
        hidden = spec.widths[1:]
    else:
        if len(x.shape) != 2:
            x = ad.reshape(x, (batch, spec.input_size))
        h = x
        hidden = spec.widths

    n_dense = len(hidden) + 1
    for i in range(n_dense):
        h = ad.add(ad.matmul(h, params[f"w{i}"]), params[f"b{i}"])
        if i < n_dense - 1:
            h = _activate(h, spec.activation)
    return h


def loss(logits, labels) -> Tensor:
    """Soft-label cross entropy, averaged over the batch.

    Labels are unnormalized non-negative rows; a row may emphasize several
    classes at once. A row of all zeros carries no target and is rejected.
    """
    label_values = labels.values if isinstance(labels, Tensor) else np.asarray(labels)
    if label_values.ndim != 2:
        raise ValueError("labels must be (batch, classes)")
    if np.any(label_values < 0.0):
        raise ValueError("soft labels must be non-negative")
    if np.any(label_values.sum(axis=1) == 0.0):
        raise ValueError("soft label row sums to zero")
    return ad.softmax_cross_entropy(logits, labels, reduction="mean")


def accuracy(logits, hard_labels) -> float:
    """Fraction of argmax predictions matching integer labels.

    np.argmax resolves ties toward the lowest class index, which is the
    documented tie rule.
    """
    logits = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    hard_labels = np.asarray(hard_labels)
    if logits.ndim != 2 or hard_labels.shape != (logits.shape[0],):
        raise ValueError("need (batch, classes) logits and (batch,) labels")
    return float(np.mean(np.argmax(logits, axis=1) == hard_labels))


def one_hot(labels, classes) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError("class label out of range")
    out = np.zeros((labels.shape[0], int(classes)))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
