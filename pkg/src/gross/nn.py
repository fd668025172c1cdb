"""Minimal layer primitives with hand-written gradients.

Feature maps are ``(batch, channels, height, width)``. Convolution weights
use the same axis order as the decomposition code: ``(in_per_group, out,
kernel_h, kernel_w)``, with output channels ``[g * out_per_group, (g + 1) *
out_per_group)`` belonging to group ``g``. Fully-connected weights are
``(in, out)``.

Convolution is cross-correlation with zero padding. Every function is
dtype-preserving, so the same code runs the float32 training path and the
float64 gradient checks.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "conv2d_grouped",
    "conv2d_grouped_grad",
    "relu",
    "relu_grad",
    "maxpool2x2",
    "maxpool2x2_grad",
    "linear",
    "linear_grad",
    "dropout",
    "softmax_cross_entropy",
    "Parameter",
    "ParameterSet",
    "sgd_momentum_step",
]


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x, weight, groups):
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"expected 4-d feature and weight, got {x.shape} and {weight.shape}")
    cin_g, cout = weight.shape[:2]
    if groups < 1 or cout % groups:
        raise ValueError(f"{cout} output channels are not divisible into {groups} groups")
    if x.shape[1] != groups * cin_g:
        raise ValueError(
            f"feature has {x.shape[1]} channels but {groups} groups of {cin_g} inputs were given"
        )


def _im2col(x, groups, kh, kw, stride, padding):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cg = c // groups
    cols = win.reshape(n, groups, cg, ho, wo, kh, kw).transpose(1, 0, 3, 4, 2, 5, 6)
    return cols.reshape(groups, n * ho * wo, cg * kh * kw), (ho, wo)


def _weight_matrix(weight, groups):
    cg, cout, kh, kw = weight.shape
    og = cout // groups
    return weight.reshape(cg, groups, og, kh, kw).transpose(1, 0, 3, 4, 2).reshape(groups, cg * kh * kw, og)


def conv_forward(x, weight, groups=1, stride=1, padding=0, bias=None):
    """Grouped convolution returning ``(output, cols)``; ``cols`` feeds the backward pass."""
    _check_conv(x, weight, groups)
    n = x.shape[0]
    kh, kw = weight.shape[2:]
    cols, (ho, wo) = _im2col(x, groups, kh, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    out = cols @ _weight_matrix(weight, groups)
    out = out.reshape(groups, n, ho, wo, -1).transpose(1, 0, 4, 2, 3).reshape(n, -1, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out, cols


def conv2d_grouped(x, weight, groups=1, stride=1, padding=0, bias=None):
    """Grouped 2-d cross-correlation.

    ``x.shape[1]`` must equal ``groups * weight.shape[0]``. The spatial
    output extent is ``(H + 2 * padding - kernel) // stride + 1``.
    """
    return conv_forward(x, weight, groups, stride, padding, bias)[0]


def conv_backward(dy, x_shape, weight, cols, groups=1, stride=1, padding=0, has_bias=False):
    n, c, h, w = x_shape
    cg, cout, kh, kw = weight.shape
    og = cout // groups
    ho, wo = dy.shape[2:]
    dyg = dy.reshape(n, groups, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, og)

    dw = cols.transpose(0, 2, 1) @ dyg
    dw = dw.reshape(groups, cg, kh, kw, og).transpose(1, 0, 4, 2, 3).reshape(cg, cout, kh, kw)

    dcols = dyg @ _weight_matrix(weight, groups).transpose(0, 2, 1)
    dcols = dcols.reshape(groups, n, ho, wo, cg, kh, kw).transpose(1, 0, 4, 5, 6, 2, 3)
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dy.dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += dcols[:, :, a, b]
    dx = dxp[:, :, padding:padding + h, padding:padding + w]

    db = dy.sum(axis=(0, 2, 3)) if has_bias else None
    return dw, db, np.ascontiguousarray(dx)


def conv2d_grouped_grad(dy, x, weight, groups=1, stride=1, padding=0, has_bias=False):
    """Gradients of :func:`conv2d_grouped` as ``(grad_weight, grad_bias, grad_input)``.

    ``grad_bias`` is ``None`` when ``has_bias`` is false.
    """
    _check_conv(x, weight, groups)
    kh, kw = weight.shape[2:]
    cols, (ho, wo) = _im2col(x, groups, kh, kw, stride, padding)
    if dy.shape != (x.shape[0], weight.shape[1], ho, wo):
        raise ValueError(f"upstream gradient shape {dy.shape} does not match the forward output")
    return conv_backward(dy, x.shape, weight, cols, groups, stride, padding, has_bias)


def relu(x):
    return np.maximum(x, 0)


def relu_grad(dy, x):
    return dy * (x > 0)


def maxpool2x2(x):
    """2x2 max pooling with stride 2.

    Odd trailing rows/columns are dropped. Returns ``(output, argmax)`` with
    the argmax in 0..3 over the window's row-major positions; ties resolve
    to the first.
    """
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ValueError(f"cannot 2x2-pool a {h}x{w} map")
    q = [x[:, :, a:2 * ho:2, b:2 * wo:2] for a in (0, 1) for b in (0, 1)]
    m = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    idx = np.where(q[0] == m, 0, np.where(q[1] == m, 1, np.where(q[2] == m, 2, 3))).astype(np.int8)
    return m, idx


def maxpool2x2_grad(dy, idx, x_shape):
    ho, wo = dy.shape[2:]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for k, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, :, a:2 * ho:2, b:2 * wo:2] = np.where(idx == k, dy, 0)
    return dx


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear layer expects {weight.shape[0]} inputs, got {x.shape[-1]}")
    out = x @ weight
    return out if bias is None else out + bias


def linear_grad(dy, x, weight, has_bias=True):
    """Returns ``(grad_weight, grad_bias, grad_input)``."""
    return x.T @ dy, (dy.sum(axis=0) if has_bias else None), dy @ weight.T


def dropout(x, p, rng=None, train=True):
    """Inverted dropout; returns ``(output, mask)``. A no-op outside training."""
    if not train or p == 0.0:
        return x, None
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return x * mask, mask


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} do not match")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


@dataclass
class Parameter:
    value: np.ndarray
    frozen: bool = False
    buffer: np.ndarray = None

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = np.zeros_like(self.value)


@dataclass
class ParameterSet:
    """Named parameters with per-parameter freeze flags and momentum buffers."""

    params: dict = field(default_factory=dict)

    def add(self, name, value, frozen=False):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = Parameter(value, frozen)
        return self.params[name]

    def __getitem__(self, name):
        return self.params[name].value

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return ((k, p.value) for k, p in self.params.items())

    def set_frozen(self, predicate):
        """Freeze every parameter whose name satisfies ``predicate``; unfreeze the rest."""
        for name, p in self.params.items():
            p.frozen = bool(predicate(name))

    def trainable(self):
        return [k for k, p in self.params.items() if not p.frozen]

    def snapshot(self):
        return {k: p.value.copy() for k, p in self.params.items()}

    def reset_buffers(self):
        for p in self.params.values():
            p.buffer = np.zeros_like(p.value)


def sgd_momentum_step(params, grads, lr, momentum):
    """``buffer = momentum * buffer + grad``; ``value -= lr * buffer``.

    Frozen parameters and parameters without a gradient are left alone.
    Updates happen in place; ``params`` is returned for convenience.
    """
    for name, grad in grads.items():
        p = params.params[name]
        if p.frozen or grad is None:
            continue
        if grad.shape != p.value.shape:
            raise ValueError(f"gradient for {name!r} has shape {grad.shape}, expected {p.value.shape}")
        p.buffer *= momentum
        p.buffer += grad
        p.value -= np.asarray(lr, dtype=p.value.dtype) * p.buffer
    return params
