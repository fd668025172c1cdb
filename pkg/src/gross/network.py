"""Network descriptions and a small forward/backward runtime.

A :class:`NetworkSpec` is an ordered list of layer descriptors. Convolutions
marked ``decompose`` carry a group-size set; a *configuration* is one size
per decomposed convolution, in network order.

:class:`Network` runs a spec against a :class:`~gross.nn.ParameterSet`.
A convolution whose parameters are series parts (``<name>.P.<i>`` etc.)
is evaluated as a bottleneck assembled at the configured group size; one
holding ``<name>.weight`` runs as a dense convolution.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .series import ConvMeta, assemble_grouped, assemble_pointwise, power_of_two_sizes, psi_adjoint, validate_sizes

__all__ = [
    "Conv",
    "MaxPool",
    "ReLU",
    "Flatten",
    "Linear",
    "Dropout",
    "NetworkSpec",
    "Network",
    "four_layer_spec",
    "vgg16_cifar_spec",
    "init_parameters",
    "series_parameters",
    "fixed_parameters",
]


@dataclass(frozen=True)
class Conv:
    name: str
    meta: ConvMeta
    decompose: bool = False
    sizes: tuple = ()

    kind = "conv"


@dataclass(frozen=True)
class MaxPool:
    kind = "maxpool"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class Linear:
    name: str
    in_features: int
    out_features: int
    bias: bool = True

    kind = "fc"


@dataclass(frozen=True)
class Dropout:
    p: float = 0.5

    kind = "dropout"


@dataclass
class NetworkSpec:
    layers: list
    input_shape: tuple = (3, 32, 32)
    num_classes: int = 10
    name: str = "custom"
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(self.input_shape)
        self.shapes = self._walk()
        names = [l.name for l in self.layers if hasattr(l, "name")]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for conv in self.decomposed:
            validate_sizes(conv.meta, conv.sizes)

    def _walk(self):
        # (input shape, output shape) per layer; raises on a broken chain
        shape = self.input_shape
        out = []
        for layer in self.layers:
            if layer.kind == "conv":
                c, h, w = _expect(shape, 3, layer)
                m = layer.meta
                if c != m.in_channels:
                    raise ValueError(f"{layer.name} expects {m.in_channels} channels, gets {c}")
                new = (
                    m.out_channels,
                    nn.conv_output_size(h, m.kernel[0], m.stride, m.padding),
                    nn.conv_output_size(w, m.kernel[1], m.stride, m.padding),
                )
            elif layer.kind == "maxpool":
                c, h, w = _expect(shape, 3, layer)
                new = (c, h // 2, w // 2)
            elif layer.kind == "flatten":
                new = (int(np.prod(shape)),)
            elif layer.kind == "fc":
                (f,) = _expect(shape, 1, layer)
                if f != layer.in_features:
                    raise ValueError(f"{layer.name} expects {layer.in_features} features, gets {f}")
                new = (layer.out_features,)
            else:
                new = shape
            if min(new) < 1:
                raise ValueError(f"layer {layer} produces an empty map")
            out.append((shape, new))
            shape = new
        if shape != (self.num_classes,):
            raise ValueError(f"network emits {shape}, expected ({self.num_classes},)")
        return out

    @property
    def decomposed(self):
        return [l for l in self.layers if l.kind == "conv" and l.decompose]

    @property
    def group_size_sets(self):
        return [l.sizes for l in self.decomposed]

    def check_config(self, config):
        config = tuple(int(s) for s in config)
        sets = self.group_size_sets
        if len(config) != len(sets):
            raise ValueError(f"configuration {config} has {len(config)} entries, expected {len(sets)}")
        for conv, s in zip(self.decomposed, config):
            if s not in conv.sizes:
                raise ValueError(f"group size {s} is not in the set {conv.sizes} of {conv.name}")
        return config


def _expect(shape, ndim, layer):
    if len(shape) != ndim:
        raise ValueError(f"{layer} expects a {ndim}-d input, gets {shape}")
    return shape


def _conv(name, cin, cout, decompose, **kw):
    meta = ConvMeta(cin, cout, (3, 3), stride=1, padding=1, has_bias=True, **kw)
    sizes = power_of_two_sizes(meta) if decompose else ()
    return Conv(name, meta, decompose, sizes)


def four_layer_spec():
    """Four 3x3 convs (32, 32, 64, 64 channels), each followed by ReLU and 2x2
    max pooling, then fc 256->256, ReLU, fc 256->10. All convs but the first
    are decomposed over every power-of-two group size up to their width."""
    layers = []
    for i, (cin, cout) in enumerate([(3, 32), (32, 32), (32, 64), (64, 64)], start=1):
        layers += [_conv(f"conv{i}", cin, cout, decompose=i > 1), ReLU(), MaxPool()]
    layers += [Flatten(), Linear("fc1", 256, 256), ReLU(), Linear("fc2", 256, 10)]
    return NetworkSpec(layers, name="4-layer")


VGG16_CHANNELS = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


def vgg16_cifar_spec(sizes=(1, 4, 16, 32)):
    """VGG-16 without batch norm, CIFAR classifier fc 512->512 and 512->10 with
    dropout. The 12 convs after the first are decomposed over ``sizes``."""
    layers, cin, idx = [], 3, 0
    for item in VGG16_CHANNELS:
        if item == "M":
            layers.append(MaxPool())
            continue
        idx += 1
        meta = ConvMeta(cin, item, (3, 3), stride=1, padding=1)
        decompose = idx > 1
        layers += [Conv(f"conv{idx}", meta, decompose, tuple(sizes) if decompose else ()), ReLU()]
        cin = item
    layers += [Flatten(), Dropout(0.5), Linear("fc1", 512, 512), ReLU(), Dropout(0.5), Linear("fc2", 512, 10)]
    return NetworkSpec(layers, name="vgg16-cifar")


def init_parameters(spec, seed=0, dtype=np.float32):
    """Dense parameters for training from scratch.

    Conv weights: He normal, fan-out mode, ReLU gain (std = sqrt(2 / (out * kh * kw))).
    FC weights: normal with std 0.1. Biases: zero.
    """
    rng = np.random.default_rng(seed)
    params = nn.ParameterSet()
    for layer in spec.layers:
        if layer.kind == "conv":
            m = layer.meta
            std = np.sqrt(2.0 / (m.out_channels * m.kernel[0] * m.kernel[1]))
            params.add(f"{layer.name}.weight", (rng.standard_normal(m.weight_shape) * std).astype(dtype))
            if m.has_bias:
                params.add(f"{layer.name}.bias", np.zeros(m.out_channels, dtype=dtype))
        elif layer.kind == "fc":
            w = rng.standard_normal((layer.in_features, layer.out_features)) * 0.1
            params.add(f"{layer.name}.weight", w.astype(dtype))
            if layer.bias:
                params.add(f"{layer.name}.bias", np.zeros(layer.out_features, dtype=dtype))
    return params


def series_parameters(dense, series, dtype=np.float32):
    """Replace decomposed convs in ``dense`` by the parts of their GroSS layers.

    ``series`` maps layer name to :class:`~gross.series.GroSSLayer`.
    """
    params = nn.ParameterSet()
    for name, value in dense.items():
        layer = name.rsplit(".", 1)[0]
        if layer not in series:
            params.add(name, value.astype(dtype, copy=True))
    for layer, gl in series.items():
        for i in range(len(gl.sizes)):
            params.add(f"{layer}.P.{i}", gl.P_parts[i].astype(dtype))
            params.add(f"{layer}.R.{i}", gl.R_parts[i].astype(dtype))
            params.add(f"{layer}.Q.{i}", gl.Q_parts[i].astype(dtype))
        if gl.bias is not None:
            params.add(f"{layer}.bias", gl.bias.astype(dtype))
    return params


def fixed_parameters(spec, params, config):
    """Collapse a series-parameter set to single-size bottlenecks at ``config``.

    Returns ``(params, sizes)`` where ``sizes`` maps every decomposed layer to
    the singleton set to use with :class:`Network`.
    """
    config = spec.check_config(config)
    sizes = {}
    out = nn.ParameterSet()
    decomposed = {c.name: (c, s) for c, s in zip(spec.decomposed, config)}
    for name, value in params.items():
        layer, _, rest = name.partition(".")
        if layer in decomposed and rest[:2] in ("P.", "R.", "Q."):
            continue
        out.add(name, value.copy())
    for layer, (conv, s) in decomposed.items():
        i = conv.sizes.index(s)
        n = len(conv.sizes)
        parts = {k: [params[f"{layer}.{k}.{j}"] for j in range(n)] for k in "PRQ"}
        out.add(f"{layer}.P.0", assemble_pointwise(parts["P"], i).copy())
        out.add(f"{layer}.R.0", assemble_grouped(parts["R"], conv.sizes, i, conv.meta.width_in).copy())
        out.add(f"{layer}.Q.0", assemble_pointwise(parts["Q"], i).copy())
        sizes[layer] = (s,)
    return out, sizes


class Network:
    """Forward/backward over a spec with a shared parameter set.

    Parameters
    ----------
    spec : NetworkSpec
    params : ParameterSet
    sizes : dict, optional
        Per-layer group-size set override (used for single-configuration
        networks built by :func:`fixed_parameters`).
    """

    def __init__(self, spec, params, sizes=None):
        self.spec = spec
        self.params = params
        self.sizes = {c.name: tuple(c.sizes) for c in spec.decomposed}
        if sizes:
            self.sizes.update({k: tuple(v) for k, v in sizes.items()})
        self._series = {
            c.name: f"{c.name}.P.0" in params for c in spec.layers if c.kind == "conv"
        }

    def default_config(self):
        return tuple(self.sizes[c.name][-1] for c in self.spec.decomposed)

    def check_config(self, config):
        config = tuple(int(s) for s in config)
        names = [c.name for c in self.spec.decomposed]
        if len(config) != len(names):
            raise ValueError(f"configuration {config} has {len(config)} entries, expected {len(names)}")
        for name, s in zip(names, config):
            if s not in self.sizes[name]:
                raise ValueError(f"group size {s} is not available for {name}: {self.sizes[name]}")
        return dict(zip(names, config))

    def series_parameter_names(self):
        """Names of all parameters that belong to series-decomposed layers."""
        out = []
        for c in self.spec.decomposed:
            if self._series[c.name]:
                out += [k for k in self.params if k.startswith(c.name + ".")]
        return out

    # forward / backward -------------------------------------------------

    def forward(self, x, config=None, train=False, rng=None):
        """Returns ``(logits, tape)``; ``tape`` feeds :meth:`backward`."""
        chosen = self.check_config(self.default_config() if config is None else config)
        tape = []
        for layer in self.spec.layers:
            kind = layer.kind
            if kind == "conv":
                if self._series[layer.name]:
                    x, cache = self._gross_forward(layer, x, chosen.get(layer.name))
                else:
                    x, cache = self._conv_forward(layer, x)
            elif kind == "relu":
                cache = x
                x = nn.relu(x)
            elif kind == "maxpool":
                y, idx = nn.maxpool2x2(x)
                cache = (idx, x.shape)
                x = y
            elif kind == "flatten":
                cache = x.shape
                x = x.reshape(x.shape[0], -1)
            elif kind == "fc":
                cache = x
                w = self.params[f"{layer.name}.weight"]
                b = self.params[f"{layer.name}.bias"] if layer.bias else None
                x = nn.linear(x, w, b)
            elif kind == "dropout":
                x, cache = nn.dropout(x, layer.p, rng, train)
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
            tape.append(cache)
        return x, tape

    def backward(self, dy, tape):
        """Gradients of every parameter touched by the forward pass."""
        grads = {}
        for layer, cache in zip(reversed(self.spec.layers), reversed(tape)):
            kind = layer.kind
            if kind == "conv":
                if self._series[layer.name]:
                    dy = self._gross_backward(layer, dy, cache, grads)
                else:
                    dy = self._conv_backward(layer, dy, cache, grads)
            elif kind == "relu":
                dy = nn.relu_grad(dy, cache)
            elif kind == "maxpool":
                dy = nn.maxpool2x2_grad(dy, *cache)
            elif kind == "flatten":
                dy = dy.reshape(cache)
            elif kind == "fc":
                w = self.params[f"{layer.name}.weight"]
                dw, db, dy = nn.linear_grad(dy, cache, w, layer.bias)
                grads[f"{layer.name}.weight"] = dw
                if layer.bias:
                    grads[f"{layer.name}.bias"] = db
            elif kind == "dropout":
                if cache is not None:
                    dy = dy * cache
        return grads

    def loss_and_grads(self, x, labels, config=None, train=True, rng=None):
        logits, tape = self.forward(x, config, train, rng)
        loss, dlogits = nn.softmax_cross_entropy(logits, labels)
        return loss, self.backward(dlogits, tape), logits

    def predict(self, x, config=None, batch_size=500):
        preds = []
        for i in range(0, x.shape[0], batch_size):
            logits, _ = self.forward(x[i:i + batch_size], config, train=False)
            preds.append(logits.argmax(axis=1))
        return np.concatenate(preds)

    # layer helpers ------------------------------------------------------

    def _conv_forward(self, layer, x):
        m = layer.meta
        w = self.params[f"{layer.name}.weight"]
        b = self.params[f"{layer.name}.bias"] if m.has_bias else None
        y, cols = nn.conv_forward(x, w, 1, m.stride, m.padding, b)
        return y, (x.shape, cols)

    def _conv_backward(self, layer, dy, cache, grads):
        m = layer.meta
        x_shape, cols = cache
        w = self.params[f"{layer.name}.weight"]
        dw, db, dx = nn.conv_backward(dy, x_shape, w, cols, 1, m.stride, m.padding, m.has_bias)
        grads[f"{layer.name}.weight"] = dw
        if m.has_bias:
            grads[f"{layer.name}.bias"] = db
        return dx

    def _gross_forward(self, layer, x, s):
        m = layer.meta
        sizes = self.sizes[layer.name]
        i = sizes.index(s)
        n = layer.name
        P = assemble_pointwise([self.params[f"{n}.P.{j}"] for j in range(i + 1)], i)
        R = assemble_grouped([self.params[f"{n}.R.{j}"] for j in range(i + 1)], sizes, i, m.width_in)
        Q = assemble_pointwise([self.params[f"{n}.Q.{j}"] for j in range(i + 1)], i)
        bias = self.params[f"{n}.bias"] if m.has_bias else None
        groups = m.width_in // s
        y1, c1 = nn.conv_forward(x, P)
        y2, c2 = nn.conv_forward(y1, R, groups, m.stride, m.padding)
        y3, c3 = nn.conv_forward(y2, Q, bias=bias)
        return y3, (i, (x.shape, c1, P), (y1.shape, c2, R), (y2.shape, c3, Q))

    def _gross_backward(self, layer, dy, cache, grads):
        m = layer.meta
        n = layer.name
        sizes = self.sizes[n]
        i, (s1, c1, P), (s2, c2, R), (s3, c3, Q) = cache
        groups = m.width_in // sizes[i]
        dQ, db, dy = nn.conv_backward(dy, s3, Q, c3, has_bias=m.has_bias)
        dR, _, dy = nn.conv_backward(dy, s2, R, c2, groups, m.stride, m.padding)
        dP, _, dx = nn.conv_backward(dy, s1, P, c1)
        if m.has_bias:
            grads[f"{n}.bias"] = db
        # Parts above the sampled size do not enter the assembled weights
        # and get exactly zero gradient.
        for j in range(len(sizes)):
            active = j <= i
            grads[f"{n}.P.{j}"] = dP if active else np.zeros_like(self.params[f"{n}.P.{j}"])
            grads[f"{n}.Q.{j}"] = dQ if active else np.zeros_like(self.params[f"{n}.Q.{j}"])
            if active:
                grads[f"{n}.R.{j}"] = psi_adjoint(dR, sizes[j], sizes[i], m.width_in)
            else:
                grads[f"{n}.R.{j}"] = np.zeros_like(self.params[f"{n}.R.{j}"])
        return dx
