"""Multiply-accumulate accounting.

Convention: one MAC per multiply in a convolution or fully-connected inner
product, plus one per bias addition (one per output element). Convolutions
are counted at their own output resolution, before any pooling. Pooling,
ReLU and dropout are free. Under this convention the undecomposed 4-layer
network costs 5,127,946 MACs and the uniform group-size-16 configuration
3,473,162.
"""

from dataclasses import dataclass, field

from .network import NetworkSpec

__all__ = ["LayerCost", "MacReport", "layer_macs", "network_macs", "percent_change"]

KINDS = ("conv", "pointwise", "grouped", "fc", "bias")


def layer_macs(kind, out_hw=(1, 1), in_channels=1, out_channels=1, kernel=(1, 1), groups=1, has_bias=False):
    """MACs of one layer.

    For convolutions (``kind`` in conv/pointwise/grouped) the count is
    ``H * W * out * (in / groups) * kh * kw``; for ``fc`` it is ``in * out``.
    ``has_bias`` adds one per output element.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    if groups < 1 or in_channels % groups or out_channels % groups:
        raise ValueError(f"{groups} groups do not divide {in_channels} -> {out_channels} channels")
    h, w = out_hw
    if kind == "fc":
        macs = in_channels * out_channels
        return macs + (out_channels if has_bias else 0)
    if kind == "bias":
        return h * w * out_channels
    macs = h * w * out_channels * (in_channels // groups) * kernel[0] * kernel[1]
    return macs + (h * w * out_channels if has_bias else 0)


@dataclass(frozen=True)
class LayerCost:
    name: str
    macs: int
    kind: str


@dataclass
class MacReport:
    per_layer: list = field(default_factory=list)

    @property
    def total_macs(self):
        return sum(l.macs for l in self.per_layer)

    @property
    def grouped_macs(self):
        return sum(l.macs for l in self.per_layer if l.kind == "grouped")


def network_macs(spec: NetworkSpec, config=None):
    """MAC report for ``spec``; ``config=None`` costs the undecomposed network.

    A decomposed conv contributes its pointwise ``P``, its grouped conv
    and its pointwise ``Q`` (with the bias), each as a separate entry.
    """
    if config is not None:
        config = spec.check_config(config)
        chosen = dict(zip((c.name for c in spec.decomposed), config))
    else:
        chosen = {}
    report = MacReport()
    for layer, (in_shape, out_shape) in zip(spec.layers, spec.shapes):
        if layer.kind == "conv":
            m = layer.meta
            hw = out_shape[1:]
            if layer.name in chosen:
                s = chosen[layer.name]
                # P runs before the strided grouped conv, Q after it
                report.per_layer += [
                    LayerCost(f"{layer.name}.P", layer_macs("pointwise", in_shape[1:], m.in_channels, m.width_in), "pointwise"),
                    LayerCost(
                        f"{layer.name}.R",
                        layer_macs("grouped", hw, m.width_in, m.width_out, m.kernel, m.groups(s)),
                        "grouped",
                    ),
                    LayerCost(f"{layer.name}.Q", layer_macs("pointwise", hw, m.width_out, m.out_channels), "pointwise"),
                ]
                if m.has_bias:
                    report.per_layer.append(LayerCost(f"{layer.name}.bias", layer_macs("bias", hw, out_channels=m.out_channels), "bias"))
            else:
                report.per_layer.append(
                    LayerCost(layer.name, layer_macs("conv", hw, m.in_channels, m.out_channels, m.kernel), "conv")
                )
                if m.has_bias:
                    report.per_layer.append(LayerCost(f"{layer.name}.bias", layer_macs("bias", hw, out_channels=m.out_channels), "bias"))
        elif layer.kind == "fc":
            report.per_layer.append(LayerCost(layer.name, layer_macs("fc", in_channels=layer.in_features, out_channels=layer.out_features), "fc"))
            if layer.bias:
                report.per_layer.append(LayerCost(f"{layer.name}.bias", layer.out_features, "bias"))
    return report


def percent_change(value, baseline):
    """Signed percentage change of ``value`` relative to ``baseline``."""
    return 100.0 * (value - baseline) / baseline
