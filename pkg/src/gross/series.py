"""Group-size series decomposition of a convolution.

A convolution with weight ``X`` (t in, u out, v x w kernel) is replaced by a
bottleneck: a pointwise conv ``P`` (t -> W_in), a grouped v x w conv with
``R = W_in / s`` groups of ``s`` input channels (W_in -> W_out), and a
pointwise conv ``Q`` (W_out -> u) carrying the original bias. The grouped
weight is stored as ``(s, W_out, v, w)``: input channels within a group
first, all output channels second.

A :class:`GroSSLayer` keeps the bottleneck at the smallest group size plus
one increment per larger size, so the bottleneck at any size in the set is a
sum of (expanded) increments.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .btd import DecomposeOptions, RankPair, decompose

__all__ = [
    "ConvMeta",
    "BottleneckWeights",
    "GroSSLayer",
    "SeriesError",
    "validate_sizes",
    "power_of_two_sizes",
    "psi_expand",
    "psi_adjoint",
    "bottleneck_from_btd",
    "decompose_at",
    "build_series",
    "assemble",
    "assemble_grouped",
    "assemble_pointwise",
    "snap",
    "snapped",
    "dense_equivalent",
]


class SeriesError(ValueError):
    """Inadmissible group sizes or inconsistent bottleneck shapes."""


@dataclass(frozen=True)
class ConvMeta:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: int = 0
    has_bias: bool = True
    width_in: int = None
    width_out: int = None

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.width_in is None:
            object.__setattr__(self, "width_in", self.in_channels)
        if self.width_out is None:
            object.__setattr__(self, "width_out", self.width_in)
        if min(self.in_channels, self.out_channels, *self.kernel, self.width_in, self.width_out) < 1:
            raise SeriesError(f"channel, width and kernel extents must be positive: {self}")
        if self.stride < 1 or self.padding < 0:
            raise SeriesError(f"need stride >= 1 and padding >= 0: {self}")

    @property
    def weight_shape(self):
        return (self.in_channels, self.out_channels) + self.kernel

    def admissible(self, s):
        return s >= 1 and self.width_in % s == 0 and self.width_out % (self.width_in // s) == 0

    def groups(self, s):
        return self.width_in // s

    def rank(self, s):
        """Per-term rank ``(t', u')`` for input group size ``s``."""
        return RankPair(s, self.width_out // self.groups(s))


def validate_sizes(meta, sizes):
    """Return ``sizes`` as a tuple after checking admissibility and divisibility."""
    sizes = tuple(int(s) for s in sizes)
    if not sizes:
        raise SeriesError("group-size set is empty")
    bad = [s for s in sizes if not meta.admissible(s)]
    if bad:
        raise SeriesError(
            f"group sizes {bad} are inadmissible for bottleneck {meta.width_in}->{meta.width_out}"
        )
    for a, b in zip(sizes, sizes[1:]):
        if not a < b or b % a:
            raise SeriesError(f"group sizes must increase and each divide the next; {a} -> {b} fails")
    return sizes


def power_of_two_sizes(meta):
    """All admissible powers of two not exceeding the input bottleneck width."""
    out, s = [], 1
    while s <= meta.width_in:
        if meta.admissible(s):
            out.append(s)
        s *= 2
    return tuple(out)


def _expand_dims(weight, g, h, in_channels):
    if in_channels is None:
        in_channels = weight.shape[1]
    if g < 1 or h % g or in_channels % h:
        raise SeriesError(f"cannot expand group size {g} to {h} over {in_channels} channels")
    n_groups = in_channels // g
    cout = weight.shape[1]
    if cout % n_groups:
        raise SeriesError(f"{cout} output channels do not split into {n_groups} groups")
    return n_groups, cout // n_groups, h // g


def psi_expand(weight, g, h, in_channels=None):
    """Rewrite a group-size ``g`` weight as an equivalent group-size ``h`` weight.

    ``weight`` has shape ``(g, C_out, v, w)``. Each of the ``in_channels / h``
    new groups holds its ``h / g`` constituent groups on a block diagonal,
    zeros elsewhere, so convolving with the result at group size ``h``
    gives the same output. ``in_channels`` defaults to ``C_out``.
    """
    weight = np.asarray(weight)
    if weight.shape[0] != g:
        raise SeriesError(f"weight has {weight.shape[0]} inputs per group, expected {g}")
    n_groups, og, m = _expand_dims(weight, g, h, in_channels)
    if m == 1:
        return weight
    v, w = weight.shape[2:]
    old = weight.reshape(g, n_groups // m, m, og, v, w)
    new = np.zeros((m, g, n_groups // m, m, og, v, w), dtype=weight.dtype)
    for a in range(m):
        new[a, :, :, a] = old[:, :, a]
    return new.reshape(h, -1, v, w)


def psi_adjoint(grad, g, h, in_channels=None):
    """Adjoint of :func:`psi_expand`: pull a group-size ``h`` gradient back to size ``g``."""
    grad = np.asarray(grad)
    if grad.shape[0] != h:
        raise SeriesError(f"gradient has {grad.shape[0]} inputs per group, expected {h}")
    n_groups, og, m = _expand_dims(grad, g, h, in_channels)
    if m == 1:
        return grad
    v, w = grad.shape[2:]
    big = grad.reshape(m, g, n_groups // m, m, og, v, w)
    out = np.empty((g, n_groups // m, m, og, v, w), dtype=grad.dtype)
    for a in range(m):
        out[:, :, a] = big[a, :, :, a]
    return out.reshape(g, -1, v, w)


@dataclass
class BottleneckWeights:
    """Pointwise -> grouped -> pointwise replacement for one convolution.

    Attributes
    ----------
    P : ndarray (t, W_in, 1, 1)
    R : ndarray (s, W_out, v, w)
        Grouped weight with ``groups = W_in / s``.
    Q : ndarray (W_out, u, 1, 1)
    bias : ndarray (u,) or None
        Added after ``Q``.
    """

    P: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    bias: np.ndarray
    groups: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.P.shape[1] != self.R.shape[0] * self.groups:
            raise SeriesError(f"P emits {self.P.shape[1]} channels, grouped conv takes {self.R.shape[0] * self.groups}")
        if self.R.shape[1] != self.Q.shape[0]:
            raise SeriesError(f"grouped conv emits {self.R.shape[1]} channels, Q takes {self.Q.shape[0]}")

    @property
    def group_size(self):
        return self.R.shape[0]

    def forward(self, x):
        y = nn.conv2d_grouped(x, self.P)
        y = nn.conv2d_grouped(y, self.R, self.groups, self.stride, self.padding)
        bias = None if self.bias is None else self.bias.astype(y.dtype)
        return nn.conv2d_grouped(y, self.Q, bias=bias)


def bottleneck_from_btd(decomp, meta, bias=None):
    """Lay out BTD factors and cores as the three bottleneck weights.

    Term ``r``'s factor ``B_r`` fills columns ``[r t', (r+1) t')`` of ``P``,
    ``C_r`` fills rows ``[r u', (r+1) u')`` of ``Q`` and core ``G_r`` becomes
    group ``r`` of the grouped weight. Stride and padding go to the grouped
    conv; the bias goes after ``Q``.
    """
    R, tp, up = decomp.cores.shape[:3]
    t, u, v, w = decomp.shape
    if (t, u) != (meta.in_channels, meta.out_channels) or (v, w) != meta.kernel:
        raise SeriesError(f"decomposition of {decomp.shape} does not match {meta.weight_shape}")
    if R * tp != meta.width_in or R * up != meta.width_out:
        raise SeriesError(
            f"{R} terms of rank ({tp}, {up}) give widths {R * tp}->{R * up}, "
            f"expected {meta.width_in}->{meta.width_out}"
        )
    P = decomp.b_factors.transpose(1, 0, 2).reshape(t, R * tp)[:, :, None, None]
    Rg = decomp.cores.transpose(1, 0, 2, 3, 4).reshape(tp, R * up, v, w)
    Q = decomp.c_factors.transpose(0, 2, 1).reshape(R * up, u)[:, :, None, None]
    if meta.has_bias:
        bias = np.zeros(u) if bias is None else np.asarray(bias, dtype=np.float64)
    else:
        bias = None
    return BottleneckWeights(
        np.ascontiguousarray(P), np.ascontiguousarray(Rg), np.ascontiguousarray(Q),
        bias, R, meta.stride, meta.padding,
    )


def decompose_at(weight, meta, s, opts=DecomposeOptions()):
    """Independent BTD of ``weight`` at group size ``s``; returns ``(decomp, trace)``."""
    if not meta.admissible(s):
        raise SeriesError(f"group size {s} is inadmissible for {meta.width_in}->{meta.width_out}")
    return decompose(weight, meta.groups(s), meta.rank(s), opts)


def _quantum(arrays):
    # Power-of-two grid fine enough to lose < 1 ulp of the largest entry yet
    # coarse enough that all sums/differences of gridded values up to twice
    # the largest magnitude are exact in float64.
    peak = max(float(np.max(np.abs(a))) for a in arrays)
    if peak == 0.0:
        return 1.0
    return float(2.0 ** (np.ceil(np.log2(peak)) - 50))


def snap(x, quantum):
    """Round ``x`` to the nearest multiple of the power-of-two ``quantum``."""
    return np.round(np.asarray(x, dtype=np.float64) / quantum) * quantum


def assemble_grouped(parts, sizes, index, in_channels):
    """Grouped weight at ``sizes[index]`` from the base ``parts[0]`` and increments."""
    acc = parts[0]
    for j in range(1, index + 1):
        acc = psi_expand(acc, sizes[j - 1], sizes[j], in_channels) + parts[j]
    return acc


def assemble_pointwise(parts, index):
    acc = parts[0]
    for j in range(1, index + 1):
        acc = acc + parts[j]
    return acc


@dataclass
class GroSSLayer:
    """Series decomposition of one convolution over a group-size set.

    ``P_parts[0]``, ``R_parts[0]``, ``Q_parts[0]`` are the bottleneck at
    ``sizes[0]``; entry ``i > 0`` holds the increment that the rank at
    ``sizes[i]`` adds (the grouped increment is laid out at ``sizes[i]``).
    ``quanta`` are the grids the parts live on (see :func:`snap`).
    """

    meta: ConvMeta
    sizes: tuple
    P_parts: list
    R_parts: list
    Q_parts: list
    bias: np.ndarray = None
    quanta: dict = field(default_factory=lambda: {"P": 1.0, "R": 1.0, "Q": 1.0})
    errors: list = field(default_factory=list)
    weight: np.ndarray = None

    def __post_init__(self):
        self.sizes = validate_sizes(self.meta, self.sizes)
        n = len(self.sizes)
        if not len(self.P_parts) == len(self.R_parts) == len(self.Q_parts) == n:
            raise SeriesError(f"need {n} parts per weight")
        t, u = self.meta.in_channels, self.meta.out_channels
        v, w = self.meta.kernel
        for i, s in enumerate(self.sizes):
            if self.P_parts[i].shape != (t, self.meta.width_in, 1, 1):
                raise SeriesError(f"P part {i} has shape {self.P_parts[i].shape}")
            if self.R_parts[i].shape != (s, self.meta.width_out, v, w):
                raise SeriesError(f"R part {i} has shape {self.R_parts[i].shape}")
            if self.Q_parts[i].shape != (self.meta.width_out, u, 1, 1):
                raise SeriesError(f"Q part {i} has shape {self.Q_parts[i].shape}")

    @property
    def deltas(self):
        return list(zip(self.P_parts[1:], self.R_parts[1:], self.Q_parts[1:]))

    def index(self, s):
        try:
            return self.sizes.index(int(s))
        except ValueError:
            raise SeriesError(f"group size {s} is not in the series {self.sizes}") from None


def build_series(weight, meta, sizes, opts=DecomposeOptions(), bias=None):
    """Decompose ``weight`` independently at every size and store the increments.

    All bottleneck weights are first snapped to a shared power-of-two grid so
    that ``assemble(layer, s)`` reproduces the rank-``s`` bottleneck exactly.
    """
    sizes = validate_sizes(meta, sizes)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.shape != meta.weight_shape:
        raise SeriesError(f"weight shape {weight.shape} does not match {meta.weight_shape}")

    bottlenecks, errors = [], []
    for s in sizes:
        try:
            decomp, trace = decompose_at(weight, meta, s, opts)
        except ArithmeticError as exc:
            raise type(exc)(f"group size {s}: {exc}") from exc
        bottlenecks.append(bottleneck_from_btd(decomp, meta, bias))
        errors.append(trace[-1])

    quanta = {k: _quantum([getattr(b, k) for b in bottlenecks]) for k in "PRQ"}
    Ps = [snap(b.P, quanta["P"]) for b in bottlenecks]
    Rs = [snap(b.R, quanta["R"]) for b in bottlenecks]
    Qs = [snap(b.Q, quanta["Q"]) for b in bottlenecks]

    P_parts, R_parts, Q_parts = [Ps[0]], [Rs[0]], [Qs[0]]
    for i in range(1, len(sizes)):
        P_parts.append(Ps[i] - Ps[i - 1])
        R_parts.append(Rs[i] - psi_expand(Rs[i - 1], sizes[i - 1], sizes[i], meta.width_in))
        Q_parts.append(Qs[i] - Qs[i - 1])
    return GroSSLayer(
        meta, sizes, P_parts, R_parts, Q_parts,
        bias=bottlenecks[0].bias, quanta=quanta, errors=errors, weight=weight,
    )


def assemble(layer, s):
    """Bottleneck weights of ``layer`` at group size ``s``."""
    i = layer.index(s)
    meta = layer.meta
    return BottleneckWeights(
        P=assemble_pointwise(layer.P_parts, i),
        R=assemble_grouped(layer.R_parts, layer.sizes, i, meta.width_in),
        Q=assemble_pointwise(layer.Q_parts, i),
        bias=layer.bias,
        groups=meta.groups(s),
        stride=meta.stride,
        padding=meta.padding,
    )


def snapped(bottleneck, quanta):
    """``bottleneck`` with P, R and Q rounded to the given grids."""
    return replace(
        bottleneck,
        P=snap(bottleneck.P, quanta["P"]),
        R=snap(bottleneck.R, quanta["R"]),
        Q=snap(bottleneck.Q, quanta["Q"]),
    )


def dense_equivalent(bottleneck, meta):
    """Dense ``(t, u, v, w)`` weight computing the same map as ``bottleneck``."""
    W_in, W_out = meta.width_in, meta.width_out
    s = bottleneck.group_size
    full = psi_expand(bottleneck.R, s, W_in, W_in)  # (W_in, W_out, v, w)
    P = bottleneck.P[:, :, 0, 0]
    Q = bottleneck.Q[:, :, 0, 0]
    return np.einsum("ia,abvw,bj->ijvw", P, full, Q)
