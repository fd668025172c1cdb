"""YAML experiment configuration.

Example::

    network: 4-layer            # or vgg16-cifar, or a mapping with a layer list
    group_sizes:                # optional per-layer override
      conv4: [1, 4, 16, 64]
    decomposition: {tol: 1.0e-6, max_steps: 5000, seed: 0}
    schedules:
      scratch: {epochs: 10, initial_lr: 0.01}
      series: {epochs: 10}
    data: {directory: /data/cifar-10-batches-bin, train_subset: 5000}
    budgets: {baseline: [16, 16, 16], tight: 2500000}
    output: {directory: runs/desk}
    seed: 0

Schedule entries override the defaults of the matching preset. Unknown keys
anywhere raise :class:`ConfigError` naming the offending key. The data
directory can be overridden with the ``GROSS_DATA_DIR`` environment
variable.
"""

import os
from dataclasses import dataclass, field, fields, replace

import yaml

from .btd import DecomposeOptions
from .network import Conv, Dropout, Flatten, Linear, MaxPool, NetworkSpec, ReLU, four_layer_spec, vgg16_cifar_spec
from .series import ConvMeta, SeriesError, power_of_two_sizes
from .training import Schedule, individual_schedule, partial_schedule, scratch_schedule, series_schedule

__all__ = ["ConfigError", "DataConfig", "ExperimentConfig", "load_config", "parse_config", "DATA_DIR_ENV"]

DATA_DIR_ENV = "GROSS_DATA_DIR"

PRESETS = {
    "scratch": scratch_schedule,
    "series": series_schedule,
    "individual": individual_schedule,
    "partial": partial_schedule,
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class DataConfig:
    directory: str = None
    split_seed: int = None
    val_size: int = 10_000
    records: int = 10_000
    train_subset: int = None
    val_subset: int = None
    subset_seed: int = 0


@dataclass
class ExperimentConfig:
    spec: NetworkSpec
    decomposition: DecomposeOptions = field(default_factory=DecomposeOptions)
    schedules: dict = field(default_factory=lambda: {k: f() for k, f in PRESETS.items()})
    data: DataConfig = field(default_factory=DataConfig)
    budgets: dict = field(default_factory=dict)
    output: str = "."
    seed: int = 0

    def data_directory(self):
        return os.environ.get(DATA_DIR_ENV) or self.data.directory


def _check_keys(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(mapping).__name__}")
    for key in mapping:
        if key not in allowed:
            path = f"{where}.{key}" if where else str(key)
            raise ConfigError(f"unknown key {path!r}; allowed: {', '.join(sorted(allowed))}")


def _conv_layer(d, where):
    _check_keys(d, {"type", "name", "in", "out", "kernel", "stride", "padding", "bias",
                    "width_in", "width_out", "decompose", "sizes"}, where)
    try:
        kernel = d.get("kernel", 3)
        kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        meta = ConvMeta(d["in"], d["out"], kernel, d.get("stride", 1), d.get("padding", 1),
                        d.get("bias", True), d.get("width_in"), d.get("width_out"))
    except KeyError as exc:
        raise ConfigError(f"{where}: missing key {exc.args[0]!r}") from None
    except SeriesError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    decompose = bool(d.get("decompose", False))
    sizes = tuple(d.get("sizes", ()))
    if decompose and not sizes:
        sizes = power_of_two_sizes(meta)
    return Conv(d["name"], meta, decompose, sizes if decompose else ())


def _custom_network(d):
    _check_keys(d, {"name", "input_shape", "num_classes", "layers"}, "network")
    layers = []
    for i, ld in enumerate(d.get("layers", [])):
        where = f"network.layers[{i}]"
        kind = ld.get("type") if isinstance(ld, dict) else None
        if kind == "conv":
            layers.append(_conv_layer(ld, where))
        elif kind == "fc":
            _check_keys(ld, {"type", "name", "in", "out", "bias"}, where)
            layers.append(Linear(ld["name"], ld["in"], ld["out"], ld.get("bias", True)))
        elif kind in ("relu", "maxpool", "flatten"):
            _check_keys(ld, {"type"}, where)
            layers.append({"relu": ReLU, "maxpool": MaxPool, "flatten": Flatten}[kind]())
        elif kind == "dropout":
            _check_keys(ld, {"type", "p"}, where)
            layers.append(Dropout(ld.get("p", 0.5)))
        else:
            raise ConfigError(f"{where}: unknown layer type {kind!r}")
    return layers, d.get("input_shape", (3, 32, 32)), d.get("num_classes", 10), d.get("name", "custom")


def _network(value, group_sizes):
    if value in (None, "4-layer"):
        base = four_layer_spec()
    elif value == "vgg16-cifar":
        base = vgg16_cifar_spec()
    elif isinstance(value, dict):
        base = None
    else:
        raise ConfigError(f"network: unknown network {value!r} (use 4-layer, vgg16-cifar or a layer list)")

    if base is not None:
        layers, shape, classes, name = base.layers, base.input_shape, base.num_classes, base.name
    else:
        layers, shape, classes, name = _custom_network(value)

    group_sizes = dict(group_sizes or {})
    decomposed = {l.name for l in layers if l.kind == "conv" and l.decompose}
    for lname in group_sizes:
        if lname not in decomposed:
            raise ConfigError(f"group_sizes: {lname!r} is not a decomposed conv ({', '.join(sorted(decomposed))})")
    layers = [
        replace(l, sizes=tuple(group_sizes[l.name])) if l.kind == "conv" and l.name in group_sizes else l
        for l in layers
    ]

    # per-layer divisibility diagnostics before building the spec
    problems = []
    for l in layers:
        if l.kind == "conv" and l.decompose:
            m = l.meta
            for s in l.sizes:
                if not isinstance(s, int) or s < 1:
                    problems.append(f"{l.name}: group size {s!r} is not a positive integer")
                elif m.width_in % s:
                    problems.append(f"{l.name}: group size {s} does not divide the input bottleneck width {m.width_in}")
                elif m.width_out % (m.width_in // s):
                    problems.append(
                        f"{l.name}: group size {s} gives {m.width_in // s} groups, "
                        f"which do not divide the output bottleneck width {m.width_out}"
                    )
            srt = sorted(l.sizes)
            for a, b in zip(srt, srt[1:]):
                if isinstance(a, int) and isinstance(b, int) and a >= 1 and b % a:
                    problems.append(f"{l.name}: group size {a} does not divide {b}")
    if problems:
        raise ConfigError("inadmissible group sizes:\n  " + "\n  ".join(problems))
    try:
        layers = [replace(l, sizes=tuple(sorted(l.sizes))) if l.kind == "conv" and l.decompose else l for l in layers]
        return NetworkSpec(layers, tuple(shape), classes, name)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"network: {exc}") from None


def _schedule(name, d):
    if name not in PRESETS:
        raise ConfigError(f"unknown key 'schedules.{name}'; allowed: {', '.join(sorted(PRESETS))}")
    allowed = {f.name for f in fields(Schedule)}
    _check_keys(d, allowed, f"schedules.{name}")
    base = PRESETS[name]()
    try:
        if "epochs" in d and "decay_epochs" not in d:
            base = base.scaled(d["epochs"])
        return replace(base, **d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"schedules.{name}: {exc}") from None


def _budgets(d, spec):
    _check_keys(d, set(d), "budgets")
    out = {}
    for name, value in d.items():
        if isinstance(value, int):
            out[name] = value
        elif isinstance(value, (list, tuple)):
            try:
                out[name] = tuple(spec.check_config(value))
            except ValueError as exc:
                raise ConfigError(f"budgets.{name}: {exc}") from None
        else:
            raise ConfigError(f"budgets.{name}: expected a MAC count or a configuration list")
    return out


def parse_config(raw):
    """Build an :class:`ExperimentConfig` from a parsed YAML mapping."""
    raw = raw or {}
    _check_keys(raw, {"network", "group_sizes", "decomposition", "schedules", "data", "budgets", "output", "seed"}, "")
    spec = _network(raw.get("network"), raw.get("group_sizes"))

    dec = raw.get("decomposition", {}) or {}
    _check_keys(dec, {"tol", "max_steps", "seed", "starts", "probe_steps"}, "decomposition")
    try:
        decomposition = DecomposeOptions(**dec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"decomposition: {exc}") from None

    schedules = {k: f() for k, f in PRESETS.items()}
    sched = raw.get("schedules", {}) or {}
    _check_keys(sched, set(PRESETS), "schedules")
    for name, d in sched.items():
        schedules[name] = _schedule(name, d or {})

    data_raw = raw.get("data", {}) or {}
    _check_keys(data_raw, {f.name for f in fields(DataConfig)}, "data")
    data = DataConfig(**data_raw)

    out = raw.get("output", {}) or {}
    _check_keys(out, {"directory"}, "output")
    return ExperimentConfig(
        spec=spec,
        decomposition=decomposition,
        schedules=schedules,
        data=data,
        budgets=_budgets(raw.get("budgets", {}) or {}, spec),
        output=out.get("directory", "."),
        seed=int(raw.get("seed", 0)),
    )


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(raw)
