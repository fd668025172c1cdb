"""Training procedures: from scratch, GroSS series fine-tuning, single
configuration fine-tuning, and evaluation.

All loops use SGD with momentum and a step learning-rate schedule. The lr
for 0-indexed epoch ``e`` is ``initial_lr * decay_factor ** k`` with ``k``
the number of decay epochs ``<= e``, i.e. decay happens at the start of the
named epoch. One generator drives data order, augmentation and dropout;
the configuration sampler has its own.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import augment_batch, iterate_batches
from .network import Network, init_parameters
from .series import assemble

log = logging.getLogger(__name__)

__all__ = [
    "Schedule",
    "Sampler",
    "TrainResult",
    "scratch_schedule",
    "series_schedule",
    "individual_schedule",
    "partial_schedule",
    "sample_configuration",
    "train_from_scratch",
    "finetune_series",
    "finetune_individual",
    "conventional_parameters",
    "evaluate",
    "inactive_parameters",
]

FREEZE_POLICIES = ("all-but-decomposition", "none")


@dataclass(frozen=True)
class Schedule:
    epochs: int
    batch_size: int
    initial_lr: float
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_epochs: tuple = ()
    freeze_policy: str = "none"
    augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"need epochs >= 0 and batch_size >= 1, got {self.epochs}, {self.batch_size}")
        if not self.initial_lr > 0 or not 0 <= self.momentum < 1 or not 0 < self.decay_factor <= 1:
            raise ValueError("learning rate, momentum or decay factor out of range")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"decay epochs {d} must be strictly increasing")
        if d and (d[0] < 0 or d[-1] >= self.epochs):
            raise ValueError(f"decay epochs {d} must lie in [0, {self.epochs})")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ValueError(f"freeze policy must be one of {FREEZE_POLICIES}")

    def lr_at(self, epoch):
        k = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.initial_lr * self.decay_factor ** k

    def scaled(self, epochs):
        """Same schedule stretched to ``epochs``, decay points scaled proportionally."""
        if self.epochs == 0:
            return replace(self, epochs=epochs)
        decay = sorted({round(d * epochs / self.epochs) for d in self.decay_epochs} - {0})
        decay = [d for d in decay if d < epochs]
        return replace(self, epochs=epochs, decay_epochs=tuple(decay))


def scratch_schedule():
    return Schedule(100, 128, 0.1, 0.9, 0.1, (50, 75), "none")


def series_schedule():
    return Schedule(150, 256, 1e-4, 0.9, 0.1, (80, 120), "all-but-decomposition")


def individual_schedule():
    return Schedule(100, 256, 1e-3, 0.9, 0.1, (80,), "all-but-decomposition")


def partial_schedule():
    return Schedule(5, 256, 1e-3, 0.9, 0.1, (), "all-but-decomposition")


@dataclass
class Sampler:
    """Uniform independent draws of one group size per decomposed layer."""

    sets: list
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.sets = [tuple(s) for s in self.sets]
        if not self.sets or any(len(s) == 0 for s in self.sets):
            raise ValueError("sampler needs a non-empty set per layer")
        self.rng = np.random.default_rng(self.seed)


def sample_configuration(state):
    return tuple(int(s[state.rng.integers(len(s))]) for s in state.sets)


@dataclass
class TrainResult:
    params: nn.ParameterSet
    history: list
    network: Network = None


def evaluate(net, config, split, batch_size=500):
    """Top-1 accuracy of ``net`` at ``config`` on ``split`` (no augmentation)."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    preds = net.predict(split.images, config, batch_size)
    return float(np.mean(preds == split.labels))


def inactive_parameters(net, config):
    """Series parts above the sampled size of each layer (not in the assembled weights)."""
    chosen = net.check_config(net.default_config() if config is None else config)
    out = set()
    for name, s in chosen.items():
        if not net._series[name]:
            continue
        sizes = net.sizes[name]
        for j in range(sizes.index(s) + 1, len(sizes)):
            out.update(f"{name}.{k}.{j}" for k in "PRQ")
    return out


def _apply_freeze(net, policy):
    if policy == "none":
        net.params.set_frozen(lambda name: False)
        return
    keep = set(net.series_parameter_names())
    if not keep:
        raise ValueError("freeze policy keeps only decomposition weights, but the network has none")
    net.params.set_frozen(lambda name: name not in keep)


def _run(net, train, schedule, rng, next_config, val=None, val_config=None, on_epoch=None):
    history = []
    net.params.reset_buffers()
    _apply_freeze(net, schedule.freeze_policy)
    aug = augment_batch if schedule.augment else None
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        total_loss = correct = seen = 0
        for x, y in iterate_batches(train, schedule.batch_size, rng, shuffle=True, augment_fn=aug):
            config = next_config()
            loss, grads, logits = net.loss_and_grads(x, y, config, train=True, rng=rng)
            if not np.isfinite(loss):
                raise FloatingPointError(f"loss diverged at epoch {epoch}")
            skip = inactive_parameters(net, config)
            nn.sgd_momentum_step(net.params, {k: g for k, g in grads.items() if k not in skip}, lr, schedule.momentum)
            total_loss += loss * len(y)
            correct += int(np.sum(logits.argmax(axis=1) == y))
            seen += len(y)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": total_loss / max(seen, 1),
            "train_accuracy": correct / max(seen, 1),
            "val_accuracy": evaluate(net, val_config, val) if val is not None else None,
        }
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f train acc %.4f", epoch, lr, row["train_loss"], row["train_accuracy"])
        if on_epoch is not None:
            on_epoch(row)
    return history


def train_from_scratch(spec, train, schedule, seed=0, val=None, dtype=np.float32, on_epoch=None):
    """Train the dense network ``spec`` from a seeded initialization."""
    net = Network(spec, init_parameters(spec, seed, dtype))
    rng = np.random.default_rng(seed + 1)
    history = _run(net, train, schedule, rng, lambda: None, val, None, on_epoch)
    return TrainResult(net.params, history, net)


def finetune_series(net, train, schedule, sampler, seed=0, val=None, val_config=None, on_epoch=None):
    """Fine-tune a GroSS network in place, sampling a configuration per iteration.

    Every mini-batch runs at a freshly drawn configuration. Under the
    ``all-but-decomposition`` policy only the series parameters (base parts,
    deltas and the decomposed layers' biases) move, and parts above the
    sampled size of a layer are left untouched for that step.
    """
    if not net.series_parameter_names():
        raise ValueError("network has no series-decomposed layers")
    rng = np.random.default_rng(seed)
    history = _run(net, train, schedule, rng, lambda: sample_configuration(sampler), val, val_config, on_epoch)
    return TrainResult(net.params, history, net)


def conventional_parameters(spec, dense, series, config, dtype=np.float32):
    """Parameters of the single-configuration network obtained by conventional BTD.

    Decomposed convs get the bottleneck of ``series[name]`` at the chosen
    size (computed in float64, then cast); everything else is copied from
    ``dense``. Returns ``(params, sizes)`` for :class:`Network`.
    """
    config = spec.check_config(config)
    params, sizes = nn.ParameterSet(), {}
    chosen = {c.name: s for c, s in zip(spec.decomposed, config)}
    for name, value in dense.items():
        if name.rsplit(".", 1)[0] not in chosen:
            params.add(name, value.astype(dtype, copy=True))
    for name, s in chosen.items():
        b = assemble(series[name], s)
        params.add(f"{name}.P.0", b.P.astype(dtype))
        params.add(f"{name}.R.0", b.R.astype(dtype))
        params.add(f"{name}.Q.0", b.Q.astype(dtype))
        if b.bias is not None:
            params.add(f"{name}.bias", b.bias.astype(dtype))
        sizes[name] = (s,)
    return params, sizes


def finetune_individual(spec, params, sizes, train, schedule, seed=0, val=None, on_epoch=None):
    """Fine-tune one fixed configuration (see :func:`conventional_parameters`).

    ``params`` is copied; a 0-epoch schedule returns it unchanged.
    """
    fresh = nn.ParameterSet()
    for name, value in params.items():
        fresh.add(name, value.copy())
    net = Network(spec, fresh, sizes)
    config = net.default_config()
    rng = np.random.default_rng(seed)
    history = _run(net, train, schedule, rng, lambda: config, val, config, on_epoch)
    return TrainResult(net.params, history, net)
