"""End-to-end glue: decomposition of a trained network, search scoring,
checkpoint payloads and the desk-scale experiment."""

import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .checkpoint import Checkpoint, load_checkpoint, pack_parameters, pack_series, save_checkpoint, unpack_parameters, unpack_series
from .cost import network_macs
from .data import SPLIT_SEED, load_cifar10
from .metrics import EPOCH_COLUMNS, EVAL_COLUMNS, write_metrics_csv
from .network import Network, series_parameters
from .search import CachedScorer, SearchSpace, enumerate_space, exhaustive_search, format_config
from .series import build_series
from .training import (
    Sampler,
    conventional_parameters,
    evaluate,
    finetune_individual,
    finetune_series,
    train_from_scratch,
)

log = logging.getLogger(__name__)

__all__ = [
    "NetworkScorer",
    "search_space",
    "resolve_budget",
    "decompose_network",
    "gross_network",
    "evaluation_rows",
    "load_data",
    "save_state",
    "load_state",
    "DeskScaleResult",
    "desk_scale_run",
]


class NetworkScorer:
    """Validation accuracy of a (GroSS) network at a configuration.

    The network assembles weights per call, so switching configuration
    needs no reload.
    """

    def __init__(self, net, split, batch_size=500):
        self.net = net
        self.split = split
        self.batch_size = batch_size

    def __call__(self, config):
        return evaluate(self.net, config, self.split, self.batch_size)


def search_space(spec):
    return SearchSpace(spec.group_size_sets, lambda c: network_macs(spec, c))


def resolve_budget(spec, budget=None, budget_from=None):
    """MAC budget from an explicit count or from a baseline configuration."""
    if (budget is None) == (budget_from is None):
        raise ValueError("give exactly one of a MAC budget or a baseline configuration")
    if budget is not None:
        return int(budget)
    return network_macs(spec, spec.check_config(budget_from)).total_macs


def decompose_network(spec, dense, opts, on_layer=None):
    """GroSS-decompose every decomposed conv of ``spec`` using trained ``dense`` weights."""
    out = {}
    for conv in spec.decomposed:
        t0 = time.perf_counter()
        weight = np.asarray(dense[f"{conv.name}.weight"], dtype=np.float64)
        bias = dense[f"{conv.name}.bias"] if conv.meta.has_bias else None
        out[conv.name] = build_series(weight, conv.meta, conv.sizes, opts, bias)
        log.info("decomposed %s over %s in %.1fs", conv.name, conv.sizes, time.perf_counter() - t0)
        if on_layer is not None:
            on_layer(conv.name, out[conv.name])
    return out


def gross_network(spec, dense, series, dtype=np.float32):
    return Network(spec, series_parameters(dense, series, dtype))


def evaluation_rows(evaluated):
    return [
        {"config": e.config, "accuracy": e.accuracy, "total_macs": e.total_macs, "grouped_macs": e.grouped_macs}
        for e in evaluated
    ]


def load_data(cfg):
    """Train/val/test splits for an experiment config, with optional subsets."""
    directory = cfg.data_directory()
    if not directory:
        raise FileNotFoundError("no data directory configured (set data.directory or GROSS_DATA_DIR)")
    split_seed = SPLIT_SEED if cfg.data.split_seed is None else cfg.data.split_seed
    train, val, test = load_cifar10(directory, split_seed, cfg.data.val_size, cfg.data.records)
    train = train.subset(cfg.data.train_subset, cfg.data.subset_seed)
    val = val.subset(cfg.data.val_subset, cfg.data.subset_seed)
    return train, val, test, split_seed


def save_state(path, spec, params, series=None, normalization=None, meta=None):
    """Checkpoint of a network's parameters, optional GroSS series and data constants."""
    ckpt = Checkpoint(meta={"network": spec.name, **(meta or {})})
    pack_parameters(params, ckpt)
    if series:
        pack_series(series, ckpt)
    if normalization is not None:
        # float32 constants survive a JSON float round trip exactly
        ckpt.meta["normalization"] = {"mean": [float(v) for v in normalization.mean],
                                      "std": [float(v) for v in normalization.std]}
    save_checkpoint(path, ckpt)
    return ckpt


def load_state(path, spec=None):
    """Returns ``(params, series, meta)``; checks the network name if ``spec`` is given."""
    ckpt = load_checkpoint(path)
    if spec is not None and ckpt.meta.get("network") != spec.name:
        raise ValueError(f"{path} holds network {ckpt.meta.get('network')!r}, config declares {spec.name!r}")
    return unpack_parameters(ckpt), unpack_series(ckpt), ckpt.meta


@dataclass
class DeskScaleResult:
    budget: int
    best: tuple
    best_accuracy: float
    best_macs: int
    spearman: float
    sampled: list
    predicted: list
    true: list
    sweep_seconds: float
    files: dict


def desk_scale_run(cfg, out_dir, n_sampled=10, seed=0):
    """Scratch training, GroSS decomposition, series fine-tuning, a full
    exhaustive search against the ``baseline`` budget, and a ranking check of
    GroSS-predicted against individually fine-tuned accuracies.

    Schedules come from ``cfg.schedules`` (``scratch``, ``series`` and
    ``partial``). Everything written to ``out_dir`` is deterministic given
    the config and ``seed``.
    """
    os.makedirs(out_dir, exist_ok=True)
    spec = cfg.spec
    train, val, _, split_seed = load_data(cfg)
    files = {}

    scratch = train_from_scratch(spec, train, cfg.schedules["scratch"], seed=seed, val=val)
    files["scratch"] = os.path.join(out_dir, "scratch_history.csv")
    write_metrics_csv(files["scratch"], scratch.history, EPOCH_COLUMNS)

    series = decompose_network(spec, scratch.params, cfg.decomposition)
    net = gross_network(spec, scratch.params, series)
    sampler = Sampler(spec.group_size_sets, seed=seed)
    baseline = cfg.budgets.get("baseline", (16, 16, 16))
    tuned = finetune_series(net, train, cfg.schedules["series"], sampler, seed=seed, val=val, val_config=baseline)
    files["series"] = os.path.join(out_dir, "series_history.csv")
    write_metrics_csv(files["series"], tuned.history, EPOCH_COLUMNS)

    space = search_space(spec)
    budget = baseline if isinstance(baseline, int) else resolve_budget(spec, budget_from=baseline)
    scorer = CachedScorer(NetworkScorer(net, val))
    t0 = time.perf_counter()
    for config in enumerate_space(space.sets):  # one process, no reloads
        scorer(config)
    sweep_seconds = time.perf_counter() - t0
    result = exhaustive_search(space, budget, scorer)

    all_rows = [
        {"config": c, "accuracy": scorer.cache[c], "total_macs": space.total(c), "grouped_macs": space.macs(c).grouped_macs}
        for c in enumerate_space(space.sets)
    ]
    files["sweep"] = os.path.join(out_dir, "sweep.csv")
    write_metrics_csv(files["sweep"], all_rows, EVAL_COLUMNS)
    files["search"] = os.path.join(out_dir, "search_exhaustive.csv")
    write_metrics_csv(files["search"], evaluation_rows(result.evaluated), EVAL_COLUMNS)

    rng = np.random.default_rng(seed)
    configs = list(enumerate_space(space.sets))
    sampled = [configs[i] for i in sorted(rng.choice(len(configs), size=n_sampled, replace=False))]
    true = []
    for k, config in enumerate(sampled):
        params, sizes = conventional_parameters(spec, scratch.params, series, config)
        res = finetune_individual(spec, params, sizes, train, cfg.schedules["partial"], seed=seed + k)
        true.append(evaluate(res.network, config, val))
    predicted = [scorer.cache[c] for c in sampled]
    rho = float(spearmanr(predicted, true)[0])
    files["ranking"] = os.path.join(out_dir, "ranking.csv")
    write_metrics_csv(
        files["ranking"],
        [{"config": c, "predicted": p, "true": t} for c, p, t in zip(sampled, predicted, true)],
        ["config", "predicted", "true"],
    )

    summary = {
        "budget": budget,
        "best": format_config(result.best),
        "best_accuracy": result.best_accuracy,
        "best_macs": result.best_macs.total_macs,
        "spearman": rho,
        "split_seed": split_seed,
    }
    files["summary"] = os.path.join(out_dir, "summary.json")
    with open(files["summary"], "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("sweep of %d configurations took %.1fs", len(configs), sweep_seconds)
    return DeskScaleResult(
        budget, result.best, result.best_accuracy, result.best_macs.total_macs, rho,
        sampled, predicted, true, sweep_seconds, files,
    )
