"""Command-line entry point: ``gross <command> [options]``.

Exit status: 0 success, 1 runtime failure, 2 configuration or usage error,
3 no configuration satisfies the MAC budget.
"""

import argparse
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config
from .cost import network_macs
from .data import DataFormatError
from .metrics import EPOCH_COLUMNS, EVAL_COLUMNS, MAC_COLUMNS, read_metrics_csv, write_metrics_csv
from .network import Network, four_layer_spec, series_parameters
from .nn import ParameterSet
from .pipeline import (
    NetworkScorer,
    decompose_network,
    evaluation_rows,
    load_data,
    load_state,
    resolve_budget,
    save_state,
    search_space,
)
from .plotting import plot_history, plot_ranking, plot_search
from .search import (
    CachedScorer,
    InfeasibleBudgetError,
    breadth_first_search,
    enumerate_space,
    exhaustive_search,
    format_config,
    TableScorer,
    parse_config,
    topk_average_precision,
)
from .training import Sampler, conventional_parameters, evaluate, finetune_individual, finetune_series, train_from_scratch

log = logging.getLogger("gross")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _groups(text):
    try:
        return parse_config(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _out(cfg, args, name):
    out_dir = args.out or cfg.output
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def _config(args):
    return load_config(args.config) if args.config else ExperimentConfig(spec=four_layer_spec())


def _check(cfg, groups):
    try:
        return cfg.spec.check_config(groups)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _schedule(cfg, name, args):
    sched = cfg.schedules[name]
    if getattr(args, "epochs", None) is not None:
        sched = sched.scaled(args.epochs)
    return sched


def cmd_train_scratch(cfg, args):
    train, val, _, split_seed = load_data(cfg)
    res = train_from_scratch(cfg.spec, train, _schedule(cfg, "scratch", args), seed=cfg.seed, val=val)
    path = _out(cfg, args, "scratch.ckpt")
    save_state(path, cfg.spec, res.params, normalization=train.normalization,
               meta={"stage": "scratch", "split_seed": split_seed, "seed": cfg.seed})
    write_metrics_csv(_out(cfg, args, "scratch_history.csv"), res.history, EPOCH_COLUMNS)
    plot_history(res.history, _out(cfg, args, "scratch_history.png"))
    print(f"wrote {path}; final val accuracy {res.history[-1]['val_accuracy'] if res.history else float('nan'):.4f}")


def cmd_decompose(cfg, args):
    params, _, meta = load_state(args.input, cfg.spec)
    series = decompose_network(cfg.spec, params, cfg.decomposition)
    path = _out(cfg, args, "gross.ckpt")
    kept = ParameterSet()
    for k, v in params.items():
        if k.rsplit(".", 1)[0] not in series:
            kept.add(k, v)
    meta = {k: v for k, v in meta.items() if k not in ("frozen", "series")}
    save_state(path, cfg.spec, kept, series, meta={**meta, "stage": "decomposed"})
    for name, layer in series.items():
        print(f"{name}: sizes {layer.sizes} errors {[f'{e:.4g}' for e in layer.errors]}")
    print(f"wrote {path}")


def _gross_params(cfg, path):
    params, series, meta = load_state(path, cfg.spec)
    if any(k.endswith(".P.0") for k in params):
        return params, series, meta  # already a fine-tuned series checkpoint
    if not series:
        raise UsageError(f"{path} holds no GroSS decomposition; run decompose first")
    return series_parameters(params, series), series, meta


def cmd_finetune(cfg, args):
    params, series, meta = _gross_params(cfg, args.input)
    train, val, _, _ = load_data(cfg)
    net = Network(cfg.spec, params)
    sampler = Sampler(cfg.spec.group_size_sets, seed=cfg.seed)
    res = finetune_series(net, train, _schedule(cfg, "series", args), sampler, seed=cfg.seed, val=val,
                          val_config=net.default_config())
    path = _out(cfg, args, "gross_finetuned.ckpt")
    meta = {k: v for k, v in meta.items() if k not in ("frozen", "series")}
    save_state(path, cfg.spec, net.params, series, meta={**meta, "stage": "finetuned"})
    write_metrics_csv(_out(cfg, args, "series_history.csv"), res.history, EPOCH_COLUMNS)
    plot_history(res.history, _out(cfg, args, "series_history.png"))
    print(f"wrote {path}")


def cmd_finetune_one(cfg, args):
    params, series, _ = load_state(args.input, cfg.spec)
    if not series:
        raise UsageError(f"{args.input} holds no GroSS decomposition; run decompose first")
    if any(k.endswith(".P.0") for k in params):
        raise UsageError(f"{args.input} is a fine-tuned series checkpoint; pass the output of decompose")
    config = _check(cfg, args.groups)
    fixed, sizes = conventional_parameters(cfg.spec, params, series, config)
    train, val, _, _ = load_data(cfg)
    name = "partial" if args.partial else "individual"
    res = finetune_individual(cfg.spec, fixed, sizes, train, _schedule(cfg, name, args), seed=cfg.seed, val=val)
    tag = format_config(config)
    save_state(_out(cfg, args, f"individual_{tag}.ckpt"), cfg.spec, res.params, meta={"stage": name, "config": tag})
    write_metrics_csv(_out(cfg, args, f"individual_{tag}_history.csv"), res.history, EPOCH_COLUMNS)
    acc = evaluate(res.network, config, val)
    print(f"{tag}: val accuracy {acc:.4f}")


def _scoring_network(cfg, path):
    return Network(cfg.spec, _gross_params(cfg, path)[0])


def cmd_eval(cfg, args):
    net = _scoring_network(cfg, args.input)
    _, val, test, _ = load_data(cfg)
    split = test if args.split == "test" else val
    space = search_space(cfg.spec)
    configs = list(enumerate_space(space.sets)) if args.all else [_check(cfg, args.groups or net.default_config())]
    rows = []
    for c in configs:
        rep = space.macs(c)
        rows.append({"config": c, "accuracy": evaluate(net, c, split), "total_macs": rep.total_macs,
                     "grouped_macs": rep.grouped_macs})
    path = _out(cfg, args, f"eval_{args.split}.csv")
    write_metrics_csv(path, rows, EVAL_COLUMNS)
    for r in rows[:20]:
        print(f"{format_config(r['config'])}: {r['accuracy']:.4f}")
    print(f"wrote {path}")


def cmd_macs(cfg, args):
    spec = cfg.spec
    config = None if args.groups is None else _check(cfg, args.groups)
    rep = network_macs(spec, config)
    label = "undecomposed" if config is None else format_config(config)
    print(f"config {label}")
    print(f"total {rep.total_macs}")
    print(f"grouped {rep.grouped_macs}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        rows = [{"layer": l.name, "kind": l.kind, "macs": l.macs} for l in rep.per_layer]
        write_metrics_csv(os.path.join(args.out, f"macs_{label}.csv"), rows, MAC_COLUMNS)


def _budget(cfg, args):
    if args.budget is not None and args.budget_from is not None:
        raise UsageError("--budget and --budget-from are mutually exclusive")
    if args.budget is None and args.budget_from is None:
        named = cfg.budgets.get("baseline")
        if named is None:
            raise UsageError("no budget given (use --budget, --budget-from or budgets.baseline in the config)")
        return named if isinstance(named, int) else resolve_budget(cfg.spec, budget_from=named), named
    if args.budget is not None:
        return resolve_budget(cfg.spec, budget=args.budget), None
    return resolve_budget(cfg.spec, budget_from=_check(cfg, args.budget_from)), tuple(args.budget_from)


def _write_search(cfg, args, result, kind, baseline):
    csv_path = _out(cfg, args, f"search_{kind}.csv")
    write_metrics_csv(csv_path, evaluation_rows(result.evaluated), EVAL_COLUMNS)
    summary = {
        "search": kind,
        "budget": result.budget,
        "best": format_config(result.best),
        "best_accuracy": result.best_accuracy,
        "best_total_macs": result.best_macs.total_macs,
        "best_grouped_macs": result.best_macs.grouped_macs,
        "evaluated": len(result.evaluated),
        "runs": [{**r, "start": format_config(r["start"]), "final": format_config(r["final"])} for r in result.runs],
    }
    with open(_out(cfg, args, f"search_{kind}_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if kind == "bfs":
        rows = [{"run": r, "step": s, "config": c, "accuracy": a, "total_macs": m} for r, s, c, a, m in result.trajectory]
        write_metrics_csv(_out(cfg, args, "search_bfs_trajectory.csv"), rows, ["run", "step", "config", "accuracy", "total_macs"])
    plot_search(result, _out(cfg, args, f"search_{kind}.png"), baseline=baseline, title=f"{kind} search")
    print(f"best {format_config(result.best)} accuracy {result.best_accuracy:.4f} "
          f"MACs {result.best_macs.total_macs} (budget {result.budget})")
    print(f"wrote {csv_path}")


def _scorer(cfg, args):
    if args.scores:
        table = {parse_config(r["config"]): float(r["accuracy"]) for r in read_metrics_csv(args.scores)}
        return TableScorer(table)
    if not args.input:
        raise UsageError("searching needs --input (a GroSS checkpoint) or --scores (an accuracy table)")
    net = _scoring_network(cfg, args.input)
    _, val, _, _ = load_data(cfg)
    return NetworkScorer(net, val)


def cmd_search_exhaustive(cfg, args):
    budget, baseline = _budget(cfg, args)
    result = exhaustive_search(search_space(cfg.spec), budget, CachedScorer(_scorer(cfg, args)))
    _write_search(cfg, args, result, "exhaustive", baseline)


def cmd_search_bfs(cfg, args):
    budget, baseline = _budget(cfg, args)
    starts = []
    if args.seed_from:
        rows = read_metrics_csv(args.seed_from)
        ranked = sorted(rows, key=lambda r: (-float(r["accuracy"]), int(r["total_macs"]), parse_config(r["config"])))
        starts = [parse_config(r["config"]) for r in ranked[:10]]
    result = breadth_first_search(search_space(cfg.spec), budget, CachedScorer(_scorer(cfg, args)),
                                  runs=args.runs, max_steps=args.max_steps, seed=args.search_seed,
                                  start_configs=starts)
    _write_search(cfg, args, result, "bfs", baseline)


def cmd_ap_report(cfg, args):
    pred = {r["config"]: float(r["accuracy"]) for r in read_metrics_csv(args.predicted)}
    true = {r["config"]: float(r["accuracy"]) for r in read_metrics_csv(args.true)}
    common = [c for c in pred if c in true]
    if not common:
        raise UsageError("the two tables share no configurations")
    p, t = [pred[c] for c in common], [true[c] for c in common]
    drops = [d for d in args.drop_top if len(common) - d >= args.k]
    ap = topk_average_precision(p, t, k=args.k, drop_top=drops)
    rows = [{"slice": "All" if d == 0 else f"{d}down", "drop_top": d, "k": args.k, "ap": v} for d, v in ap.items()]
    path = _out(cfg, args, "ap_report.csv")
    write_metrics_csv(path, rows, ["slice", "drop_top", "k", "ap"])
    plot_ranking(p, t, _out(cfg, args, "ap_report.png"), title=f"top-{args.k} ranking")
    for r in rows:
        print(f"{r['slice']}: AP {100 * r['ap']:.2f}%")
    print(f"wrote {path}")


def build_parser():
    parser = argparse.ArgumentParser(prog="gross", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (default: the 4-layer network)")
    common.add_argument("--out", help="output directory (overrides output.directory)")
    common.add_argument("--threads", type=int, help="cap on BLAS/OpenMP worker threads")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-scratch", parents=[common], help="train the dense network from scratch")
    p.add_argument("--epochs", type=int, help="shorten the schedule (decay points scale)")
    p.set_defaults(func=cmd_train_scratch)

    p = sub.add_parser("decompose", parents=[common], help="GroSS-decompose a trained checkpoint")
    p.add_argument("--input", required=True, help="dense checkpoint")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune the GroSS series with sampled configurations")
    p.add_argument("--input", required=True, help="decomposed checkpoint")
    p.add_argument("--epochs", type=int, help="shorten the schedule (decay points scale)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("finetune-one", parents=[common], help="conventionally decompose and fine-tune one configuration")
    p.add_argument("--input", required=True, help="decomposed checkpoint")
    p.add_argument("--groups", type=_groups, required=True, help="configuration, e.g. 8,16,64")
    p.add_argument("--partial", action="store_true", help="use the short 5-epoch schedule")
    p.add_argument("--epochs", type=int, help="shorten the schedule (decay points scale)")
    p.set_defaults(func=cmd_finetune_one)

    p = sub.add_parser("eval", parents=[common], help="validation or test accuracy of configurations")
    p.add_argument("--input", required=True, help="decomposed or fine-tuned checkpoint")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--groups", type=_groups)
    g.add_argument("--all", action="store_true", help="every configuration in the space")
    p.add_argument("--split", choices=("val", "test"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("macs", parents=[common], help="MAC count of a configuration")
    p.add_argument("--groups", type=_groups, help="configuration; omit for the undecomposed network")
    p.set_defaults(func=cmd_macs)

    searches = (
        ("search-exhaustive", cmd_search_exhaustive, "score every configuration under a MAC budget"),
        ("search-bfs", cmd_search_bfs, "greedy one-layer-change search with random restarts under a MAC budget"),
    )
    for name, func, text in searches:
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--input", help="GroSS checkpoint to score configurations with")
        p.add_argument("--scores", help="CSV accuracy table (config,accuracy) to use instead of a network")
        p.add_argument("--budget", type=int, help="MAC budget")
        p.add_argument("--budget-from", type=_groups, help="use this configuration's MACs as the budget")
        if name == "search-bfs":
            p.add_argument("--runs", type=int, default=20, help="random restarts (default 20)")
            p.add_argument("--max-steps", type=int, default=25, help="greedy steps per run (default 25)")
            p.add_argument("--search-seed", type=int, default=0, help="seed for the random start configurations")
            p.add_argument("--seed-from", help="search CSV whose top-10 configurations seed the first runs")
        p.set_defaults(func=func)

    p = sub.add_parser("ap-report", parents=[common], help="top-k average precision of predicted accuracies")
    p.add_argument("--predicted", required=True, help="CSV with config,accuracy (e.g. GroSS sweep)")
    p.add_argument("--true", required=True, help="CSV with config,accuracy (individually fine-tuned)")
    p.add_argument("--k", type=int, default=5, help="size of the true top set (default 5)")
    p.add_argument("--drop-top", type=int, nargs="+", default=[0, 10, 20, 30],
                   help="numbers of true-best configurations to drop before each slice")
    p.set_defaults(func=cmd_ap_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        with threadpool_limits(limits=args.threads):
            args.func(cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"gross: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleBudgetError as exc:
        print(f"gross: search failed: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (CheckpointError, DataFormatError, OSError, ValueError, ArithmeticError) as exc:
        print(f"gross: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
