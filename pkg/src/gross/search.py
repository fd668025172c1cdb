"""Group-size configuration search under a MAC budget.

Configurations are tuples with one group size per decomposed layer. A
scorer is any callable ``config -> accuracy``; :class:`TableScorer` wraps a
fixed lookup table and :class:`CachedScorer` memoises an expensive one.
Accuracy ties are broken by lower total MACs, then by the lexicographically
smallest configuration.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SearchSpace",
    "SearchResult",
    "Evaluation",
    "InfeasibleBudgetError",
    "TableScorer",
    "CachedScorer",
    "enumerate_space",
    "space_size",
    "neighbors",
    "exhaustive_search",
    "breadth_first_search",
    "topk_average_precision",
    "format_config",
    "parse_config",
]

MAX_START_ATTEMPTS = 10_000


class InfeasibleBudgetError(RuntimeError):
    """No configuration satisfies the MAC budget."""


def format_config(config):
    return "-".join(str(s) for s in config)


def parse_config(text):
    parts = text.replace(",", "-").split("-")
    try:
        return tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise ValueError(f"cannot parse configuration {text!r}") from None


@dataclass
class SearchSpace:
    """Group-size sets per layer plus a cost function ``config -> MacReport``."""

    sets: list
    cost: callable

    def __post_init__(self):
        self.sets = [tuple(sorted(set(int(s) for s in ss))) for ss in self.sets]
        if not self.sets or any(not ss for ss in self.sets):
            raise ValueError("every layer needs a non-empty group-size set")
        self._cost_cache = {}

    def macs(self, config):
        config = tuple(config)
        if config not in self._cost_cache:
            self._cost_cache[config] = self.cost(config)
        return self._cost_cache[config]

    def total(self, config):
        return self.macs(config).total_macs

    def contains(self, config):
        return len(config) == len(self.sets) and all(s in ss for s, ss in zip(config, self.sets))


@dataclass(frozen=True)
class Evaluation:
    config: tuple
    accuracy: float
    total_macs: int
    grouped_macs: int


@dataclass
class SearchResult:
    """Outcome of a search.

    ``trajectory`` holds ``(run, step, config, accuracy, total_macs)`` tuples
    (exhaustive search uses run 0 and the enumeration index as step).
    ``evaluated`` lists every distinct configuration scored, in first-seen order.
    """

    best: tuple
    best_accuracy: float
    best_macs: object
    budget: int
    trajectory: list = field(default_factory=list)
    runs: list = field(default_factory=list)
    evaluated: list = field(default_factory=list)


class TableScorer:
    """Scores from a fixed ``{config: accuracy}`` mapping."""

    def __init__(self, table):
        self.table = {tuple(k): float(v) for k, v in table.items()}

    def __call__(self, config):
        return self.table[tuple(config)]


class CachedScorer:
    """Memoising wrapper that also records evaluation order."""

    def __init__(self, scorer):
        self.scorer = scorer
        self.cache = {}
        self.order = []

    def __call__(self, config):
        config = tuple(config)
        if config not in self.cache:
            self.cache[config] = float(self.scorer(config))
            self.order.append(config)
        return self.cache[config]


def enumerate_space(sets):
    """Lazily yield every configuration in lexicographic order."""
    return itertools.product(*[tuple(sorted(ss)) for ss in sets])


def space_size(sets):
    return math.prod(len(ss) for ss in sets)


def neighbors(config, sets):
    """Configurations that differ from ``config`` in exactly one layer."""
    out = []
    for i, (s, ss) in enumerate(zip(config, sets)):
        for alt in sorted(ss):
            if alt != s:
                out.append(config[:i] + (alt,) + config[i + 1:])
    return out


def _better(a, b):
    # a, b are (accuracy, total_macs, config); True if a beats b
    if a[0] != b[0]:
        return a[0] > b[0]
    if a[1] != b[1]:
        return a[1] < b[1]
    return a[2] < b[2]


def _evaluation(space, scorer, config):
    report = space.macs(config)
    return Evaluation(config, scorer(config), report.total_macs, report.grouped_macs)


def exhaustive_search(space, budget, scorer):
    """Score every configuration within ``budget`` MACs and return the best.

    Raises :class:`InfeasibleBudgetError` when nothing fits the budget.
    """
    scorer = scorer if isinstance(scorer, CachedScorer) else CachedScorer(scorer)
    evaluated, best = [], None
    for config in enumerate_space(space.sets):
        if space.total(config) > budget:
            continue
        ev = _evaluation(space, scorer, config)
        evaluated.append(ev)
        key = (ev.accuracy, ev.total_macs, ev.config)
        if best is None or _better(key, best):
            best = key
    if best is None:
        raise InfeasibleBudgetError(f"no configuration fits a budget of {budget} MACs")
    trajectory = [(0, i, e.config, e.accuracy, e.total_macs) for i, e in enumerate(evaluated)]
    return SearchResult(best[2], best[0], space.macs(best[2]), budget, trajectory, [], evaluated)


def _random_feasible(space, budget, rng):
    for _ in range(MAX_START_ATTEMPTS):
        config = tuple(int(ss[rng.integers(len(ss))]) for ss in space.sets)
        if space.total(config) <= budget:
            return config
    raise InfeasibleBudgetError(
        f"no configuration under {budget} MACs found in {MAX_START_ATTEMPTS} random draws"
    )


def breadth_first_search(space, budget, scorer, runs=20, max_steps=25, seed=0, start_configs=()):
    """Greedy neighbour search restarted ``runs`` times.

    Each run starts from ``start_configs[run]`` when given (e.g. the top
    configurations of a search at a smaller budget), otherwise from a
    uniformly drawn configuration within budget. At every step all
    one-layer neighbours within budget are scored and the run moves to the
    most accurate one if it beats the current configuration; it stops after
    ``max_steps`` moves or at a local optimum. The best configuration over
    all runs is returned.
    """
    scorer = scorer if isinstance(scorer, CachedScorer) else CachedScorer(scorer)
    rng = np.random.default_rng(seed)
    start_configs = [tuple(c) for c in start_configs]
    trajectory, summaries, best = [], [], None

    for run in range(runs):
        if run < len(start_configs):
            current = start_configs[run]
            if not space.contains(current) or space.total(current) > budget:
                raise InfeasibleBudgetError(f"start configuration {current} exceeds the budget {budget}")
        else:
            current = _random_feasible(space, budget, rng)
        cur = _evaluation(space, scorer, current)
        trajectory.append((run, 0, cur.config, cur.accuracy, cur.total_macs))
        steps = 0
        while steps < max_steps:
            cand = None
            for nb in neighbors(cur.config, space.sets):
                if space.total(nb) > budget:
                    continue
                ev = _evaluation(space, scorer, nb)
                key = (ev.accuracy, ev.total_macs, ev.config)
                if cand is None or _better(key, (cand.accuracy, cand.total_macs, cand.config)):
                    cand = ev
            if cand is None or not cand.accuracy > cur.accuracy:
                break
            cur = cand
            steps += 1
            trajectory.append((run, steps, cur.config, cur.accuracy, cur.total_macs))
        summaries.append({"run": run, "start": current, "final": cur.config, "accuracy": cur.accuracy,
                          "total_macs": cur.total_macs, "steps": steps})
        key = (cur.accuracy, cur.total_macs, cur.config)
        if best is None or _better(key, best):
            best = key

    evaluated = [_evaluation(space, scorer, c) for c in scorer.order if space.total(c) <= budget]
    return SearchResult(best[2], best[0], space.macs(best[2]), budget, trajectory, summaries, evaluated)


def top_configs(result, k=10):
    """The ``k`` most accurate configurations evaluated by a search."""
    ranked = sorted(result.evaluated, key=lambda e: (-e.accuracy, e.total_macs, e.config))
    return [e.config for e in ranked[:k]]


def _average_precision(predicted, positives):
    order = sorted(range(len(predicted)), key=lambda i: -predicted[i])  # stable
    hits, precisions = 0, []
    for rank, i in enumerate(order, start=1):
        if i in positives:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def topk_average_precision(predicted, true, k=5, drop_top=(0, 10, 20, 30)):
    """Average precision of a predicted ranking against the true top ``k``.

    For every ``X`` in ``drop_top`` the ``X`` configurations with the highest
    true score are removed first; the positives are then the true top ``k``
    of what remains. Items are ranked by predicted score (descending, ties
    in input order) and AP is the mean precision at each positive's rank.

    Returns ``{X: ap}`` with AP as a fraction in [0, 1].
    """
    predicted = [float(p) for p in predicted]
    true = [float(t) for t in true]
    if len(predicted) != len(true):
        raise ValueError("predicted and true scores differ in length")
    by_true = sorted(range(len(true)), key=lambda i: -true[i])  # stable
    out = {}
    for x in drop_top:
        keep = sorted(by_true[x:])
        if k > len(keep) or k < 1:
            raise ValueError(f"cannot take the top {k} of {len(keep)} configurations left after dropping {x}")
        remaining_rank = sorted(range(len(keep)), key=lambda j: -true[keep[j]])
        positives = set(remaining_rank[:k])
        out[x] = _average_precision([predicted[i] for i in keep], positives)
    return out
