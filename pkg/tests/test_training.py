from collections import Counter

import numpy as np
import pytest

from gross import nn
from gross.btd import DecomposeOptions
from gross.data import DatasetSplit, load_cifar10, write_synthetic_cifar10
from gross.network import Conv, Flatten, Linear, MaxPool, Network, NetworkSpec, ReLU, four_layer_spec, init_parameters
from gross.pipeline import decompose_network, gross_network
from gross.series import ConvMeta
from gross.training import (
    Sampler,
    Schedule,
    conventional_parameters,
    evaluate,
    finetune_individual,
    finetune_series,
    inactive_parameters,
    individual_schedule,
    partial_schedule,
    sample_configuration,
    scratch_schedule,
    series_schedule,
    train_from_scratch,
)


def small_spec():
    layers = [
        Conv("conv1", ConvMeta(3, 8, (3, 3), padding=1)), ReLU(), MaxPool(),
        Conv("conv2", ConvMeta(8, 8, (3, 3), padding=1, width_in=8), True, (1, 2, 4, 8)), ReLU(), MaxPool(),
        Flatten(), Linear("fc", 8 * 8 * 8, 10),
    ]
    return NetworkSpec(layers, name="small")


@pytest.fixture(scope="module")
def splits(tmp_path_factory):
    d = write_synthetic_cifar10(str(tmp_path_factory.mktemp("syn")), records=200, seed=0)
    train, val, _ = load_cifar10(d, val_size=200, records=200)
    return train.subset(512, seed=0), val


@pytest.fixture(scope="module")
def trained(splits):
    train, _ = splits
    return train_from_scratch(small_spec(), train, Schedule(2, 64, 0.02, augment=False), seed=0)


@pytest.fixture
def gross_net(trained):
    spec = small_spec()
    series = decompose_network(spec, trained.params, DecomposeOptions(max_steps=50, starts=1))
    return spec, series, gross_network(spec, trained.params, series)


def mean_loss(net, split, config=None):
    logits, _ = net.forward(split.images, config)
    return nn.softmax_cross_entropy(logits, split.labels)[0]


# --- schedules -----------------------------------------------------------------

def test_series_schedule_decays_at_80_and_120():
    s = series_schedule()
    assert (s.epochs, s.batch_size) == (150, 256)
    assert s.lr_at(0) == s.lr_at(79) == 1e-4
    assert s.lr_at(80) == pytest.approx(1e-5) and s.lr_at(119) == pytest.approx(1e-5)
    assert s.lr_at(120) == pytest.approx(1e-6) and s.lr_at(149) == pytest.approx(1e-6)


def test_preset_defaults():
    ind = individual_schedule()
    assert (ind.epochs, ind.initial_lr, ind.decay_epochs) == (100, 1e-3, (80,))
    assert partial_schedule().epochs == 5
    sc = scratch_schedule()
    assert (sc.initial_lr, sc.decay_epochs) == (0.1, (50, 75))


def test_schedule_scaling_and_validation():
    assert series_schedule().scaled(15).decay_epochs == (8, 12)
    assert scratch_schedule().scaled(10).decay_epochs == (5, 8)
    for kwargs in ({"epochs": -1}, {"batch_size": 0}, {"initial_lr": 0.0}, {"momentum": 1.0},
                   {"decay_epochs": (5, 3)}, {"decay_epochs": (10,)}, {"freeze_policy": "odd"}):
        base = {"epochs": 10, "batch_size": 4, "initial_lr": 0.1}
        with pytest.raises(ValueError):
            Schedule(**{**base, **kwargs})


# --- sampling --------------------------------------------------------------------

def test_sampler_is_uniform_over_252_configs():
    sampler = Sampler(four_layer_spec().group_size_sets, seed=0)
    counts = Counter(sample_configuration(sampler) for _ in range(50_400))
    assert len(counts) == 252
    assert all(140 <= c <= 260 for c in counts.values())


def test_sampler_is_seeded():
    sets = four_layer_spec().group_size_sets
    a, b = Sampler(sets, seed=4), Sampler(sets, seed=4)
    assert [sample_configuration(a) for _ in range(20)] == [sample_configuration(b) for _ in range(20)]
    with pytest.raises(ValueError):
        Sampler([(1, 2), ()])


# --- training ----------------------------------------------------------------------

def test_scratch_smoke_reduces_loss(splits, trained):
    train, _ = splits
    initial = Network(small_spec(), init_parameters(small_spec(), 0))
    assert mean_loss(trained.network, train) < mean_loss(initial, train)
    assert len(trained.history) == 2
    assert set(trained.history[0]) == {"epoch", "lr", "train_loss", "train_accuracy", "val_accuracy"}


def test_four_layer_smoke(splits):
    train, val = splits
    res = train_from_scratch(four_layer_spec(), train, Schedule(2, 64, 0.01), seed=0, val=val)
    init = Network(four_layer_spec(), init_parameters(four_layer_spec(), 0))
    assert mean_loss(res.network, train) < mean_loss(init, train)
    assert res.history[-1]["val_accuracy"] is not None


def test_scratch_is_deterministic(splits):
    train, _ = splits
    sched = Schedule(1, 128, 0.02)
    a = train_from_scratch(small_spec(), train, sched, seed=3)
    b = train_from_scratch(small_spec(), train, sched, seed=3)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert a.history == b.history


def test_series_finetune_moves_only_active_series_parts(splits, gross_net):
    train, _ = splits
    spec, _, net = gross_net
    before = net.params.snapshot()
    sampler = Sampler([(2,)], seed=0)  # always group size 2: parts for 4 and 8 stay inactive
    finetune_series(net, train, Schedule(1, 128, 1e-3, freeze_policy="all-but-decomposition"), sampler)
    changed = {k for k in before if not np.array_equal(before[k], net.params[k])}
    assert changed == {f"conv2.{k}.{j}" for k in "PRQ" for j in (0, 1)} | {"conv2.bias"}


def test_series_finetune_unfrozen_moves_everything_active(splits, gross_net):
    train, _ = splits
    _, _, net = gross_net
    before = net.params.snapshot()
    finetune_series(net, train, Schedule(1, 128, 1e-3), Sampler([(1, 2, 4, 8)], seed=0))
    assert all(not np.array_equal(before[k], net.params[k]) for k in ("conv1.weight", "fc.weight", "conv2.R.3"))


def test_inactive_parameters(gross_net):
    _, _, net = gross_net
    assert inactive_parameters(net, (2,)) == {f"conv2.{k}.{j}" for k in "PRQ" for j in (2, 3)}
    assert inactive_parameters(net, None) == set()


def test_series_finetune_requires_series(trained, splits):
    with pytest.raises(ValueError):
        finetune_series(trained.network, splits[0], Schedule(1, 8, 0.1), Sampler([(1,)]))


def test_individual_zero_epochs_is_identity(gross_net, trained, splits):
    spec, series, _ = gross_net
    params, sizes = conventional_parameters(spec, trained.params, series, (4,))
    res = finetune_individual(spec, params, sizes, splits[0], Schedule(0, 8, 0.1, freeze_policy="all-but-decomposition"))
    assert all(res.params[k].tobytes() == params[k].tobytes() for k in params)
    assert res.params is not params


def test_individual_freezes_non_decomposed(gross_net, trained, splits):
    spec, series, _ = gross_net
    params, sizes = conventional_parameters(spec, trained.params, series, (4,))
    res = finetune_individual(spec, params, sizes, splits[0], Schedule(1, 128, 1e-3, freeze_policy="all-but-decomposition"))
    assert res.params["conv1.weight"].tobytes() == params["conv1.weight"].tobytes()
    assert res.params["conv2.R.0"].tobytes() != params["conv2.R.0"].tobytes()


def test_conventional_matches_series_network(gross_net, trained, splits):
    spec, series, _ = gross_net
    x = splits[1].images[:16].astype(np.float64)
    net64 = gross_network(spec, trained.params, series, np.float64)
    for s in (1, 2, 4, 8):
        params, sizes = conventional_parameters(spec, trained.params, series, (s,), np.float64)
        one = Network(spec, params, sizes)
        np.testing.assert_allclose(one.forward(x)[0], net64.forward(x, (s,))[0], rtol=1e-10, atol=1e-12)


# --- evaluation ----------------------------------------------------------------------

def test_memorized_split_scores_one(gross_net, splits):
    _, _, net = gross_net
    val = splits[1]
    labels = net.predict(val.images, (2,))
    assert evaluate(net, (2,), DatasetSplit(val.images, labels)) == 1.0


def test_switching_configs_needs_no_reload(gross_net, splits):
    _, _, net = gross_net
    val = splits[1]
    scores = [evaluate(net, (s,), val) for s in (8, 1, 8, 4, 1)]
    assert scores[0] == scores[2] and scores[1] == scores[4]


def test_untrained_net_is_near_chance():
    spec = four_layer_spec()
    net = Network(spec, init_parameters(spec, seed=0))
    rng = np.random.default_rng(0)
    images = rng.standard_normal((500, 3, 32, 32)).astype(np.float32)
    labels = np.repeat(np.arange(10), 50)
    acc = evaluate(net, None, DatasetSplit(images, labels))
    assert abs(acc - 0.10) <= 0.02


def test_empty_split_raises(gross_net):
    _, _, net = gross_net
    with pytest.raises(ValueError):
        evaluate(net, (1,), DatasetSplit(np.zeros((0, 3, 32, 32), np.float32), np.zeros(0, np.int64)))
