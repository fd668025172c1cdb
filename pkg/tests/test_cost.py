import pytest

from gross.cost import layer_macs, network_macs, percent_change
from gross.network import four_layer_spec, vgg16_cifar_spec

# Configuration -> total MACs of the 4-layer network (bias additions included)
FOUR_LAYER = {
    (32, 32, 32): 5_095_178,
    (32, 16, 64): 5_095_178,
    (16, 16, 16): 3_473_162,
    (16, 8, 16): 3_325_706,
    (8, 16, 64): 3_325_706,
    (8, 8, 8): 2_662_154,
    (2, 16, 32): 2_588_426,
    (4, 4, 4): 2_256_650,
    (1, 8, 16): 2_219_786,
    (1, 1, 1): 1_952_522,
}

# (found, baseline, total delta %, grouped delta %)
DELTAS = [
    ((32, 16, 64), (32, 32, 32), 0.00, 0.00),
    ((8, 16, 64), (16, 16, 16), -4.25, -9.09),
    ((2, 16, 32), (8, 8, 8), -2.77, -9.09),
    ((1, 8, 16), (4, 4, 4), -1.63, -9.09),
]


def test_layer_closed_forms():
    assert layer_macs("conv", (32, 32), 3, 32, (3, 3), has_bias=True) == 884_736 + 32_768
    assert layer_macs("fc", in_channels=256, out_channels=10, has_bias=True) == 2_560 + 10
    assert layer_macs("grouped", (16, 16), 32, 32, (3, 3), groups=32) == 73_728


def test_layer_macs_rejects_bad_input():
    with pytest.raises(ValueError):
        layer_macs("pool")
    with pytest.raises(ValueError):
        layer_macs("grouped", (4, 4), 6, 8, (3, 3), groups=4)


def test_full_network():
    assert network_macs(four_layer_spec()).total_macs == 5_127_946


@pytest.mark.parametrize("config,expected", sorted(FOUR_LAYER.items()))
def test_four_layer_table(config, expected):
    assert network_macs(four_layer_spec(), config).total_macs == expected


def test_grouped_macs_of_baseline_and_found():
    spec = four_layer_spec()
    assert network_macs(spec, (16, 16, 16)).grouped_macs == 1_622_016
    assert network_macs(spec, (8, 16, 64)).grouped_macs == 1_474_560


@pytest.mark.parametrize("found,base,total,grouped", DELTAS)
def test_delta_columns(found, base, total, grouped):
    spec = four_layer_spec()
    f, b = network_macs(spec, found), network_macs(spec, base)
    assert round(percent_change(f.total_macs, b.total_macs), 2) == pytest.approx(total)
    assert round(percent_change(f.grouped_macs, b.grouped_macs), 2) == pytest.approx(grouped)


def test_group_size_is_monotone_in_cost():
    spec = four_layer_spec()
    sets = spec.group_size_sets
    base = [s[0] for s in sets]
    for layer, sizes in enumerate(sets):
        costs = []
        for s in sizes:
            cfg = list(base)
            cfg[layer] = s
            costs.append(network_macs(spec, cfg))
        assert all(a.total_macs < b.total_macs for a, b in zip(costs, costs[1:]))
        assert all(a.grouped_macs < b.grouped_macs for a, b in zip(costs, costs[1:]))


def test_per_layer_entries():
    report = network_macs(four_layer_spec(), (16, 16, 16))
    names = [l.name for l in report.per_layer]
    assert names[:2] == ["conv1", "conv1.bias"]
    assert {"conv2.P", "conv2.R", "conv2.Q", "conv2.bias"} <= set(names)
    assert sum(l.macs for l in report.per_layer) == report.total_macs


def test_vgg_costs_are_ordered():
    spec = vgg16_cifar_spec()
    small = network_macs(spec, (1,) * 12).total_macs
    large = network_macs(spec, (32,) * 12).total_macs
    assert small < large < network_macs(spec).total_macs


def test_invalid_config():
    with pytest.raises(ValueError):
        network_macs(four_layer_spec(), (3, 16, 16))
