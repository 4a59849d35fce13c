import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointclimb.exceptions import InvalidArgumentError
from pointclimb.sampler import (
    SCENARIO_SHAPES,
    SamplerConfig,
    Scenario,
    build_scenario,
    fixed_scenario,
    sample_task_sizes,
)


def test_low_equals_high_forces_sizes():
    assert sample_task_sizes(SamplerConfig(40, 5, 5, 3)) == [5] * 8


def test_remainder_becomes_last_task():
    assert sample_task_sizes(SamplerConfig(7, 5, 5, 0)) == [5, 2]


def test_single_task_holds_everything():
    sc = build_scenario(SamplerConfig(4, 4, 4, 9))
    assert sc.num_tasks == 1
    assert sorted(sc.tasks[0]) == [0, 1, 2, 3]


@pytest.mark.parametrize("seed", range(5))
def test_uniform_partition(seed):
    sc = build_scenario(SamplerConfig(40, 5, 5, seed))
    assert sc.sizes == [5] * 8
    assert sorted(c for t in sc.tasks for c in t) == list(range(40))


def test_sizes_agree_with_scenario():
    cfg = SamplerConfig(40, 3, 8, 17)
    assert build_scenario(cfg).sizes == sample_task_sizes(cfg)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 60).flatmap(lambda tc: st.tuples(
    st.just(tc), st.integers(1, tc).flatmap(lambda lo: st.tuples(st.just(lo), st.integers(lo, tc))))),
    st.integers(0, 2**32 - 1))
def test_scenario_invariants(cfg, seed):
    tc, (low, high) = cfg
    sc = build_scenario(SamplerConfig(tc, low, high, seed))
    flat = [c for t in sc.tasks for c in t]
    assert sorted(flat) == list(range(tc))
    assert sum(sc.sizes) == tc
    assert all(low <= s <= high for s in sc.sizes[:-1])
    assert 1 <= sc.sizes[-1] <= high
    assert build_scenario(SamplerConfig(tc, low, high, seed)) == sc


def test_ten_thousand_seed_sweep():
    for seed in range(10_000):
        sizes = sample_task_sizes(SamplerConfig(40, 3, 8, seed))
        assert sum(sizes) == 40
        assert all(3 <= s <= 8 for s in sizes[:-1])


@pytest.mark.parametrize("args", [(40, 0, 5), (40, 6, 5), (4, 3, 5), (0, 1, 1)])
def test_invalid_configs(args):
    with pytest.raises(InvalidArgumentError):
        SamplerConfig(*args).validate()


@pytest.mark.parametrize("name, count, cumulative_last", [
    ("20+5x4", 5, 40), ("10+5x6", 7, 40), ("4x10", 10, 40)])
def test_fixed_shapes(name, count, cumulative_last):
    sc = fixed_scenario(SCENARIO_SHAPES[name], seed=1)
    assert sc.num_tasks == count
    assert sc.cumulative[-1] == cumulative_last
    assert sorted(c for t in sc.tasks for c in t) == list(range(40))


def test_fixed_scenario_cumulative_counts():
    assert fixed_scenario([20, 5, 5, 5, 5]).cumulative == [20, 25, 30, 35, 40]


def test_fixed_scenario_too_large():
    with pytest.raises(InvalidArgumentError):
        fixed_scenario([30, 20], num_classes=40)


def test_fixed_scenario_on_a_subset_of_classes():
    sc = fixed_scenario([4, 2, 2, 2], seed=5, num_classes=10)
    flat = [c for t in sc.tasks for c in t]
    assert sorted(flat) == list(range(10))


def test_roundtrip(tmp_path):
    sc = build_scenario(SamplerConfig(40, 3, 8, 7))
    sc.save(tmp_path / "s.json")
    assert Scenario.load(tmp_path / "s.json") == sc
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["sizes"] == sc.sizes


def test_from_dict_rejects_overlap():
    with pytest.raises(InvalidArgumentError):
        Scenario.from_dict({"tasks": [[0, 1], [1, 2]]})


def test_different_seeds_shuffle_differently():
    a = build_scenario(SamplerConfig(40, 5, 5, 0)).tasks
    b = build_scenario(SamplerConfig(40, 5, 5, 1)).tasks
    assert a != b
    assert np.array_equal(sorted(np.ravel(a)), sorted(np.ravel(b)))
