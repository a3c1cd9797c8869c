import numpy as np
import pytest

from flowline.autotune.model import ModelNode, ModelParam, root_latency
from flowline.bench.simulate import Comparison, random_comparison, random_tree, simulate_latency, tree_size

from oracles import mm1k_empty_probability

MS = 1e-3


def test_sync_chain_is_sum_of_means():
    src = ModelNode("0.0.0", "source", False, 2 * MS)
    b = ModelNode("0.0", "batch", False, 1 * MS, batch_size=4)
    b.add(src, 4.0)
    root = ModelNode("0", "map", False, 0.5 * MS)
    root.add(b)
    for service in ("exponential", "native"):
        sim = simulate_latency(root, None, requests=4000, seed=3, service=service)
        assert sim == pytest.approx(9.5 * MS, rel=0.05)


def test_prefetch_matches_finite_queue():
    """Prefetch over an exponential source is a birth-death chain on the buffer."""
    producer, n, rate = 36.5 * MS, 2, 100.0
    pf = ModelNode("0", "prefetch", True, 0.0, params={"buffer_size": ModelParam("buffer_size", n)})
    pf.add(ModelNode("0.0", "source", False, producer))
    sim = simulate_latency(pf, rate, requests=20000, seed=1)
    p0 = mm1k_empty_probability(n, 1 / producer, rate)
    # an arrival to an empty buffer waits one residual production time
    assert sim == pytest.approx(producer * p0, rel=0.08)


def test_seeded_runs_repeat():
    rng = np.random.default_rng(5)
    root = random_tree(rng, 5)
    a = simulate_latency(root, 50.0, requests=500, seed=9)
    b = simulate_latency(root, 50.0, requests=500, seed=9)
    assert a == b


def test_random_trees_are_small():
    for seed in range(50):
        root = random_tree(np.random.default_rng(seed), 3 + seed % 4)
        assert 3 <= tree_size(root) <= 6
        assert root_latency(root, None) > 0


def test_comparison_error_floor():
    c = Comparison(model=0.0, simulated=0.0, root_rate=1.0, nodes=3, scale=1.0)
    assert c.relative_error == 0.0
    c = Comparison(model=0.011, simulated=0.010, root_rate=1.0, nodes=3, scale=0.1)
    assert c.relative_error == pytest.approx(0.1)
    r = random_comparison(0, requests=300)
    assert r.model >= 0 and r.simulated >= 0


def test_unknown_service_mode():
    with pytest.raises(ValueError):
        simulate_latency(ModelNode("0", "source", False, MS), None, service="erlang")
