import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowline.autotune.model import ModelNode, ModelParam, estimate_output_latency, p_empty, root_latency
from flowline.autotune.optimize import Budget, TunerConfig, model_gradient, optimize_parameters
from flowline.bench.simulate import random_tree
from flowline.errors import DomainError

from oracles import mm1k_empty_probability

MS = 1e-3


def worked_pipeline(auto=False):
    """Interleave c=2 over a 5 ms source, map p=5 at 2 ms, batch 10 at 1 ms, prefetch 2."""
    def knob(name, value, cap=64):
        return ModelParam(name, 1 if auto else value, 1, cap if auto else value, auto)

    pf = ModelNode("0", "prefetch", True, 0.0, params={"buffer_size": knob("buffer_size", 2)})
    b = pf.add(ModelNode("0.0", "batch", False, 1 * MS, batch_size=10), 1.0)
    m = b.add(ModelNode("0.0.0", "map", True, 2 * MS, params={"parallelism": knob("parallelism", 5)}), 10.0)
    il = m.add(ModelNode("0.0.0.0", "interleave", True, 0.0, cycle_length=2,
                         params={"parallelism": knob("parallelism", 1, 2)}))
    il.add(ModelNode("0.0.0.0.0", "from_memory", False, 0.0), 0.0)
    il.add(ModelNode("0.0.0.0/0", "from_file", False, 5 * MS), 1.0, inner=True)
    return pf


# -- p_empty -----------------------------------------------------------------


def test_equal_rates():
    assert p_empty(2, 5.0, 5.0) == 1 / 3
    assert p_empty(7, 1.0, 1.0) == 1 / 8


def test_reference_values():
    assert p_empty(2, 27.4, 100) == pytest.approx(0.7412, rel=0.02)
    assert 36.5 * p_empty(2, 27.4, 100) == pytest.approx(27.0, rel=0.02)
    assert p_empty(5, 220, 1000) == pytest.approx(0.780, rel=0.01)
    assert 4.55 * p_empty(5, 220, 1000) == pytest.approx(3.55, rel=0.02)


@pytest.mark.parametrize("args", [(0, 1, 1), (2, 0, 1), (2, 1, 0), (2, -1, 1), (0.5, 1, 1)])
def test_domain(args):
    with pytest.raises(DomainError):
        p_empty(*args)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 16, 32, 64])
def test_continuity_at_equal_rates(n):
    for r in (1 - 1e-6, 1 + 1e-6):
        assert abs(p_empty(n, r, 1.0) - 1 / (n + 1)) < 1e-4


@settings(max_examples=200)
@given(st.integers(1, 30), st.floats(0.01, 100), st.floats(0.01, 100))
def test_matches_birth_death_chain(n, x, y):
    assert p_empty(n, x, y) == pytest.approx(mm1k_empty_probability(n, x, y), rel=1e-6, abs=1e-9)


def test_monotone_over_grid():
    ns = range(1, 33)
    rates = np.geomspace(0.05, 20, 25)
    for x in rates:
        for y in rates:
            seq = [p_empty(n, x, y) for n in ns]
            assert all(a >= b for a, b in zip(seq, seq[1:]))
            assert all(0 < v < 1 for v in seq)
    for n in (1, 4, 16):
        along_y = [p_empty(n, 1.0, y) for y in rates]
        along_x = [p_empty(n, x, 1.0) for x in rates]
        # a faster consumer finds the buffer empty more often, a faster producer less often
        assert all(a <= b for a, b in zip(along_y, along_y[1:]))
        assert all(a >= b for a, b in zip(along_x, along_x[1:]))


def test_extreme_rates_stay_finite():
    assert p_empty(64, 1e6, 1e-3) == pytest.approx(0.0, abs=1e-300)
    assert p_empty(64, 1e-3, 1e6) == pytest.approx(1.0, rel=1e-6)


# -- latency estimates ---------------------------------------------------------


def test_worked_ladder():
    lat = estimate_output_latency(worked_pipeline(), 100.0)
    got = {k: v / MS for k, v in lat.items()}
    assert got["0.0.0.0"] == pytest.approx(4.15, rel=0.03)
    assert got["0.0.0"] == pytest.approx(3.55, rel=0.03)
    assert got["0.0"] == pytest.approx(36.5, rel=0.03)
    assert got["0"] == pytest.approx(27.0, rel=0.03)


def test_sync_chain_zero_self_time():
    src = ModelNode("0.0.0", "source", False, 3 * MS)
    mid = ModelNode("0.0", "map", False, 0.0)
    mid.add(src)
    root = ModelNode("0", "map", False, 0.0)
    root.add(mid)
    assert root_latency(root, 50.0) == pytest.approx(3 * MS)
    assert root_latency(root, None) == pytest.approx(3 * MS)


def test_consumer_rate_split_across_cycle():
    from flowline.autotune.model import consumer_rates

    rates = consumer_rates(worked_pipeline(), 100.0)
    assert rates["0.0.0"] == pytest.approx(1000.0)
    assert rates["0.0.0.0/0"] == pytest.approx(500.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.floats(1.1, 3.0))
def test_latency_monotone_in_self_time(seed, factor):
    rng = np.random.default_rng(seed)
    root = random_tree(rng, int(rng.integers(3, 7)))
    rate = 1.0 / (root_latency(root, None) * float(rng.uniform(0.2, 5)))
    before = root_latency(root, rate)
    nodes = list(root.walk())
    target = nodes[int(rng.integers(len(nodes)))]
    target.self_time = target.self_time * factor + 1e-4
    assert root_latency(root, rate) >= before * (1 - 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_gradient_matches_secant(seed):
    rng = np.random.default_rng(seed)
    root = random_tree(rng, int(rng.integers(3, 7)))
    knobs = [(n, p) for n in root.walk() for p in n.params.values()]
    if not knobs:
        return
    for _, p in knobs:
        p.tunable, p.minimum, p.maximum = True, 1, 64
        p.value = float(rng.uniform(2, 6))
    unbuffered = root_latency(root, None)
    rate = 1.0 / (unbuffered * float(rng.uniform(0.5, 2)))
    grad = model_gradient(root, rate)
    step = TunerConfig().delta / 10
    for node, p in knobs:
        g = grad[(node.path, p.name)]
        p.value += step / 2
        up = root_latency(root, rate)
        p.value -= step
        dn = root_latency(root, rate)
        p.value += step / 2
        secant = (up - dn) / step
        # A knob whose whole effect over the step is below a millionth of
        # the pipeline's scale sits on a plateau (or at the zero latency
        # floor, where latency decays exponentially); skip it.
        if abs(up - dn) < 1e-6 * unbuffered:
            continue
        assert g == pytest.approx(secant, rel=0.05)


def test_optimize_no_tunables_is_noop():
    root = worked_pipeline()
    before = root.copy()
    a = optimize_parameters(root, Budget(cpu=8, ram_bytes=1e9), root_rate=100.0)
    assert a.values == {}
    assert root == before


def test_auto_pipeline_beats_hand_setting():
    hand = root_latency(worked_pipeline(), 100.0)
    auto = worked_pipeline(auto=True)
    a = optimize_parameters(auto, Budget(cpu=56, ram_bytes=1e9), TunerConfig(), 100.0)
    assert a.latency <= hand
    assert a.cpu_usage <= 56
