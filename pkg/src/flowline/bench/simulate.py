"""Discrete-event simulation of model trees, used to check the analytic model.

The whole tree is simulated at once with pull semantics that mirror the
threaded runtime:

* a synchronous node pulls its inputs (``ratio`` of them per output on
  average) and then spends an exponential self time;
* an asynchronous node runs ``p`` worker processes (one for prefetch) that
  each take a free buffer slot, pull their input under a shared input lock,
  do the element's own work and deposit the result; the consumer frees the
  slot when it takes the element;
* an interleave keeps ``cycle_length`` inner instances; a worker locks one
  instance, refills it from the outer input when it is exhausted and reads
  one inner element;
* the root consumer asks for an element, waits for it, then thinks for an
  exponential time with mean ``1/root_rate``.

The mean time the root consumer spends waiting is the simulated output
latency. Nothing here reuses the model's queueing formula.

Two service modes are offered. ``"native"`` draws every synchronous subtree
as the sum of its parts, so a batch of ten source reads is nearly
deterministic. ``"exponential"`` draws each synchronous subtree without
async stages as one exponential with the same mean, which is the
stochastic assumption the analytic model makes; the coupling between
stages, saturation and the parallel workers are simulated either way.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np
import simpy

from flowline.autotune.model import ModelNode, ModelParam, estimate_output_latency

DEFAULT_REQUESTS = 2000
WARMUP_FRACTION = 0.1


SERVICE_MODES = ("exponential", "native")


def _mean_latency(node: ModelNode) -> float:
    return node.self_time + sum(r * _mean_latency(c) for c, r in zip(node.children, node.ratios))


class _Sim:
    def __init__(self, root: ModelNode, seed: int, service: str = "exponential"):
        if service not in SERVICE_MODES:
            raise ValueError(f"unknown service mode {service!r}")
        self.env = simpy.Environment()
        self.rng = random.Random(seed)
        self.service = service
        self.root = self._build(root)

    def exp(self, mean: float):
        return self.rng.expovariate(1.0 / mean) if mean > 0 else 0.0

    def count(self, ratio: float) -> int:
        whole = math.floor(ratio)
        return whole + (self.rng.random() < ratio - whole)

    def _build(self, node: ModelNode):
        kids = [(self._build(c), r, i in node.inner) for i, (c, r) in enumerate(zip(node.children, node.ratios))]
        if not node.is_async:
            return _SyncNode(self, node, kids)
        if node.op == "interleave":
            inner_nodes = [c for i, c in enumerate(node.children) if i in node.inner]
            instances = [[(self._build(c), node.ratios[node.children.index(c)]) for c in inner_nodes]
                         for _ in range(max(1, node.cycle_length))]
            outer = [(k, r) for k, r, inner in kids if not inner]
            return _InterleaveNode(self, node, outer, instances)
        return _AsyncNode(self, node, [(k, r) for k, r, _ in kids])


class _SyncNode:
    def __init__(self, sim: _Sim, node: ModelNode, kids):
        self.sim = sim
        self.node = node
        self.kids = kids
        # A subtree without async stages never blocks on a buffer, so its
        # latency can be drawn in one go instead of event by event.
        self.pure = all(isinstance(k, _SyncNode) and k.pure for k, _, _ in kids)
        self.mean = _mean_latency(node) if self.pure else None

    def draw(self) -> float:
        sim = self.sim
        if sim.service == "exponential":
            return sim.exp(self.mean)
        return self._sum()

    def _sum(self) -> float:
        sim = self.sim
        t = sim.exp(self.node.self_time)
        for kid, ratio, _ in self.kids:
            for _ in range(sim.count(ratio)):
                t += kid._sum()
        return t

    def get(self):
        sim = self.sim
        if self.pure:
            t = self.draw()
            if t > 0:
                yield sim.env.timeout(t)
            return
        for kid, ratio, _ in self.kids:
            for _ in range(sim.count(ratio)):
                yield from kid.get()
        t = sim.exp(self.node.self_time)
        if t > 0:
            yield sim.env.timeout(t)


def _pull_from(sim: _Sim, kids):
    """Pull ``ratio`` elements from each input, merging pure sync pulls into one delay."""
    delay = 0.0
    for kid, ratio in kids:
        n = sim.count(ratio)
        if isinstance(kid, _SyncNode) and kid.pure:
            for _ in range(n):
                delay += kid.draw()
        else:
            if delay > 0:
                yield sim.env.timeout(delay)
                delay = 0.0
            for _ in range(n):
                yield from kid.get()
    if delay > 0:
        yield sim.env.timeout(delay)


class _AsyncNode:
    def __init__(self, sim: _Sim, node: ModelNode, kids):
        self.sim = sim
        self.node = node
        self.kids = kids
        cap = max(1, int(round(node.buffer_elements())))
        workers = 1 if node.op == "prefetch" else max(1, min(int(round(node.parallelism)), cap))
        self.slots = simpy.Container(sim.env, capacity=cap, init=cap)
        self.out = simpy.Store(sim.env)
        self.input_lock = simpy.Resource(sim.env, capacity=1)
        for _ in range(workers):
            sim.env.process(self._worker())

    def _work(self):
        # Map-like stages run their own function after the input lock is
        # released; prefetch and friends have no separate work phase.
        return self.sim.exp(self.node.self_time)

    def _worker(self):
        env = self.sim.env
        while True:
            yield self.slots.get(1)
            with self.input_lock.request() as req:
                yield req
                yield from _pull_from(self.sim, self.kids)
            t = self._work()
            if t > 0:
                yield env.timeout(t)
            yield self.out.put(True)

    def get(self):
        yield self.out.get()
        yield self.slots.put(1)


class _InterleaveNode(_AsyncNode):
    def __init__(self, sim: _Sim, node: ModelNode, outer, instances):
        self.instances = instances
        self.locks = [simpy.Resource(sim.env, capacity=1) for _ in instances]
        self.next_instance = 0
        super().__init__(sim, node, outer)

    def _worker(self):
        env = self.sim.env
        while True:
            yield self.slots.get(1)
            i = self.next_instance
            self.next_instance = (i + 1) % len(self.instances)
            with self.locks[i].request() as instance:
                yield instance
                # Opening a new inner dataset costs outer input elements.
                with self.input_lock.request() as req:
                    yield req
                    yield from _pull_from(self.sim, self.kids)
                yield from _pull_from(self.sim, self.instances[i])
            t = self.sim.exp(self.node.self_time)
            if t > 0:
                yield env.timeout(t)
            yield self.out.put(True)


def simulate_latency(root: ModelNode, root_rate: float | None, requests: int = DEFAULT_REQUESTS,
                     seed: int = 0, service: str = "exponential") -> float:
    """Mean root output latency from simulation, in seconds.

    The first ``WARMUP_FRACTION`` of the requests fill buffers and are
    discarded.
    """
    sim = _Sim(root, seed, service)
    env = sim.env
    think = 0.0 if not root_rate or root_rate <= 0 else 1.0 / root_rate
    waits: list[float] = []

    def consumer():
        for _ in range(requests):
            start = env.now
            yield from sim.root.get()
            waits.append(env.now - start)
            t = sim.exp(think)
            if t > 0:
                yield env.timeout(t)

    done = env.process(consumer())
    env.run(until=done)
    kept = waits[int(len(waits) * WARMUP_FRACTION):]
    return float(np.mean(kept))


# -- random trees ----------------------------------------------------------

MS = 1e-3


def _leaf(rng: np.random.Generator, path: str) -> ModelNode:
    return ModelNode(path, "source", False, float(rng.uniform(0.5, 5.0)) * MS)


def random_tree(rng: np.random.Generator, size: int, path: str = "0") -> ModelNode:
    """A random tree of ``size`` nodes built from the common operators."""
    if size <= 1:
        return _leaf(rng, path)
    ops = ["map", "pmap", "batch", "prefetch"]
    if size >= 3:
        ops.append("interleave")
    op = ops[int(rng.integers(len(ops)))]
    child_path = f"{path}.0"
    if op == "map":
        node = ModelNode(path, "map", False, float(rng.uniform(0.1, 3.0)) * MS)
        node.add(random_tree(rng, size - 1, child_path), 1.0)
    elif op == "pmap":
        p = int(rng.integers(1, 9))
        node = ModelNode(path, "map", True, float(rng.uniform(0.5, 10.0)) * MS,
                         params={"parallelism": ModelParam("parallelism", p, 1, 64)})
        node.add(random_tree(rng, size - 1, child_path), 1.0)
    elif op == "batch":
        b = int(rng.integers(2, 11))
        node = ModelNode(path, "batch", False, float(rng.uniform(0.0, 2.0)) * MS, batch_size=b)
        node.add(random_tree(rng, size - 1, child_path), float(b))
    elif op == "prefetch":
        n = int(rng.integers(1, 9))
        node = ModelNode(path, "prefetch", True, 0.0, params={"buffer_size": ModelParam("buffer_size", n, 1, 64)})
        node.add(random_tree(rng, size - 1, child_path), 1.0)
    else:
        c = int(rng.integers(1, 5))
        p = int(rng.integers(1, c + 1))
        node = ModelNode(path, "interleave", True, 0.0, cycle_length=c,
                         params={"parallelism": ModelParam("parallelism", p, 1, c)})
        per_input = int(rng.integers(2, 11))
        node.add(_leaf(rng, child_path), 1.0 / per_input)
        node.add(random_tree(rng, size - 2, f"{path}/0"), 1.0, inner=True)
    return node


def tree_size(root: ModelNode) -> int:
    return sum(1 for _ in root.walk())


@dataclass
class Comparison:
    model: float
    simulated: float
    root_rate: float
    nodes: int
    scale: float

    @property
    def relative_error(self) -> float:
        """Error relative to the simulated latency, floored at 1% of ``scale``."""
        denom = max(self.simulated, 0.01 * self.scale)
        return abs(self.model - self.simulated) / denom if denom > 0 else 0.0


def random_comparison(seed: int, requests: int = DEFAULT_REQUESTS, service: str = "exponential") -> Comparison:
    """Draw a 3-6 node tree and a consumer, and compare model with simulation.

    The consumer's think time is drawn log-uniformly between 0.2x and 5x
    the tree's unbuffered latency (its latency with a consumer that never
    idles), so both the buffered and the saturated regimes are covered.
    """
    rng = np.random.default_rng(seed)
    size = int(rng.integers(3, 7))
    root = random_tree(rng, size)
    unbuffered = estimate_output_latency(root, None)[root.path]
    think = unbuffered * float(np.exp(rng.uniform(np.log(0.2), np.log(5.0))))
    rate = 1.0 / think
    model = estimate_output_latency(root, rate)[root.path]
    sim = simulate_latency(root, rate, requests, seed=seed + 1_000_003, service=service)
    return Comparison(model, sim, rate, tree_size(root), unbuffered)
