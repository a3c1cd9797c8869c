"""Analytical output-latency model of an iterator tree.

Each asynchronous stage is treated as a finite buffer of ``n`` slots fed by
a producer of rate ``x`` and drained by a consumer of rate ``y``. The
consumer waits only when it finds the buffer empty, so the stage's output
latency is its producer latency scaled by the probability of that event.
Synchronous stages are linear in their inputs' latencies.

All times are seconds and all rates are elements per second.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Iterator

from flowline.errors import DomainError

REL_TOL = 1e-9

MAP_LIKE = ("map", "map_and_filter", "map_and_batch")


def p_empty(n: float, x: float, y: float) -> float:
    """Probability that a buffer of ``n`` slots is empty when the consumer arrives.

    ``1/(n+1)`` when the rates agree, otherwise
    ``(1 - x/y) / (1 - (x/y)**(n+1))``, evaluated through ``expm1`` so it
    stays accurate next to ``x == y`` and free of overflow when ``x >> y``.
    """
    if not (n >= 1) or not (x > 0) or not (y > 0) or math.isinf(n):
        raise DomainError(f"p_empty needs n >= 1 and positive rates, got n={n}, x={x}, y={y}")
    if math.isinf(y) and not math.isinf(x):
        return 1.0
    if math.isinf(x):
        return 0.0
    if abs(x - y) <= REL_TOL * max(x, y):
        return 1.0 / (n + 1)
    lr = math.log(x / y)
    k = n + 1
    if lr < 0:
        return math.expm1(lr) / math.expm1(k * lr)
    # Producer faster than consumer: divide through by (x/y)**(n+1).
    return math.expm1(lr) * math.exp(-k * lr) / -math.expm1(-k * lr)


@dataclass
class ModelParam:
    """A knob in the model; ``value`` may be fractional during optimization."""

    name: str
    value: float
    minimum: float = 1
    maximum: float = 1
    tunable: bool = False

    def clamp(self, v: float) -> float:
        return min(max(v, self.minimum), self.maximum)


@dataclass
class ModelNode:
    """One iterator in the model.

    ``ratios[i]`` is the number of elements consumed from ``children[i]``
    per produced element. Children listed in ``inner`` are datasets opened
    by an interleave; each of its ``cycle_length`` open instances sees an
    equal share of the demand.
    """

    path: str
    op: str
    is_async: bool = False
    self_time: float = 0.0
    children: list["ModelNode"] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    params: dict[str, ModelParam] = field(default_factory=dict)
    inner: frozenset = frozenset()
    batch_size: int = 1
    cycle_length: int = 1
    bytes_per_element: float = 1024.0

    def add(self, child: "ModelNode", ratio: float = 1.0, inner: bool = False) -> "ModelNode":
        self.children.append(child)
        self.ratios.append(ratio)
        if inner:
            self.inner = self.inner | {len(self.children) - 1}
        return child

    def param(self, name: str, default: float = 1.0) -> float:
        p = self.params.get(name)
        return default if p is None else p.value

    @property
    def parallelism(self) -> float:
        return self.param("parallelism")

    def buffer_elements(self) -> float:
        """Buffer capacity ``n`` of an async stage, in output elements."""
        if self.op == "prefetch":
            return self.param("buffer_size")
        if self.op == "map_and_batch":
            return self.parallelism / max(self.batch_size, 1) + 1
        return self.parallelism

    def walk(self) -> Iterator["ModelNode"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def copy(self) -> "ModelNode":
        return copy.deepcopy(self)


def tunable_params(root: ModelNode) -> list[tuple[ModelNode, ModelParam]]:
    return [(n, p) for n in root.walk() for p in n.params.values() if p.tunable]


def consumer_rates(root: ModelNode, root_rate: float) -> dict[str, float]:
    """Downward pass: the rate at which each node is asked for elements."""
    rates: dict[str, float] = {}

    def down(node: ModelNode, y: float) -> None:
        rates[node.path] = y
        for i, (c, r) in enumerate(zip(node.children, node.ratios)):
            share = y * r
            if i in node.inner:
                share /= max(node.cycle_length, 1)
            down(c, share)

    down(root, root_rate)
    return rates


def producer_latency(node: ModelNode, child_latency: list[float]) -> float:
    """Time for an async stage to produce one element into its buffer."""
    p = max(node.parallelism, 1e-9)
    own = sum(r * l for i, (r, l) in enumerate(zip(node.ratios, child_latency)) if i not in node.inner)
    inner = sum(r * l for i, (r, l) in enumerate(zip(node.ratios, child_latency)) if i in node.inner)
    if node.op == "interleave":
        # p of the open inner datasets are read concurrently.
        return own + inner / p + node.self_time
    if node.op in MAP_LIKE:
        return own + inner + node.self_time / p
    return own + inner + node.self_time


def estimate_output_latency(root: ModelNode, root_rate: float | None) -> dict[str, float]:
    """Output latency of every node, keyed by path.

    One depth-first traversal: consumer rates are pushed down, latencies
    come back up. ``root_rate`` of None means the consumer never idles.
    """
    rate = math.inf if root_rate is None or root_rate <= 0 else root_rate
    rates = consumer_rates(root, rate)
    out: dict[str, float] = {}

    def up(node: ModelNode) -> float:
        lats = [up(c) for c in node.children]
        if not node.is_async:
            lat = node.self_time + sum(r * l for r, l in zip(node.ratios, lats))
        else:
            prod = producer_latency(node, lats)
            y = rates[node.path]
            if prod <= 0:
                lat = 0.0
            elif math.isinf(y) or y <= 0:
                lat = prod
            else:
                lat = prod * p_empty(max(node.buffer_elements(), 1.0), 1.0 / prod, y)
        out[node.path] = lat
        return lat

    up(root)
    return out


def root_latency(root: ModelNode, root_rate: float | None) -> float:
    return estimate_output_latency(root, root_rate)[root.path]


def resource_usage(root: ModelNode) -> tuple[float, float]:
    """``(parallelism units, buffered bytes)`` implied by the current values."""
    cpu = 0.0
    ram = 0.0
    for n in root.walk():
        if "parallelism" in n.params:
            cpu += n.params["parallelism"].value
        if n.is_async:
            ram += n.buffer_elements() * n.bytes_per_element
    return cpu, ram


def describe(root: ModelNode, root_rate: float | None = None) -> str:
    """Indented text dump of the model with latencies in milliseconds."""
    lat = estimate_output_latency(root, root_rate)
    rates = consumer_rates(root, math.inf if not root_rate else root_rate)
    lines = []

    def show(node: ModelNode, depth: int, ratio: float) -> None:
        knobs = " ".join(f"{p.name}={p.value:g}{'*' if p.tunable else ''}" for p in node.params.values())
        lines.append(
            f"{'  ' * depth}{node.path} {node.op}{' async' if node.is_async else ''} "
            f"self={node.self_time * 1e3:.3f}ms ratio={ratio:g} y={rates[node.path]:.1f}/s "
            f"latency={lat[node.path] * 1e3:.3f}ms {knobs}".rstrip()
        )
        for c, r in zip(node.children, node.ratios):
            show(c, depth + 1, r)

    show(root, 0, 1.0)
    return "\n".join(lines)
