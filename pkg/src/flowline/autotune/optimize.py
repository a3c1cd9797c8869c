"""Budget-constrained gradient descent over the latency model's knobs.

Knobs are treated as real numbers while descending, projected onto the box
``[min, max]`` and the two budget half-spaces after every step, then rounded
to integers, repaired back into budget, and polished with unit moves.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

from flowline.autotune.model import ModelNode, ModelParam, root_latency, tunable_params
from flowline.errors import DomainError

log = logging.getLogger(__name__)

DEFAULT_BYTES_PER_ELEMENT = 1024.0


def machine_ram_bytes() -> int:
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        return 8 << 30


@dataclass
class Budget:
    """CPU ceiling in parallelism units and RAM ceiling in bytes.

    Unset fields default to the machine's core count and ``ram_fraction`` of
    its physical memory.
    """

    cpu: float | None = None
    ram_bytes: float | None = None
    ram_fraction: float = 0.5

    def resolved(self) -> tuple[float, float]:
        cpu = self.cpu if self.cpu is not None else (os.cpu_count() or 1)
        ram = self.ram_bytes if self.ram_bytes is not None else self.ram_fraction * machine_ram_bytes()
        if cpu <= 0 or ram <= 0:
            raise DomainError(f"budgets must be positive, got cpu={cpu}, ram={ram}")
        return float(cpu), float(ram)


@dataclass
class TunerConfig:
    """``eps`` is relative: the stop threshold is ``eps`` times the latency at
    the start of an optimization round. ``delta`` is the initial step length
    in knob units; it doubles after a successful step and halves after a
    failed one."""

    eps: float = 0.01
    delta: float = 1.0
    initial_period: float = 0.1
    max_period: float = 10.0
    shift_threshold: float = 0.2
    max_steps: int = 200
    half_life: float = 1.0

    def __post_init__(self):
        if not (self.eps > 0 and self.delta > 0):
            raise DomainError("eps and delta must be positive")


@dataclass
class Assignment:
    values: dict[tuple[str, str], int] = field(default_factory=dict)
    latency: float = 0.0
    initial_latency: float = 0.0
    cpu_usage: float = 0.0
    ram_usage: float = 0.0
    feasible: bool = True
    steps: int = 0

    def by_path(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (path, name), v in self.values.items():
            out.setdefault(path, {})[name] = v
        return out


class _Problem:
    """The knobs of one model as a flat vector, with its linear budgets."""

    def __init__(self, model: ModelNode, rate: float | None, cpu_cap: float, ram_cap: float):
        self.model = model
        self.rate = rate
        self.knobs: list[tuple[ModelNode, ModelParam]] = tunable_params(model)
        self.lo = [p.minimum for _, p in self.knobs]
        self.hi = [p.maximum for _, p in self.knobs]
        self.evaluations = 0
        # cpu = fixed_cpu + sum(cpu_w * v); ram = fixed_ram + sum(ram_w * v)
        self.cpu_w = [1.0 if p.name == "parallelism" else 0.0 for _, p in self.knobs]
        self.ram_w = [self._ram_weight(n, p) for n, p in self.knobs]
        tuned = {id(p) for _, p in self.knobs}
        self.fixed_cpu = 0.0
        self.fixed_ram = 0.0
        for n in model.walk():
            par = n.params.get("parallelism")
            if par is not None and id(par) not in tuned:
                self.fixed_cpu += par.value
            if n.is_async:
                self.fixed_ram += self._fixed_ram(n, tuned)
        self.cpu_cap = cpu_cap - self.fixed_cpu
        self.ram_cap = ram_cap - self.fixed_ram

    @staticmethod
    def _ram_weight(n: ModelNode, p: ModelParam) -> float:
        if n.op == "prefetch":
            return n.bytes_per_element if p.name == "buffer_size" else 0.0
        if p.name != "parallelism":
            return 0.0
        if n.op == "map_and_batch":
            return n.bytes_per_element / max(n.batch_size, 1)
        return n.bytes_per_element

    @staticmethod
    def _fixed_ram(n: ModelNode, tuned: set) -> float:
        if n.op == "prefetch":
            p = n.params.get("buffer_size")
            return 0.0 if p is not None and id(p) in tuned else n.buffer_elements() * n.bytes_per_element
        par = n.params.get("parallelism")
        if par is not None and id(par) in tuned:
            # Only the constant slot of map_and_batch's capacity is fixed.
            return n.bytes_per_element if n.op == "map_and_batch" else 0.0
        return n.buffer_elements() * n.bytes_per_element

    def set(self, theta) -> None:
        for (_, p), v in zip(self.knobs, theta):
            p.value = v

    def latency(self, theta) -> float:
        self.set(theta)
        self.evaluations += 1
        return root_latency(self.model, self.rate)

    def usage(self, theta) -> tuple[float, float]:
        cpu = self.fixed_cpu + sum(w * v for w, v in zip(self.cpu_w, theta))
        ram = self.fixed_ram + sum(w * v for w, v in zip(self.ram_w, theta))
        return cpu, ram

    def feasible(self, theta, slack: float = 1e-9) -> bool:
        cpu, ram = self.usage(theta)
        return cpu <= self.cpu_cap + self.fixed_cpu + slack and ram <= self.ram_cap + self.fixed_ram + slack * max(1, ram)

    def _clip(self, theta):
        return [min(max(v, l), h) for v, l, h in zip(theta, self.lo, self.hi)]

    def _halfspace(self, theta, w, cap):
        """Euclidean projection onto ``{w . v <= cap}`` inside the box, by bisection."""
        def total(lam):
            return sum(wi * vi for wi, vi in zip(w, self._clip([v - lam * wi for v, wi in zip(theta, w)])))

        if total(0.0) <= cap:
            return theta
        lo, hi = 0.0, 1.0
        while total(hi) > cap and hi < 1e18:
            hi *= 2
        for _ in range(100):
            mid = (lo + hi) / 2
            if total(mid) > cap:
                lo = mid
            else:
                hi = mid
        return self._clip([v - hi * wi for v, wi in zip(theta, w)])

    def project(self, theta):
        theta = self._clip(theta)
        theta = self._halfspace(theta, self.cpu_w, self.cpu_cap)
        # Lowering knobs for RAM cannot break the CPU budget.
        return self._halfspace(theta, self.ram_w, self.ram_cap)

    def min_point(self):
        return list(self.lo)


def numeric_gradient(problem: _Problem, theta, h: float | None = None):
    """Central differences of the root latency."""
    grad = []
    for i, v in enumerate(theta):
        step = h if h is not None else 1e-4 * max(1.0, abs(v))
        up = list(theta)
        dn = list(theta)
        up[i] = v + step
        dn[i] = v - step
        grad.append((problem.latency(up) - problem.latency(dn)) / (2 * step))
    return grad


def model_gradient(model: ModelNode, rate: float | None, h: float | None = None) -> dict[tuple[str, str], float]:
    """d(root latency)/d(knob) at the model's current values; model unchanged."""
    work = model.copy()
    prob = _Problem(work, rate, math.inf, math.inf)
    theta = [p.value for _, p in prob.knobs]
    g = numeric_gradient(prob, theta, h)
    return {(n.path, p.name): gi for (n, p), gi in zip(prob.knobs, g)}


def _descend(prob: _Problem, theta, config: TunerConfig, eps: float):
    best = prob.latency(theta)
    step = config.delta
    span = max((h - l for l, h in zip(prob.lo, prob.hi)), default=1.0) or 1.0
    steps = 0
    for _ in range(config.max_steps):
        g = numeric_gradient(prob, theta)
        scale = max((abs(x) for x in g), default=0.0)
        if scale == 0 or not math.isfinite(scale):
            break
        trial = prob.project([v - step * gi / scale for v, gi in zip(theta, g)])
        ft = prob.latency(trial)
        if ft < best:
            gain = best - ft
            theta, best = trial, ft
            steps += 1
            if gain < eps:
                break
            step = min(step * 2, span)
        else:
            step /= 2
            if step < 1e-3:
                break
    return theta, best, steps


def _round_and_repair(prob: _Problem, theta):
    ints = [int(min(max(round(v), math.ceil(l)), math.floor(h))) for v, l, h in zip(theta, prob.lo, prob.hi)]
    while not prob.feasible(ints):
        cpu, ram = prob.usage(ints)
        over_cpu = cpu > prob.cpu_cap + prob.fixed_cpu
        best_i, best_lat = None, math.inf
        for i, v in enumerate(ints):
            w = prob.cpu_w[i] if over_cpu else prob.ram_w[i]
            if w <= 0 or v - 1 < prob.lo[i]:
                continue
            trial = list(ints)
            trial[i] = v - 1
            lat = prob.latency(trial)
            if lat < best_lat:
                best_i, best_lat = i, lat
        if best_i is None:
            break
        ints[best_i] -= 1
    return ints


def _polish(prob: _Problem, ints, eps: float, max_rounds: int = 200):
    best = prob.latency(ints)
    for _ in range(max_rounds):
        move, move_lat = None, best
        for i, v in enumerate(ints):
            for d in (1, -1):
                nv = v + d
                if nv < prob.lo[i] or nv > prob.hi[i]:
                    continue
                trial = list(ints)
                trial[i] = nv
                if not prob.feasible(trial):
                    continue
                lat = prob.latency(trial)
                if lat < move_lat:
                    move, move_lat = trial, lat
        if move is None or best - move_lat < eps:
            break
        ints, best = move, move_lat
    return ints, best


def optimize_parameters(model: ModelNode, budget: Budget | None = None, config: TunerConfig | None = None,
                        root_rate: float | None = None) -> Assignment:
    """Choose integer knob values minimizing the root's modeled latency.

    The model passed in is not modified; apply the result with
    :func:`apply_assignment` or publish it to a live pipeline.
    """
    budget = budget or Budget()
    config = config or TunerConfig()
    cpu_cap, ram_cap = budget.resolved()
    work = model.copy()
    prob = _Problem(work, root_rate, cpu_cap, ram_cap)
    if not prob.knobs:
        lat = root_latency(work, root_rate)
        cpu, ram = prob.usage([])
        return Assignment({}, lat, lat, cpu, ram, cpu <= cpu_cap and ram <= ram_cap, 0)

    keys = [(n.path, p.name) for n, p in prob.knobs]
    lowest = prob.min_point()
    if not prob.feasible(lowest):
        log.warning("tuning budget cannot be met even with every knob at its minimum; using minimums")
        lat = prob.latency(lowest)
        cpu, ram = prob.usage(lowest)
        return Assignment(dict(zip(keys, (int(v) for v in lowest))), lat, lat, cpu, ram, False, 0)

    start = prob.project([p.value for _, p in prob.knobs])
    initial = prob.latency(start)
    eps = config.eps * initial if initial > 0 else 0.0
    theta, _, steps = _descend(prob, start, config, eps)
    ints = _round_and_repair(prob, theta)
    # EPS governs the gradient phase; the integer polish takes any strict gain.
    ints, lat = _polish(prob, ints, 0.0)
    cpu, ram = prob.usage(ints)
    return Assignment(dict(zip(keys, ints)), lat, initial, cpu, ram, prob.feasible(ints), steps)


def apply_assignment(model: ModelNode, assignment: Assignment) -> None:
    for n in model.walk():
        for name, p in n.params.items():
            v = assignment.values.get((n.path, name))
            if v is not None:
                p.value = v
