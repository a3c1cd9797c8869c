"""Background tuning loop attached to a live pipeline.

Every period the tuner folds new runtime counters into its estimators,
builds a model of the live iterator tree, optimizes it and publishes the
integer knob values. Decreases are published before increases so the live
pipeline never exceeds its budget between two publishes.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from flowline.autotune.estimators import DEFAULT_PROCESSING_NS, Estimators, RatioEstimator
from flowline.autotune.model import ModelNode, ModelParam, describe, resource_usage, root_latency
from flowline.autotune.optimize import DEFAULT_BYTES_PER_ELEMENT, Assignment, Budget, TunerConfig, optimize_parameters
from flowline.runtime.core import PipelineContext, parent_path

log = logging.getLogger(__name__)


@dataclass
class PublishRecord:
    timestamp: float
    values: dict[tuple[str, str], int]
    cpu_usage: float
    ram_usage: float
    cpu_budget: float
    ram_budget: float
    model_latency: float

    @property
    def within_budget(self) -> bool:
        return self.cpu_usage <= self.cpu_budget + 1e-9 and self.ram_usage <= self.ram_budget * (1 + 1e-9)


def _default_ratio(node, child_index: int) -> float:
    if node.kind in ("batch", "map_and_batch"):
        return float(node.attrs["batch_size"])
    return 1.0


class ModelBuilder:
    """Turns the pipeline's cumulative counters into a :class:`ModelNode` tree."""

    def __init__(self, ctx: PipelineContext, half_life: float = 1.0, clock=time.monotonic):
        self.ctx = ctx
        self.clock = clock
        self.estimators = Estimators(half_life, clock)
        self.ratios: dict[str, RatioEstimator] = {}
        self._last: dict[str, tuple[int, int]] = {}
        self.half_life = half_life

    def sample(self) -> None:
        now = self.clock()
        entries = dict(self.ctx.entries)
        deltas = {}
        for path, e in entries.items():
            m = e.metrics
            cur = (m.processing_ns, m.elements_produced)
            prev = self._last.get(path, (0, 0))
            self._last[path] = cur
            d_ns, d_n = cur[0] - prev[0], cur[1] - prev[1]
            deltas[path] = d_n
            if d_n > 0:
                self.estimators.record_processing_time(path, d_ns, d_n, now)
        for path in entries:
            parent = parent_path(path)
            if parent is None or parent not in deltas:
                continue
            est = self.ratios.get(path)
            if est is None:
                est = self.ratios[path] = RatioEstimator(self.half_life)
            if deltas[parent] > 0 or deltas[path] > 0:
                est.record(deltas[path], deltas[parent], now)

    def _self_time(self, path: str, node) -> float:
        est = self.estimators.processing_time(path, None)
        if est is None:
            hint = None
            fn = node.attrs.get("fn")
            if isinstance(fn, str):
                try:
                    hint = self.ctx.registry.get(fn).cost_hint_ns
                except Exception:
                    hint = None
            est = hint if hint is not None else DEFAULT_PROCESSING_NS
        return est / 1e9

    def build(self) -> ModelNode | None:
        entries = dict(self.ctx.entries)
        if "0" not in entries:
            return None
        nodes: dict[str, ModelNode] = {}
        for path in sorted(entries, key=lambda p: (p.count(".") + p.count("/"), p)):
            e = entries[path]
            node = e.node
            params = {name: ModelParam(name, t.value, t.minimum, t.maximum, t.autotune)
                      for name, t in e.tunables.items()}
            mn = ModelNode(
                path=path,
                op=e.impl,
                is_async=e.is_async,
                self_time=self._self_time(path, node),
                params=params,
                batch_size=int(node.attrs.get("batch_size", 1)),
                cycle_length=int(node.attrs.get("cycle_length", 1)),
                bytes_per_element=e.metrics.bytes_per_element or DEFAULT_BYTES_PER_ELEMENT,
            )
            nodes[path] = mn
            parent = parent_path(path)
            if parent is not None and parent in nodes:
                pn = nodes[parent]
                pe = entries[parent].node
                inner = path.startswith(parent + "/")
                default = 1.0 if inner else _default_ratio(pe, len(pn.children))
                est = self.ratios.get(path)
                ratio = est.estimate(default) if est is not None else default
                pn.add(mn, ratio, inner=inner)
        return nodes["0"]


class Tuner:
    def __init__(self, ctx: PipelineContext, budget: Budget | None = None, config: TunerConfig | None = None):
        self.ctx = ctx
        self.budget = budget or Budget()
        self.config = config or TunerConfig()
        self.builder = ModelBuilder(ctx, self.config.half_life)
        self.period = self.config.initial_period
        self.history: list[PublishRecord] = []
        self.periods: list[float] = []
        # (monotonic time, period chosen) after every round
        self.round_log: list[tuple[float, float]] = []
        self.listeners: list[Callable[[PublishRecord], Any]] = []
        self.last_assignment: Assignment | None = None
        self.last_model: ModelNode | None = None
        self.rounds = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._structure = -1
        self._latency: float | None = None
        self._lock = threading.Lock()

    def start(self) -> None:
        if self._thread is None:
            self._thread = threading.Thread(target=self._run, name="flowline-tuner", daemon=True)
            self._thread.start()

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        t = self._thread
        if t is not None and t is not threading.current_thread():
            t.join(timeout)

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def _run(self) -> None:
        while not self._stop.wait(self.period):
            if self.ctx.closed:
                break
            try:
                self.step()
            except Exception:
                log.exception("tuning round failed")

    def step(self) -> Assignment | None:
        """One optimization round; also adjusts the period."""
        with self._lock:
            self.rounds += 1
            self.builder.sample()
            model = self.builder.build()
            if model is None:
                return None
            rate = self.ctx.consumer_rate()
            assignment = optimize_parameters(model, self.budget, self.config, rate)
            changed = self._publish(model, assignment)
            self.last_model = model
            self.last_assignment = assignment

            structure = self.ctx.structure_version
            # Shifts are judged on the consumer-independent latency: the
            # buffered latency sits near zero once buffers are adequate, so
            # noise there would look like a workload change every round.
            latency = root_latency(model, None)
            shifted = (self._latency is not None and self._latency > 0
                       and abs(latency - self._latency) / self._latency > self.config.shift_threshold)
            if structure != self._structure or shifted:
                self.period = self.config.initial_period
            elif not changed:
                self.period = min(self.period * 2, self.config.max_period)
            self._structure = structure
            self._latency = latency
            self.periods.append(self.period)
            self.round_log.append((time.monotonic(), self.period))
            return assignment

    def _live_params(self):
        out = {}
        for path, e in list(self.ctx.entries.items()):
            for name, t in e.tunables.items():
                out[(path, name)] = t
        return out

    def _publish(self, model: ModelNode, assignment: Assignment) -> bool:
        live = self._live_params()
        moves = [(key, v) for key, v in assignment.values.items() if key in live and live[key].value != v]
        if not moves:
            return False
        # Shrink first, then grow.
        moves.sort(key=lambda kv: kv[1] - live[kv[0]].value)
        for key, v in moves:
            live[key].publish(v)
        for n in model.walk():
            for name, p in n.params.items():
                t = live.get((n.path, name))
                if t is not None:
                    p.value = t.value
        cpu, ram = resource_usage(model)
        cpu_cap, ram_cap = self.budget.resolved()
        rec = PublishRecord(time.monotonic(), {k: t.value for k, t in live.items()}, cpu, ram, cpu_cap, ram_cap,
                            root_latency(model, self.ctx.consumer_rate()))
        self.history.append(rec)
        for fn in list(self.listeners):
            fn(rec)
        return True

    def dump(self) -> str:
        """Model tree with estimates and the last chosen knob values."""
        with self._lock:
            model = self.last_model
            if model is None:
                self.builder.sample()
                model = self.builder.build()
            if model is None:
                return "tuner: no live iterators"
            rate = self.ctx.consumer_rate()
            lines = [f"tuner rounds={self.rounds} period={self.period:.3f}s "
                     f"consumer_rate={'unknown' if rate is None else f'{rate:.1f}/s'}"]
            lines.append(describe(model, rate))
            if self.last_assignment is not None:
                a = self.last_assignment
                lines.append(f"chosen: {', '.join(f'{p}:{n}={v}' for (p, n), v in sorted(a.values.items())) or 'none'}")
                lines.append(f"usage: cpu={a.cpu_usage:g} ram={a.ram_usage:.0f}B")
            return "\n".join(lines)
