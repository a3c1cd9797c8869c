"""Build, run and compare benchmark pipelines described by :mod:`flowline.bench.spec`.

Four run modes share one spec:

``sequential``
    every parallelism 1, prefetch stages removed, no rewrites.
``hand-tuned``
    knob values from the spec (``AUTO(n)`` gives ``n``, bare ``AUTO`` gives 1).
``tuned``
    ``AUTO`` knobs become AUTOTUNE and the background tuner runs.
``all-features``
    tuned, plus the static rewrites and nondeterministic ordering (unless the
    spec or caller pins ``deterministic``).

Each run performs one discarded warm-up epoch and then ``epochs`` measured
epochs on one iterator (the graph is wrapped in a finite ``repeat``), so the
tuner keeps what it learned across epochs. The reported epoch time is the
median over measured epochs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import math
import statistics
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from flowline.autotune.optimize import Budget
from flowline.elements import BYTES, INT64, UdfRegistry, spec as element_spec
from flowline.errors import FlowlineError, GridTooLarge, RunFailed
from flowline.graph import AUTOTUNE, Dataset, DatasetNode, build, walk
from flowline.optimizer import RULE_NAMES, optimize
from flowline.runtime import make_iterator
from flowline.runtime.core import EOS, Options, perf_ns, spend
from flowline.serialization import encode_element
from flowline.bench.spec import Knob, OpSpec, PipelineSpec

MODES = ("sequential", "hand-tuned", "tuned", "all-features")
DEFAULT_EPOCHS = 5
MAX_GRID_POINTS = 4096
GRID_TOLERANCE = 0.02

INT_SPEC = element_spec(INT64)
BYTES_SPEC = element_spec(BYTES)


class SyntheticUdfs:
    """Registers the cost-burning functions a spec refers to, on demand."""

    def __init__(self, registry: UdfRegistry | None = None):
        self.registry = registry or UdfRegistry()

    def _ensure(self, name: str, make) -> str:
        if name not in self.registry.entries:
            fn, kwargs = make()
            self.registry.register(name, fn, **kwargs)
        return name

    def work(self, ns: int, mode: str) -> str:
        def make():
            def burn(*components):
                spend(ns, mode)
                return components

            return burn, {"cost_hint_ns": ns}

        return self._ensure(f"synthetic.work.{ns}ns.{mode}", make)

    def keep_every(self, k: int) -> str:
        def make():
            def keep(value):
                key = value if isinstance(value, int) else zlib.crc32(value)
                return key % k == 0

            return keep, {}

        return self._ensure(f"synthetic.keep_every.{k}", make)

    def shard_reader(self, count: int, shards: int, ns: int, mode: str) -> str:
        reader = self.work(ns, mode) if ns > 0 else None

        def make():
            registry = self.registry

            def open_shard(shard):
                node = build("from_memory", (), {"elements": list(range(shard, count, shards)),
                                                 "element_spec": INT_SPEC}, registry)
                if reader is not None:
                    node = build("map", (node,), {"fn": reader}, registry)
                return Dataset(node)

            return open_shard, {"output_spec": INT_SPEC}

        return self._ensure(f"synthetic.shard.{count}.{shards}.{ns}ns.{mode}", make)

    def file_reader(self, ns: int, mode: str) -> str:
        reader = self.work(ns, mode) if ns > 0 else None

        def make():
            registry = self.registry

            def open_file(path):
                node = build("from_file", (), {"paths": [path.decode() if isinstance(path, bytes) else path]},
                             registry)
                if reader is not None:
                    node = build("map", (node,), {"fn": reader}, registry)
                return Dataset(node)

            return open_file, {"output_spec": BYTES_SPEC}

        return self._ensure(f"synthetic.file.{ns}ns.{mode}", make)


# -- graph construction ----------------------------------------------------


def _knob(k: Knob, mode: str, override: int | None, sequential_value: int = 1):
    if override is not None:
        return override
    if mode == "sequential":
        return sequential_value
    if mode == "hand-tuned":
        return k.hand()
    return AUTOTUNE if k.auto else k.value


def build_pipeline(spec: PipelineSpec, mode: str, udfs: SyntheticUdfs, *,
                   knob_values: dict[tuple[str, str], int] | None = None, zero_cost: bool = False) -> DatasetNode:
    """The dataset graph ``spec`` describes under ``mode``.

    ``knob_values`` pins individual knobs (keyed ``(label, attr)``), as the
    grid search does. ``zero_cost`` drops every synthetic cost, which keeps
    the element sequence but makes the pipeline fast to count.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    knob_values = knob_values or {}
    reg = udfs.registry
    src = spec.source

    def cost(ns: int) -> int:
        return 0 if zero_cost else ns

    def cmode(own: str | None) -> str:
        return own or spec.cost_mode

    ops = list(spec.ops)
    if src.kind == "synthetic":
        if src.shards > 1:
            node = build("from_memory", (), {"elements": list(range(src.shards)), "element_spec": INT_SPEC}, reg)
            reader = udfs.shard_reader(src.count, src.shards, cost(src.cost_ns), cmode(src.cost_mode))
        else:
            node = build("from_memory", (), {"elements": list(range(src.count)), "element_spec": INT_SPEC}, reg)
            if cost(src.cost_ns):
                node = build("map", (node,), {"fn": udfs.work(src.cost_ns, cmode(src.cost_mode))}, reg)
            reader = None
    else:
        if ops and ops[0].kind == "interleave":
            node = build("from_memory", (), {"elements": [p.encode() for p in src.paths],
                                             "element_spec": BYTES_SPEC}, reg)
            reader = udfs.file_reader(cost(src.cost_ns), cmode(src.cost_mode))
        else:
            node = build("from_file", (), {"paths": list(src.paths)}, reg)
            if cost(src.cost_ns):
                node = build("map", (node,), {"fn": udfs.work(src.cost_ns, cmode(src.cost_mode))}, reg)
            reader = None

    for i, op in enumerate(ops):
        a = op.attrs

        def knob(name: str) -> Any:
            return _knob(a[name], mode, knob_values.get((op.label, name)))

        if op.kind == "map":
            fn = udfs.work(cost(int(round(a["cost_ms"] * 1e6))), cmode(a["cost_mode"]))
            node = build("map", (node,), {"fn": fn, "num_parallel_calls": knob("parallel"),
                                          "deterministic": a["deterministic"]}, reg)
        elif op.kind == "interleave":
            if i != 0 or (reader is None and src.kind == "synthetic"):
                raise FlowlineError(f"line {op.line}: interleave must directly follow a sharded or files source")
            node = build("interleave", (node,), {"fn": reader, "cycle_length": a["cycle"],
                                                 "num_parallel_calls": knob("parallel"),
                                                 "deterministic": a["deterministic"]}, reg)
        elif op.kind == "filter":
            node = build("filter", (node,), {"predicate": udfs.keep_every(a["keep_every"])}, reg)
        elif op.kind == "batch":
            node = build("batch", (node,), {"batch_size": a["size"], "drop_remainder": a["drop_remainder"],
                                            "assembly_cost_ns": cost(int(round(a["cost_ms"] * 1e6)))}, reg)
        elif op.kind == "unbatch":
            node = build("unbatch", (node,), {}, reg)
        elif op.kind == "prefetch":
            if mode == "sequential" and (op.label, "size") not in knob_values:
                continue
            node = build("prefetch", (node,), {"buffer_size": knob("size")}, reg)
        elif op.kind == "shuffle":
            node = build("shuffle", (node,), {"buffer_size": a["buffer"], "seed": a["seed"]}, reg)
        elif op.kind == "repeat":
            node = build("repeat", (node,), {"count": a["count"]}, reg)
        elif op.kind == "shard":
            node = build("shard", (node,), {"num_shards": a["num"], "index": a["index"]}, reg)
        elif op.kind == "cache":
            node = build("cache", (node,), {}, reg)
        else:  # pragma: no cover - the parser rejects unknown kinds
            raise FlowlineError(f"unsupported op {op.kind!r}")
    return node


def with_cost_mode(spec: PipelineSpec, mode: str) -> PipelineSpec:
    """Copy of ``spec`` with every synthetic cost spent in ``mode``."""
    src = dataclasses.replace(spec.source, cost_mode=mode)
    ops = [dataclasses.replace(o, attrs={**o.attrs, "cost_mode": mode}) if "cost_mode" in o.attrs else o
           for o in spec.ops]
    return dataclasses.replace(spec, source=src, ops=ops, cost_mode=mode)


def active_rules(spec: PipelineSpec, disabled=()) -> list[str]:
    names = list(spec.enable_rules) if spec.enable_rules else list(RULE_NAMES)
    off = set(spec.disable_rules) | set(disabled)
    return [n for n in names if n not in off]


def prepare(spec: PipelineSpec, mode: str, udfs: SyntheticUdfs | None = None, *, disabled_rules=(),
            knob_values=None, zero_cost: bool = False):
    """Graph for ``mode`` after any static rewrites, with the rewrite report."""
    udfs = udfs or SyntheticUdfs()
    node = build_pipeline(spec, mode, udfs, knob_values=knob_values, zero_cost=zero_cost)
    report = None
    if mode == "all-features" or (spec.optimize and mode != "sequential"):
        rules = active_rules(spec, disabled_rules)
        disabled = [n for n in RULE_NAMES if n not in rules]
        ds, report = optimize(node, disabled=disabled, order=[n for n in RULE_NAMES if n in rules],
                              registry=udfs.registry)
        node = ds.root
    return node, report, udfs


def count_elements(spec: PipelineSpec, udfs: SyntheticUdfs | None = None) -> int:
    """Elements per epoch, from a zero-cost sequential pass."""
    udfs = udfs or SyntheticUdfs()
    node = build_pipeline(spec, "sequential", udfs, zero_cost=True)
    n = 0
    with make_iterator(node, registry=udfs.registry, autotune=False, seed_override=spec.seed) as it:
        while it.get_next() is not EOS:
            n += 1
    return n


# -- running ---------------------------------------------------------------


@dataclass
class RunReport:
    mode: str
    epochs: int
    elements_per_epoch: int
    epoch_wall_time: float
    epoch_wall_times: list[float]
    warmup_wall_time: float
    per_batch_latency: dict[str, float]
    per_node: dict[str, dict[str, Any]]
    applied_rewrites: list[tuple[str, str]]
    tuned_parameters: dict[str, dict[str, int]]
    tuner: dict[str, Any] = field(default_factory=dict)
    epoch_digests: list[str] = field(default_factory=list)
    graph: str = ""

    @property
    def per_element_time(self) -> float:
        return self.epoch_wall_time / self.elements_per_epoch if self.elements_per_epoch else 0.0

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["per_element_time"] = self.per_element_time
        return d

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str)


def _percentiles(samples: list[float]) -> dict[str, float]:
    if not samples:
        return {"count": 0, "mean": 0.0, "p50": 0.0, "p90": 0.0, "p99": 0.0, "max": 0.0}
    a = np.asarray(samples)
    p50, p90, p99 = np.percentile(a, [50, 90, 99])
    return {"count": len(samples), "mean": float(a.mean()), "p50": float(p50), "p90": float(p90),
            "p99": float(p99), "max": float(a.max())}


def _options(spec: PipelineSpec, mode: str, *, deterministic, seed, budget_cpu, budget_ram_mb, cost_mode,
             tuner_config=None) -> Options:
    if deterministic is None:
        deterministic = spec.deterministic
    if deterministic is None:
        deterministic = mode != "all-features"
    cpu = budget_cpu if budget_cpu is not None else spec.budget_cpu
    ram_mb = budget_ram_mb if budget_ram_mb is not None else spec.budget_ram_mb
    budget = Budget(cpu=cpu, ram_bytes=None if ram_mb is None else ram_mb * (1 << 20))
    return Options(
        deterministic=deterministic,
        seed_override=seed if seed is not None else spec.seed,
        autotune=mode in ("tuned", "all-features"),
        synthetic_mode=cost_mode or spec.cost_mode,
        budget=budget,
        tuner_config=tuner_config,
    )


def run(spec: PipelineSpec, mode: str = "hand-tuned", *, epochs: int | None = None, warmup: int = 1,
        budget_cpu: float | None = None, budget_ram_mb: float | None = None, disabled_rules=(),
        deterministic: bool | None = None, seed: int | None = None, knob_values=None,
        cost_mode: str | None = None, tuner_dump: bool = False, tuner_config=None,
        listeners=(), keep_elements: bool = False) -> RunReport:
    """Execute ``spec`` under ``mode`` and measure it.

    Raises :class:`RunFailed` carrying the failing node's path when the
    pipeline raises.
    """
    if cost_mode is not None:
        spec = with_cost_mode(spec, cost_mode)
    spec_cost = spec.cost_mode
    epochs = epochs or spec.epochs or DEFAULT_EPOCHS
    node, report, udfs = prepare(spec, mode, disabled_rules=disabled_rules, knob_values=knob_values)
    try:
        per_epoch = count_elements(spec, udfs)
    except FlowlineError as exc:
        raise RunFailed(getattr(exc, "path", None), exc) from exc
    total = epochs + warmup
    root = build("repeat", (node,), {"count": total}, udfs.registry) if total > 1 else node
    options = _options(spec, mode, deterministic=deterministic, seed=seed, budget_cpu=budget_cpu,
                       budget_ram_mb=budget_ram_mb, cost_mode=spec_cost, tuner_config=tuner_config)

    it = make_iterator(root, options, registry=udfs.registry)
    tuner = it.tuner
    if tuner is not None:
        for fn in listeners:
            tuner.listeners.append(fn)
    think_ns = spec.consumer_step_ns
    times: list[float] = []
    latencies: list[float] = []
    digests: list[str] = []
    elements: list[list[tuple]] = []
    try:
        for epoch in range(total):
            h = hashlib.sha256()
            kept = []
            t0 = perf_ns()
            for _ in range(per_epoch):
                s = perf_ns()
                e = it.get_next()
                if e is EOS:
                    raise RunFailed("0", FlowlineError(f"epoch {epoch} ended early"))
                if epoch >= warmup:
                    latencies.append((perf_ns() - s) / 1e9)
                h.update(encode_element(e))
                if keep_elements:
                    kept.append(e)
                spend(think_ns, spec.consumer_mode)
            times.append((perf_ns() - t0) / 1e9)
            digests.append(h.hexdigest())
            if keep_elements:
                elements.append(kept)
        if it.get_next() is not EOS:
            raise RunFailed("0", FlowlineError("pipeline produced more elements than counted"))
        tunables = it.tunables()
        metrics = it.metrics()
        tuner_info: dict[str, Any] = {}
        if tuner is not None:
            hist = tuner.history
            tuner_info = {
                "rounds": tuner.rounds,
                "publishes": len(hist),
                "within_budget": all(r.within_budget for r in hist),
                "max_cpu_usage": max((r.cpu_usage for r in hist), default=0.0),
                "max_ram_usage": max((r.ram_usage for r in hist), default=0.0),
                "cpu_budget": options.budget.resolved()[0],
                "ram_budget": options.budget.resolved()[1],
            }
            if tuner_dump:
                tuner_info["dump"] = tuner.dump()
    except RunFailed:
        raise
    except FlowlineError as exc:
        raise RunFailed(getattr(exc, "path", None), exc) from exc
    finally:
        it.close()

    measured = times[warmup:] if len(times) > warmup else times
    rep = RunReport(
        mode=mode,
        epochs=epochs,
        elements_per_epoch=per_epoch,
        epoch_wall_time=statistics.median(measured) if measured else 0.0,
        epoch_wall_times=measured,
        warmup_wall_time=sum(times[:warmup]),
        per_batch_latency=_percentiles(latencies),
        per_node=metrics,
        applied_rewrites=list(report.applied) if report is not None else [],
        tuned_parameters=tunables,
        tuner=tuner_info,
        epoch_digests=digests[warmup:],
        graph=_describe_graph(node),
    )
    if keep_elements:
        rep.elements = elements[warmup:]  # type: ignore[attr-defined]
    return rep


def _describe_graph(node: DatasetNode) -> str:
    lines = []
    for path, n in walk(node):
        attrs = {k: v for k, v in n.attrs.items() if k not in ("elements", "output_spec", "element_spec")}
        shown = " ".join(f"{k}={v}" for k, v in attrs.items() if v is not None)
        depth = path.count(".") + path.count("/")
        lines.append(f"{'  ' * depth}{path} {n.kind} {shown}".rstrip())
    return "\n".join(lines)


# -- comparisons -----------------------------------------------------------


@dataclass
class ComparisonTable:
    reports: dict[str, RunReport]

    @property
    def speedups(self) -> dict[str, float]:
        base = self.reports["sequential"].epoch_wall_time
        return {m: (base / r.epoch_wall_time if r.epoch_wall_time > 0 else math.inf) for m, r in self.reports.items()}

    @property
    def tuned_vs_hand(self) -> float:
        """Tuned epoch time over hand-tuned epoch time (1.0 means equal)."""
        h = self.reports["hand-tuned"].epoch_wall_time
        return self.reports["tuned"].epoch_wall_time / h if h > 0 else math.inf

    def to_text(self) -> str:
        lines = [f"{'mode':<14}{'epoch s':>10}{'per elem ms':>13}{'speedup':>10}"]
        for m, r in self.reports.items():
            lines.append(f"{m:<14}{r.epoch_wall_time:>10.4f}{r.per_element_time * 1e3:>13.3f}"
                         f"{self.speedups[m]:>9.2f}x")
        lines.append(f"tuned / hand-tuned epoch time: {self.tuned_vs_hand:.3f}")
        tuned = self.reports["tuned"]
        if tuned.tuner:
            t = tuned.tuner
            lines.append(f"tuner: publishes={t['publishes']} max_cpu={t['max_cpu_usage']:g}/{t['cpu_budget']:g} "
                         f"within_budget={t['within_budget']}")
            lines.append(f"tuned parameters: {json.dumps(tuned.tuned_parameters, sort_keys=True)}")
        return "\n".join(lines)

    def to_dict(self) -> dict[str, Any]:
        return {"reports": {m: r.to_dict() for m, r in self.reports.items()}, "speedups": self.speedups,
                "tuned_vs_hand": self.tuned_vs_hand}


def compare(spec: PipelineSpec, modes=("sequential", "hand-tuned", "tuned"), **kwargs) -> ComparisonTable:
    return ComparisonTable({m: run(spec, m, **kwargs) for m in modes})


@dataclass
class GridResult:
    best: dict[tuple[str, str], int]
    best_time: float
    points: list[tuple[dict[tuple[str, str], int], float]]
    tolerance: float

    def to_text(self) -> str:
        fmt = lambda p: " ".join(f"{l}.{a}={v}" for (l, a), v in sorted(p.items())) or "(no knobs)"
        lines = [f"{fmt(p):<50} {t:.4f}s" for p, t in self.points]
        lines.append(f"best: {fmt(self.best)} epoch {self.best_time:.4f}s")
        return "\n".join(lines)

    def to_dict(self) -> dict[str, Any]:
        key = lambda p: {f"{l}.{a}": v for (l, a), v in p.items()}
        return {"best": key(self.best), "best_time": self.best_time, "tolerance": self.tolerance,
                "points": [{"values": key(p), "epoch_wall_time": t} for p, t in self.points]}


def default_grid(spec: PipelineSpec) -> dict[tuple[str, str], list[int]]:
    """Powers of two for every AUTO knob, capped by its natural bound."""
    grid = {}
    for op, name, k in spec.knobs():
        if not k.auto:
            continue
        cap = op.attrs["cycle"] if op.kind == "interleave" else (8 if op.kind == "prefetch" else 16)
        vals = sorted({v for v in (1, 2, 4, 8, 16) if v <= cap} | {cap})
        grid[(op.label, name)] = vals
    return grid


def grid_points(grid: dict[tuple[str, str], list[int]]) -> list[dict[tuple[str, str], int]]:
    size = math.prod(len(v) for v in grid.values()) if grid else 1
    if size > MAX_GRID_POINTS:
        raise GridTooLarge(f"grid has {size} points, more than {MAX_GRID_POINTS}")
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _parallelism_units(spec: PipelineSpec, point: dict[tuple[str, str], int]) -> int:
    total = 0
    for op, name, k in spec.knobs():
        if name == "parallel":
            total += point.get((op.label, name), k.hand())
    return total


def gridsearch(spec: PipelineSpec, grid: dict[tuple[str, str], list[int]] | None = None, *,
               tolerance: float = GRID_TOLERANCE, budget_cpu: float | None = None, **kwargs) -> GridResult:
    """Measure every grid point in hand-tuned mode and return the fastest.

    Points whose epoch time is within ``tolerance`` of the minimum count as
    ties; among them the one using the fewest knob units wins. Points that
    exceed the CPU budget (when one is set) are skipped.
    """
    grid = grid if grid is not None else (spec.grid or default_grid(spec))
    points = grid_points(grid)
    cpu = budget_cpu if budget_cpu is not None else spec.budget_cpu
    results = []
    for point in points:
        if cpu is not None and _parallelism_units(spec, point) > cpu:
            continue
        rep = run(spec, "hand-tuned", knob_values=point, budget_cpu=budget_cpu, **kwargs)
        results.append((point, rep.epoch_wall_time))
    if not results:
        raise GridTooLarge("no grid point fits the CPU budget")
    fastest = min(t for _, t in results)
    ties = [(p, t) for p, t in results if t <= fastest * (1 + tolerance)]
    best, best_time = min(ties, key=lambda pt: (sum(pt[0].values()), pt[1]))
    return GridResult(best, best_time, results, tolerance)
