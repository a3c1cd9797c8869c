"""Graph rewrites applied before iteration.

Rules fuse adjacent operators into single nodes. :func:`optimize` runs
repeated bottom-up passes until no rule matches. Every application is
recorded as ``(rule, path)`` against the graph as it stood at that moment,
so :func:`replay` can reproduce the result step by step.

Attribute merging for fused nodes:

* ``num_parallel_calls``: AUTOTUNE if either side is AUTOTUNE, otherwise the
  downstream operator's value (for map + batch, the map's value).
* ``deterministic``: False if either side is False, else True if either is
  True, else None (defer to the iterator options).
* Output specs are copied from the node being replaced, so fused graphs
  never need the UDF registry to type-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from flowline.elements import UdfRegistry, default_registry, derived_name
from flowline.errors import GraphError, RewriteDiverged, RuleProducedInvalidGraph, UnknownUdf
from flowline.graph import AUTOTUNE, Dataset, DatasetNode, build, coerce_graph

MAX_ITERATIONS = 100


def merge_parallelism(upstream, downstream):
    if upstream is AUTOTUNE or downstream is AUTOTUNE:
        return AUTOTUNE
    return downstream


def merge_deterministic(a, b):
    if a is False or b is False:
        return False
    if a is True or b is True:
        return True
    return None


@dataclass
class RewriteRule:
    name: str
    apply: Callable[[DatasetNode, UdfRegistry], DatasetNode | None]
    enabled: bool = True

    def __call__(self, node: DatasetNode, registry: UdfRegistry) -> DatasetNode | None:
        return self.apply(node, registry)


# -- rules -----------------------------------------------------------------
# Each returns the replacement for ``node`` or None when it does not match.


def _map_map(node, registry):
    if node.kind != "map" or node.inputs[0].kind != "map":
        return None
    g, f = node.attrs, node.inputs[0].attrs
    return build("map", node.inputs[0].inputs, {
        "fn": derived_name("compose", f["fn"], g["fn"]),
        "num_parallel_calls": merge_parallelism(f["num_parallel_calls"], g["num_parallel_calls"]),
        "deterministic": merge_deterministic(f["deterministic"], g["deterministic"]),
        "output_spec": node.output_spec,
    })


def _map_batch(node, registry):
    if node.kind != "batch" or node.inputs[0].kind != "map":
        return None
    m, b = node.inputs[0].attrs, node.attrs
    return build("map_and_batch", node.inputs[0].inputs, {
        "fn": m["fn"],
        "batch_size": b["batch_size"],
        "drop_remainder": b["drop_remainder"],
        "num_parallel_calls": m["num_parallel_calls"],
        "deterministic": m["deterministic"],
        "assembly_cost_ns": b["assembly_cost_ns"],
        "output_spec": m["output_spec"],
    })


def _shuffle_repeat(node, registry):
    if node.kind != "repeat" or node.inputs[0].kind != "shuffle":
        return None
    s = node.inputs[0].attrs
    return build("shuffle_and_repeat", node.inputs[0].inputs, {
        "buffer_size": s["buffer_size"],
        "seed": s["seed"],
        "count": node.attrs["count"],
    })


def _map_filter(node, registry):
    if node.kind != "filter" or node.inputs[0].kind != "map":
        return None
    m = node.inputs[0].attrs
    return build("map_and_filter", node.inputs[0].inputs, {
        "fn": m["fn"],
        "predicate": node.attrs["predicate"],
        "num_parallel_calls": m["num_parallel_calls"],
        "deterministic": m["deterministic"],
        "output_spec": m["output_spec"],
    })


def _filter_filter(node, registry):
    if node.kind != "filter" or node.inputs[0].kind != "filter":
        return None
    p, q = node.inputs[0].attrs["predicate"], node.attrs["predicate"]
    return build("filter", node.inputs[0].inputs, {"predicate": derived_name("conj", p, q)})


def _has_variant(registry: UdfRegistry, name: str) -> bool:
    try:
        return registry.get(name).vectorized is not None
    except UnknownUdf:
        return False


def _map_vectorization(node, registry):
    """``map(f).batch(b)`` -> ``batch(b).map(vectorized[f])`` when ``f`` has a variant."""
    if node.kind != "batch" or node.inputs[0].kind != "map":
        return None
    m = node.inputs[0]
    if not _has_variant(registry, m.attrs["fn"]):
        return None
    batched = build("batch", m.inputs, dict(node.attrs))
    return build("map", (batched,), {
        "fn": derived_name("vectorized", m.attrs["fn"]),
        "num_parallel_calls": m.attrs["num_parallel_calls"],
        "deterministic": m.attrs["deterministic"],
        "output_spec": node.output_spec,
    })


def default_rules() -> list[RewriteRule]:
    # Vectorization is tried before map + batch fusion so the hint wins.
    return [
        RewriteRule("map_vectorization", _map_vectorization),
        RewriteRule("map_map_fusion", _map_map),
        RewriteRule("map_batch_fusion", _map_batch),
        RewriteRule("shuffle_repeat_fusion", _shuffle_repeat),
        RewriteRule("map_filter_fusion", _map_filter),
        RewriteRule("filter_filter_fusion", _filter_filter),
    ]


RULE_NAMES = tuple(r.name for r in default_rules())


def _rules_by_name() -> dict[str, RewriteRule]:
    return {r.name: r for r in default_rules()}


# -- driver ----------------------------------------------------------------


@dataclass
class RewriteReport:
    applied: list[tuple[str, str]] = field(default_factory=list)
    iterations: int = 0

    def __bool__(self) -> bool:
        return bool(self.applied)

    def to_text(self) -> str:
        lines = [f"iterations: {self.iterations}"]
        lines += [f"applied: {rule} at {path}" for rule, path in self.applied]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "applied": [list(a) for a in self.applied]}


def _apply_rule(rule: RewriteRule, node: DatasetNode, registry: UdfRegistry) -> DatasetNode | None:
    try:
        out = rule(node, registry)
    except GraphError as exc:
        raise RuleProducedInvalidGraph(rule.name, exc) from exc
    if out is None:
        return None
    if out.output_spec != node.output_spec:
        raise RuleProducedInvalidGraph(
            rule.name, GraphError(f"output spec changed from {node.output_spec} to {out.output_spec}"))
    return out


def _pass(node: DatasetNode, path: str, rules: Sequence[RewriteRule], registry: UdfRegistry,
          log: list[tuple[str, str]]) -> DatasetNode:
    """One post-order pass; at most one rule fires per visited node."""
    kids = [_pass(c, f"{path}.{i}", rules, registry, log) for i, c in enumerate(node.inputs)]
    if any(k is not c for k, c in zip(kids, node.inputs)):
        node = build(node.kind, kids, dict(node.attrs))
    for rule in rules:
        out = _apply_rule(rule, node, registry)
        if out is not None:
            log.append((rule.name, path))
            return out
    return node


def _select(rules: Iterable[RewriteRule] | None, disabled: Iterable[str], order: Sequence[str] | None):
    if rules is None:
        rules = default_rules()
    rules = list(rules)
    known = {r.name for r in rules}
    off = set(disabled)
    unknown = off - known
    if unknown:
        raise ValueError(f"unknown rewrite rules: {sorted(unknown)}")
    if order is not None:
        index = {name: i for i, name in enumerate(order)}
        rules.sort(key=lambda r: index.get(r.name, len(index)))
    return [r for r in rules if r.enabled and r.name not in off]


def optimize(graph: Dataset | DatasetNode, rules: Iterable[RewriteRule] | None = None, *,
             disabled: Iterable[str] = (), order: Sequence[str] | None = None,
             registry: UdfRegistry | None = None) -> tuple[Dataset, RewriteReport]:
    """Rewrite ``graph`` to a fixed point of the enabled rules."""
    registry = registry or default_registry()
    active = _select(rules, disabled, order)
    node = coerce_graph(graph)
    report = RewriteReport()
    while True:
        if report.iterations >= MAX_ITERATIONS:
            raise RewriteDiverged(f"no fixed point after {MAX_ITERATIONS} passes")
        report.iterations += 1
        log: list[tuple[str, str]] = []
        node = _pass(node, "0", active, registry, log)
        if not log:
            break
        report.applied.extend(log)
    return Dataset(node), report


def _replace_at(node: DatasetNode, parts: list[str], fn) -> DatasetNode:
    if not parts:
        return fn(node)
    i = int(parts[0])
    kids = list(node.inputs)
    kids[i] = _replace_at(kids[i], parts[1:], fn)
    return build(node.kind, kids, dict(node.attrs))


def replay(graph: Dataset | DatasetNode, applied: Iterable[tuple[str, str]],
           registry: UdfRegistry | None = None) -> Dataset:
    """Re-apply a report's rule applications to the original graph."""
    registry = registry or default_registry()
    rules = _rules_by_name()
    node = coerce_graph(graph)
    for name, path in applied:
        rule = rules[name]

        def fire(n, rule=rule):
            out = _apply_rule(rule, n, registry)
            if out is None:
                raise ValueError(f"rule {rule.name} does not match at {path}")
            return out

        node = _replace_at(node, path.split(".")[1:], fire)
    return Dataset(node)
