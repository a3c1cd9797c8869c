"""The stateless dataset expression tree.

Every :class:`DatasetNode` is validated on construction: arity, attributes and
element types are checked and the output spec is derived, so a node that
exists is a valid node. :class:`Dataset` wraps a root node with the usual
fluent transformation methods.
"""

from __future__ import annotations

import math
from types import MappingProxyType
from dataclasses import dataclass
from typing import Any, Iterator, Mapping, Sequence

from flowline.elements import (
    BYTES,
    INT64,
    Element,
    ElementSpec,
    ListOf,
    UdfRegistry,
    as_element,
    default_registry,
    infer_spec,
    conforms,
)
from flowline.errors import InvalidArity, InvalidAttr, TypeMismatch, UnknownUdf


class Sentinel:
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self) -> str:
        return self.name

    def __reduce__(self):
        return self.name


AUTOTUNE = Sentinel("AUTOTUNE")
INFINITE = Sentinel("INFINITE")

# Static cardinalities.
INFINITE_CARDINALITY = -1
UNKNOWN_CARDINALITY = -2

SOURCE_KINDS = ("from_memory", "from_file")
MULTI_INPUT_KINDS = ("zip", "concatenate")
FUSED_KINDS = ("map_and_batch", "map_and_filter", "shuffle_and_repeat")
KINDS = (
    "from_memory",
    "from_file",
    "map",
    "filter",
    "flat_map",
    "interleave",
    "batch",
    "unbatch",
    "prefetch",
    "repeat",
    "shuffle",
    "shard",
    "zip",
    "concatenate",
    "cache",
    "reduce",
) + FUSED_KINDS

# Attributes each kind accepts, with defaults. ``REQUIRED`` marks mandatory ones.
REQUIRED = object()

_ATTRS: dict[str, dict[str, Any]] = {
    "from_memory": {"elements": REQUIRED, "element_spec": None},
    "from_file": {"paths": REQUIRED},
    "map": {"fn": REQUIRED, "num_parallel_calls": 1, "deterministic": None, "output_spec": None},
    "filter": {"predicate": REQUIRED},
    "flat_map": {"fn": REQUIRED, "output_spec": None},
    "interleave": {
        "fn": REQUIRED,
        "cycle_length": REQUIRED,
        "num_parallel_calls": 1,
        "deterministic": None,
        "output_spec": None,
    },
    "batch": {"batch_size": REQUIRED, "drop_remainder": False, "assembly_cost_ns": 0},
    "unbatch": {},
    "prefetch": {"buffer_size": REQUIRED},
    "repeat": {"count": INFINITE},
    "shuffle": {"buffer_size": REQUIRED, "seed": None},
    "shard": {"num_shards": REQUIRED, "index": REQUIRED},
    "zip": {},
    "concatenate": {},
    "cache": {},
    "reduce": {"fn": REQUIRED, "initial": REQUIRED},
    "map_and_batch": {
        "fn": REQUIRED,
        "batch_size": REQUIRED,
        "drop_remainder": False,
        "num_parallel_calls": 1,
        "deterministic": None,
        "assembly_cost_ns": 0,
        "output_spec": None,
    },
    "map_and_filter": {
        "fn": REQUIRED,
        "predicate": REQUIRED,
        "num_parallel_calls": 1,
        "deterministic": None,
        "output_spec": None,
    },
    "shuffle_and_repeat": {"buffer_size": REQUIRED, "seed": None, "count": INFINITE},
}

# Attributes holding random seeds; fingerprints ignore them.
SEED_ATTRS = frozenset({"seed"})
# Attributes holding UDF names.
UDF_ATTRS = frozenset({"fn", "predicate"})


@dataclass(frozen=True, eq=True)
class DatasetNode:
    kind: str
    inputs: tuple["DatasetNode", ...]
    attrs: Mapping[str, Any]
    output_spec: ElementSpec
    cardinality: int

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        shown = {k: v for k, v in self.attrs.items() if k not in ("elements", "output_spec")}
        return f"DatasetNode({self.kind}, {shown}, inputs={len(self.inputs)})"

    @property
    def is_source(self) -> bool:
        return self.kind in SOURCE_KINDS

    def replace(self, registry: UdfRegistry | None = None, **changes: Any) -> "DatasetNode":
        """Rebuild with some attributes changed."""
        attrs = dict(self.attrs)
        attrs.update(changes)
        return build(self.kind, self.inputs, attrs, registry)

    def with_inputs(self, inputs: Sequence["DatasetNode"]) -> "DatasetNode":
        return build(self.kind, tuple(inputs), dict(self.attrs))


def walk(node: DatasetNode, path: str = "0") -> Iterator[tuple[str, DatasetNode]]:
    """Pre-order traversal yielding ``(path, node)``; child ``i`` of ``p`` is ``p.i``."""
    yield path, node
    for i, child in enumerate(node.inputs):
        yield from walk(child, f"{path}.{i}")


def node_at(root: DatasetNode, path: str) -> DatasetNode:
    parts = path.split(".")
    if parts[0] != "0":
        raise KeyError(path)
    node = root
    for p in parts[1:]:
        node = node.inputs[int(p)]
    return node


def count_nodes(node: DatasetNode) -> int:
    return 1 + sum(count_nodes(c) for c in node.inputs)


# -- validation helpers ----------------------------------------------------


def _positive_int(kind: str, name: str, value: Any, allow: Sentinel | None = None) -> None:
    if allow is not None and value is allow:
        return
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        extra = f" or {allow!r}" if allow is not None else ""
        raise InvalidAttr(f"{kind}.{name} must be an integer >= 1{extra}, got {value!r}")


def _optional_bool(kind: str, name: str, value: Any) -> None:
    if value is not None and not isinstance(value, bool):
        raise InvalidAttr(f"{kind}.{name} must be a bool or None, got {value!r}")


def _bool(kind: str, name: str, value: Any) -> None:
    if not isinstance(value, bool):
        raise InvalidAttr(f"{kind}.{name} must be a bool, got {value!r}")


def _udf_name(kind: str, name: str, value: Any) -> None:
    if not isinstance(value, str) or not value:
        raise InvalidAttr(f"{kind}.{name} must name a registered UDF, got {value!r}")


def _seed(kind: str, value: Any) -> None:
    if value is None:
        return
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2**64:
        raise InvalidAttr(f"{kind}.seed must be an unsigned 64-bit integer, got {value!r}")


def _nonneg_int(kind: str, name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise InvalidAttr(f"{kind}.{name} must be an integer >= 0, got {value!r}")


def _lookup(registry: UdfRegistry, name: str):
    try:
        return registry.get(name)
    except UnknownUdf:
        return None


def _map_output(kind: str, attrs: dict, in_spec: ElementSpec, registry: UdfRegistry) -> ElementSpec:
    declared = attrs.get("output_spec")
    if declared is not None:
        if not isinstance(declared, ElementSpec):
            raise InvalidAttr(f"{kind}.output_spec must be an ElementSpec")
        return declared
    udf = _lookup(registry, attrs["fn"])
    if udf is None:
        # Unregistered functions surface as UnknownUdf when iterated.
        return in_spec
    return udf.result_spec(in_spec)


def _dataset_fn_output(kind: str, attrs: dict, in_spec: ElementSpec, registry: UdfRegistry) -> ElementSpec:
    declared = attrs.get("output_spec")
    if declared is not None:
        if not isinstance(declared, ElementSpec):
            raise InvalidAttr(f"{kind}.output_spec must be an ElementSpec")
        return declared
    udf = _lookup(registry, attrs["fn"])
    if udf is None or udf.output_spec is None:
        raise InvalidAttr(
            f"{kind}.fn {attrs['fn']!r} must declare the element spec of the datasets it returns"
        )
    return udf.result_spec(in_spec)


def _batched(es: ElementSpec, length: int | None) -> ElementSpec:
    return ElementSpec(tuple(ListOf(c, length) for c in es))


def _batch_cardinality(card: int, b: int, drop: bool) -> int:
    if card < 0:
        return card
    return card // b if drop else math.ceil(card / b)


def _batch_length(card: int, b: int, drop: bool) -> int | None:
    # Static length is known only when no partial batch can be emitted.
    if drop or card == INFINITE_CARDINALITY or (card >= 0 and card % b == 0):
        return b
    return None


def _repeat_cardinality(card: int, count: Any) -> int:
    if card == 0:
        return 0
    if count is INFINITE:
        return INFINITE_CARDINALITY if card != UNKNOWN_CARDINALITY else UNKNOWN_CARDINALITY
    if card < 0:
        return card
    return card * count


# -- construction ----------------------------------------------------------


def build(
    kind: str,
    inputs: Sequence[DatasetNode] = (),
    attrs: Mapping[str, Any] | None = None,
    registry: UdfRegistry | None = None,
) -> DatasetNode:
    """Validate and construct a node, deriving its output spec and cardinality."""
    if kind not in _ATTRS:
        raise InvalidAttr(f"unknown dataset kind {kind!r}")
    registry = registry or default_registry()
    inputs = tuple(inputs)
    for i in inputs:
        if not isinstance(i, DatasetNode):
            raise InvalidArity(f"{kind} inputs must be DatasetNodes, got {type(i).__name__}")

    if kind in SOURCE_KINDS:
        ok = len(inputs) == 0
    elif kind in MULTI_INPUT_KINDS:
        ok = len(inputs) >= 2
    else:
        ok = len(inputs) == 1
    if not ok:
        raise InvalidArity(f"{kind} does not accept {len(inputs)} inputs")

    given = dict(attrs or {})
    schema = _ATTRS[kind]
    unknown = set(given) - set(schema)
    if unknown:
        raise InvalidAttr(f"{kind} does not accept attributes {sorted(unknown)}")
    full: dict[str, Any] = {}
    for name, default in schema.items():
        if name in given:
            full[name] = given[name]
        elif default is REQUIRED:
            raise InvalidAttr(f"{kind}.{name} is required")
        else:
            full[name] = default

    in_spec = inputs[0].output_spec if inputs else None
    in_card = inputs[0].cardinality if inputs else 0
    check = _CHECKS[kind]
    out_spec, card = check(kind, full, inputs, in_spec, in_card, registry)
    if kind in ("map", "flat_map", "interleave", "map_and_filter"):
        full["output_spec"] = out_spec
    return DatasetNode(kind, inputs, MappingProxyType(full), out_spec, card)


def _check_from_memory(kind, a, inputs, in_spec, in_card, registry):
    raw = a["elements"]
    if not isinstance(raw, (list, tuple)):
        raise InvalidAttr("from_memory.elements must be a sequence")
    elements = tuple(as_element(e) for e in raw)
    a["elements"] = elements
    declared = a["element_spec"]
    if declared is None:
        es = infer_spec(list(elements))
    else:
        if not isinstance(declared, ElementSpec):
            raise InvalidAttr("from_memory.element_spec must be an ElementSpec")
        es = declared
        for idx, e in enumerate(elements):
            if not conforms(e, es):
                raise TypeMismatch(f"element {idx} does not conform to {es}")
    return es, len(elements)


def _check_from_file(kind, a, inputs, in_spec, in_card, registry):
    paths = a["paths"]
    if isinstance(paths, str) or not isinstance(paths, (list, tuple)):
        raise InvalidAttr("from_file.paths must be a list of file names")
    if not all(isinstance(p, str) and p for p in paths):
        raise InvalidAttr("from_file.paths entries must be non-empty strings")
    a["paths"] = tuple(paths)
    return ElementSpec((BYTES,)), (0 if not paths else UNKNOWN_CARDINALITY)


def _check_map(kind, a, inputs, in_spec, in_card, registry):
    _udf_name(kind, "fn", a["fn"])
    _positive_int(kind, "num_parallel_calls", a["num_parallel_calls"], AUTOTUNE)
    _optional_bool(kind, "deterministic", a["deterministic"])
    return _map_output(kind, a, in_spec, registry), in_card


def _check_filter(kind, a, inputs, in_spec, in_card, registry):
    _udf_name(kind, "predicate", a["predicate"])
    return in_spec, (0 if in_card == 0 else UNKNOWN_CARDINALITY)


def _check_flat_map(kind, a, inputs, in_spec, in_card, registry):
    _udf_name(kind, "fn", a["fn"])
    return _dataset_fn_output(kind, a, in_spec, registry), (0 if in_card == 0 else UNKNOWN_CARDINALITY)


def _check_interleave(kind, a, inputs, in_spec, in_card, registry):
    _udf_name(kind, "fn", a["fn"])
    _positive_int(kind, "cycle_length", a["cycle_length"])
    p = a["num_parallel_calls"]
    _positive_int(kind, "num_parallel_calls", p, AUTOTUNE)
    if p is not AUTOTUNE and p > a["cycle_length"]:
        raise InvalidAttr(
            f"interleave.num_parallel_calls ({p}) exceeds cycle_length ({a['cycle_length']})"
        )
    _optional_bool(kind, "deterministic", a["deterministic"])
    return _dataset_fn_output(kind, a, in_spec, registry), (0 if in_card == 0 else UNKNOWN_CARDINALITY)


def _check_batch(kind, a, inputs, in_spec, in_card, registry):
    b = a["batch_size"]
    _positive_int(kind, "batch_size", b)
    _bool(kind, "drop_remainder", a["drop_remainder"])
    _nonneg_int(kind, "assembly_cost_ns", a["assembly_cost_ns"])
    drop = a["drop_remainder"]
    return _batched(in_spec, _batch_length(in_card, b, drop)), _batch_cardinality(in_card, b, drop)


def _check_unbatch(kind, a, inputs, in_spec, in_card, registry):
    for i, c in enumerate(in_spec):
        if not isinstance(c, ListOf):
            raise TypeMismatch(f"unbatch requires list components, got {c}", component=i)
    lengths = {c.length for c in in_spec}
    card = UNKNOWN_CARDINALITY
    if len(lengths) == 1 and None not in lengths and in_card >= 0:
        card = in_card * lengths.pop()
    elif in_card == 0:
        card = 0
    return ElementSpec(tuple(c.inner for c in in_spec)), card


def _check_prefetch(kind, a, inputs, in_spec, in_card, registry):
    _positive_int(kind, "buffer_size", a["buffer_size"], AUTOTUNE)
    return in_spec, in_card


def _check_repeat(kind, a, inputs, in_spec, in_card, registry):
    _positive_int(kind, "count", a["count"], INFINITE)
    return in_spec, _repeat_cardinality(in_card, a["count"])


def _check_shuffle(kind, a, inputs, in_spec, in_card, registry):
    _positive_int(kind, "buffer_size", a["buffer_size"])
    _seed(kind, a["seed"])
    return in_spec, in_card


def _check_shard(kind, a, inputs, in_spec, in_card, registry):
    k, i = a["num_shards"], a["index"]
    _positive_int(kind, "num_shards", k)
    if isinstance(i, bool) or not isinstance(i, int) or not 0 <= i < k:
        raise InvalidAttr(f"shard.index must satisfy 0 <= index < {k}, got {i!r}")
    card = in_card
    if in_card >= 0:
        card = max(0, math.ceil((in_card - i) / k))
    return in_spec, card


def _check_zip(kind, a, inputs, in_spec, in_card, registry):
    comps: list = []
    cards = []
    for n in inputs:
        comps.extend(n.output_spec.components)
        cards.append(n.cardinality)
    known = [c for c in cards if c >= 0]
    if known:
        card = min(known)
        if card != 0 and UNKNOWN_CARDINALITY in cards:
            card = UNKNOWN_CARDINALITY
    elif UNKNOWN_CARDINALITY in cards:
        card = UNKNOWN_CARDINALITY
    else:
        card = INFINITE_CARDINALITY
    return ElementSpec(tuple(comps)), card


def _check_concatenate(kind, a, inputs, in_spec, in_card, registry):
    first = inputs[0].output_spec
    for n in inputs[1:]:
        other = n.output_spec
        if len(other) != len(first):
            raise TypeMismatch(f"concatenate inputs have arity {len(first)} and {len(other)}")
        for i, (x, y) in enumerate(zip(first, other)):
            if x != y:
                raise TypeMismatch(f"concatenate inputs differ: {x} vs {y}", component=i)
    cards = [n.cardinality for n in inputs]
    if UNKNOWN_CARDINALITY in cards:
        card = UNKNOWN_CARDINALITY
    elif INFINITE_CARDINALITY in cards:
        card = INFINITE_CARDINALITY
    else:
        card = sum(cards)
    return first, card


def _check_cache(kind, a, inputs, in_spec, in_card, registry):
    return in_spec, in_card


def _check_reduce(kind, a, inputs, in_spec, in_card, registry):
    _udf_name(kind, "fn", a["fn"])
    try:
        init = as_element(a["initial"])
    except TypeMismatch as exc:
        raise InvalidAttr(f"reduce.initial: {exc}") from None
    a["initial"] = init
    return infer_spec([init]), 1


def _check_map_and_batch(kind, a, inputs, in_spec, in_card, registry):
    _udf_name(kind, "fn", a["fn"])
    b = a["batch_size"]
    _positive_int(kind, "batch_size", b)
    _bool(kind, "drop_remainder", a["drop_remainder"])
    _positive_int(kind, "num_parallel_calls", a["num_parallel_calls"], AUTOTUNE)
    _optional_bool(kind, "deterministic", a["deterministic"])
    _nonneg_int(kind, "assembly_cost_ns", a["assembly_cost_ns"])
    mapped = _map_output(kind, a, in_spec, registry)
    a["output_spec"] = mapped
    drop = a["drop_remainder"]
    return _batched(mapped, _batch_length(in_card, b, drop)), _batch_cardinality(in_card, b, drop)


def _check_map_and_filter(kind, a, inputs, in_spec, in_card, registry):
    _udf_name(kind, "fn", a["fn"])
    _udf_name(kind, "predicate", a["predicate"])
    _positive_int(kind, "num_parallel_calls", a["num_parallel_calls"], AUTOTUNE)
    _optional_bool(kind, "deterministic", a["deterministic"])
    return _map_output(kind, a, in_spec, registry), (0 if in_card == 0 else UNKNOWN_CARDINALITY)


def _check_shuffle_and_repeat(kind, a, inputs, in_spec, in_card, registry):
    _positive_int(kind, "buffer_size", a["buffer_size"])
    _seed(kind, a["seed"])
    _positive_int(kind, "count", a["count"], INFINITE)
    return in_spec, _repeat_cardinality(in_card, a["count"])


_CHECKS = {
    "from_memory": _check_from_memory,
    "from_file": _check_from_file,
    "map": _check_map,
    "filter": _check_filter,
    "flat_map": _check_flat_map,
    "interleave": _check_interleave,
    "batch": _check_batch,
    "unbatch": _check_unbatch,
    "prefetch": _check_prefetch,
    "repeat": _check_repeat,
    "shuffle": _check_shuffle,
    "shard": _check_shard,
    "zip": _check_zip,
    "concatenate": _check_concatenate,
    "cache": _check_cache,
    "reduce": _check_reduce,
    "map_and_batch": _check_map_and_batch,
    "map_and_filter": _check_map_and_filter,
    "shuffle_and_repeat": _check_shuffle_and_repeat,
}


# -- fluent wrapper --------------------------------------------------------


class Dataset:
    """An immutable input pipeline definition rooted at ``root``."""

    __slots__ = ("root",)

    def __init__(self, root: DatasetNode):
        object.__setattr__(self, "root", root)

    def __setattr__(self, name, value):
        raise AttributeError("Dataset is immutable")

    def __eq__(self, other) -> bool:
        return isinstance(other, Dataset) and self.root == other.root

    __hash__ = object.__hash__

    def __repr__(self) -> str:
        return f"Dataset({describe(self.root)})"

    # dataset-level queries

    @property
    def element_spec(self) -> ElementSpec:
        return self.root.output_spec

    @property
    def cardinality(self) -> int:
        return self.root.cardinality

    def serialize(self) -> bytes:
        from flowline.serialization import serialize

        return serialize(self)

    def fingerprint(self):
        from flowline.serialization import fingerprint

        return fingerprint(self)

    def make_iterator(self, **options):
        from flowline.runtime import make_iterator

        return make_iterator(self, **options)

    def __iter__(self):
        it = self.make_iterator()
        try:
            yield from it
        finally:
            it.close()

    # sources

    @staticmethod
    def from_memory(elements: Sequence[Any], element_spec: ElementSpec | None = None) -> "Dataset":
        return Dataset(build("from_memory", (), {"elements": list(elements), "element_spec": element_spec}))

    @staticmethod
    def from_file(paths: Sequence[str] | str) -> "Dataset":
        if isinstance(paths, str):
            paths = [paths]
        return Dataset(build("from_file", (), {"paths": list(paths)}))

    @staticmethod
    def range(n: int) -> "Dataset":
        return Dataset.from_memory(list(range(n)), ElementSpec((INT64,)))

    # transformations

    def _apply(self, kind: str, registry: UdfRegistry | None = None, **attrs) -> "Dataset":
        return Dataset(build(kind, (self.root,), attrs, registry))

    def map(self, fn: str, num_parallel_calls: int | Sentinel = 1, deterministic: bool | None = None,
            output_spec: ElementSpec | None = None) -> "Dataset":
        return self._apply("map", fn=fn, num_parallel_calls=num_parallel_calls,
                           deterministic=deterministic, output_spec=output_spec)

    def filter(self, predicate: str) -> "Dataset":
        return self._apply("filter", predicate=predicate)

    def flat_map(self, fn: str, output_spec: ElementSpec | None = None) -> "Dataset":
        return self._apply("flat_map", fn=fn, output_spec=output_spec)

    def interleave(self, fn: str, cycle_length: int, num_parallel_calls: int | Sentinel = 1,
                   deterministic: bool | None = None, output_spec: ElementSpec | None = None) -> "Dataset":
        return self._apply("interleave", fn=fn, cycle_length=cycle_length,
                           num_parallel_calls=num_parallel_calls, deterministic=deterministic,
                           output_spec=output_spec)

    def batch(self, batch_size: int, drop_remainder: bool = False, assembly_cost_ns: int = 0) -> "Dataset":
        return self._apply("batch", batch_size=batch_size, drop_remainder=drop_remainder,
                           assembly_cost_ns=assembly_cost_ns)

    def unbatch(self) -> "Dataset":
        return self._apply("unbatch")

    def prefetch(self, buffer_size: int | Sentinel) -> "Dataset":
        return self._apply("prefetch", buffer_size=buffer_size)

    def repeat(self, count: int | Sentinel = INFINITE) -> "Dataset":
        return self._apply("repeat", count=count)

    def shuffle(self, buffer_size: int, seed: int | None = None) -> "Dataset":
        return self._apply("shuffle", buffer_size=buffer_size, seed=seed)

    def shard(self, num_shards: int, index: int) -> "Dataset":
        return self._apply("shard", num_shards=num_shards, index=index)

    def cache(self) -> "Dataset":
        return self._apply("cache")

    def reduce(self, fn: str, initial: Any) -> "Dataset":
        return self._apply("reduce", fn=fn, initial=initial)

    def zip(self, *others: "Dataset") -> "Dataset":
        return Dataset(build("zip", (self.root,) + tuple(o.root for o in others)))

    def concatenate(self, *others: "Dataset") -> "Dataset":
        return Dataset(build("concatenate", (self.root,) + tuple(o.root for o in others)))


DatasetGraph = Dataset


def zip_datasets(*datasets: Dataset) -> Dataset:
    return Dataset(build("zip", tuple(d.root for d in datasets)))


def describe(node: DatasetNode) -> str:
    """Compact one-line rendering, innermost source first."""
    parts = []
    n = node
    while True:
        label = n.kind
        if n.kind == "from_memory":
            label += f"({len(n.attrs['elements'])})"
        elif n.kind in ("map", "filter", "flat_map", "interleave", "map_and_batch", "map_and_filter", "reduce"):
            name = n.attrs.get("fn") or n.attrs.get("predicate")
            label += f"({name})"
        parts.append(label)
        if len(n.inputs) != 1:
            if n.inputs:
                parts[-1] += "[" + " | ".join(describe(i) for i in n.inputs) + "]"
            break
        n = n.inputs[0]
    return ".".join(reversed(parts))


def coerce_graph(graph: Dataset | DatasetNode) -> DatasetNode:
    if isinstance(graph, Dataset):
        return graph.root
    if isinstance(graph, DatasetNode):
        return graph
    raise TypeError(f"expected a Dataset, got {type(graph).__name__}")


def materialize(elements: Sequence[Element]) -> list[Element]:
    return [as_element(e) for e in elements]
