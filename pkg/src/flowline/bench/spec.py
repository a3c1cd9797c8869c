"""Text format for benchmark pipelines.

One statement per line, ``#`` starts a comment::

    source synthetic count=200 element_cost_ms=5 shards=4
    interleave cycle=2 parallel=AUTO(2)
    map cost_ms=2 parallel=AUTO(10)
    batch size=10 cost_ms=1
    prefetch size=AUTO(1)
    consumer step_ms=0
    options seed=7 budget_cpu=4 optimizations=-map_vectorization
    grid map2.parallel=1,2,4,8

The first statement is the source, followed by the transformations in
order. Knob attributes take an integer, ``AUTO`` or ``AUTO(n)``; ``n`` is
the hand-tuned value used by the hand-tuned mode. Each transformation gets
a label ``<kind><position>`` (``map2`` above, the source being 0) unless it
sets ``label=``; grid keys use ``label.attribute``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any

from flowline.errors import SpecError

MS_NS = 1_000_000
COST_MODES = ("sleep", "spin")

_TOKEN = re.compile(r"\S+")
_AUTO = re.compile(r"AUTO(?:\((\d+)\))?\Z")
_INT = re.compile(r"[+-]?\d+\Z")
_FLOAT = re.compile(r"[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?\Z")
_LABEL = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


@dataclass(frozen=True)
class Knob:
    """A tunable attribute: fixed, or AUTOTUNE with an optional hand value."""

    auto: bool
    value: int | None = None

    def hand(self, default: int = 1) -> int:
        return self.value if self.value is not None else default


@dataclass
class SourceSpec:
    kind: str  # "synthetic" or "files"
    count: int = 0
    cost_ns: int = 0
    shards: int = 1
    paths: list[str] = field(default_factory=list)
    cost_mode: str | None = None
    line: int = 0


@dataclass
class OpSpec:
    kind: str
    attrs: dict[str, Any]
    label: str
    line: int


@dataclass
class PipelineSpec:
    source: SourceSpec
    ops: list[OpSpec]
    consumer_step_ns: int = 0
    consumer_mode: str = "sleep"
    deterministic: bool | None = None
    seed: int | None = None
    enable_rules: list[str] = field(default_factory=list)
    disable_rules: list[str] = field(default_factory=list)
    optimize: bool | None = None
    budget_cpu: float | None = None
    budget_ram_mb: float | None = None
    epochs: int | None = None
    cost_mode: str = "sleep"
    grid: dict[tuple[str, str], list[int]] = field(default_factory=dict)
    text: str = ""

    def op(self, label: str) -> OpSpec:
        for o in self.ops:
            if o.label == label:
                return o
        raise KeyError(label)

    def knobs(self) -> list[tuple[OpSpec, str, Knob]]:
        return [(o, name, v) for o in self.ops for name, v in o.attrs.items() if isinstance(v, Knob)]

    def has_auto(self) -> bool:
        return any(k.auto for _, _, k in self.knobs())


# -- statement schemas -----------------------------------------------------
#
# attribute -> (type, default); REQUIRED marks mandatory ones.

REQUIRED = object()

_OPS: dict[str, dict[str, tuple[str, Any]]] = {
    "map": {"cost_ms": ("float", 0.0), "parallel": ("knob", Knob(False, 1)), "deterministic": ("bool", None),
            "cost_mode": ("mode", None)},
    "filter": {"keep_every": ("int", REQUIRED)},
    "interleave": {"cycle": ("int", REQUIRED), "parallel": ("knob", Knob(False, 1)),
                   "deterministic": ("bool", None)},
    "batch": {"size": ("int", REQUIRED), "drop_remainder": ("bool", False), "cost_ms": ("float", 0.0)},
    "unbatch": {},
    "prefetch": {"size": ("knob", REQUIRED)},
    "shuffle": {"buffer": ("int", REQUIRED), "seed": ("int", None)},
    "repeat": {"count": ("int", REQUIRED)},
    "shard": {"num": ("int", REQUIRED), "index": ("int", REQUIRED)},
    "cache": {},
}

_SOURCE: dict[str, dict[str, tuple[str, Any]]] = {
    "synthetic": {"count": ("int", REQUIRED), "element_cost_ms": ("float", 0.0), "shards": ("int", 1),
                  "cost_mode": ("mode", None)},
    "files": {"paths": ("list", REQUIRED), "element_cost_ms": ("float", 0.0), "cost_mode": ("mode", None)},
}
_SOURCE["file"] = _SOURCE["files"]

_CONSUMER = {"step_ms": ("float", 0.0), "cost_mode": ("mode", "sleep")}

_OPTIONS = {
    "deterministic": ("bool", None),
    "seed": ("int", None),
    "optimizations": ("list", None),
    "optimize": ("bool", None),
    "budget_cpu": ("float", None),
    "budget_ram_mb": ("float", None),
    "epochs": ("int", None),
    "cost_mode": ("mode", None),
}


class _Line:
    def __init__(self, number: int, text: str):
        self.number = number
        self.tokens = [(m.group(), m.start() + 1) for m in _TOKEN.finditer(text)]

    def error(self, column: int, message: str) -> SpecError:
        return SpecError(self.number, column, message)


def _convert(line: _Line, col: int, name: str, kind: str, raw: str):
    if kind == "knob":
        m = _AUTO.match(raw)
        if m:
            hand = int(m.group(1)) if m.group(1) else None
            if hand is not None and hand < 1:
                raise line.error(col, f"{name}: hand-tuned value must be >= 1")
            return Knob(True, hand)
        if _INT.match(raw):
            v = int(raw)
            if v < 1:
                raise line.error(col, f"{name} must be >= 1, got {v}")
            return Knob(False, v)
        raise line.error(col, f"{name} expects an integer, AUTO or AUTO(n), got {raw!r}")
    if kind == "int":
        if not _INT.match(raw):
            raise line.error(col, f"{name} expects an integer, got {raw!r}")
        return int(raw)
    if kind == "float":
        if not _FLOAT.match(raw):
            raise line.error(col, f"{name} expects a number, got {raw!r}")
        v = float(raw)
        if v < 0:
            raise line.error(col, f"{name} must be nonnegative")
        return v
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "on", "yes", "1"):
            return True
        if low in ("false", "off", "no", "0"):
            return False
        raise line.error(col, f"{name} expects true or false, got {raw!r}")
    if kind == "mode":
        if raw not in COST_MODES:
            raise line.error(col, f"{name} must be one of {', '.join(COST_MODES)}")
        return raw
    if kind == "list":
        items = [s for s in raw.split(",") if s]
        if not items:
            raise line.error(col, f"{name} expects a comma separated list")
        return items
    return raw


def _attrs(line: _Line, tokens, schema, allow_label: bool = False) -> tuple[dict[str, Any], str | None]:
    values: dict[str, Any] = {}
    label = None
    for tok, col in tokens:
        key, eq, raw = tok.partition("=")
        if not eq or not key or not raw:
            raise line.error(col, f"expected key=value, got {tok!r}")
        if allow_label and key == "label":
            if not _LABEL.match(raw):
                raise line.error(col + len(key) + 1, f"invalid label {raw!r}")
            label = raw
            continue
        if key not in schema:
            known = ", ".join(sorted(schema)) or "none"
            raise line.error(col, f"unknown attribute {key!r} (expected one of: {known})")
        if key in values:
            raise line.error(col, f"duplicate attribute {key!r}")
        values[key] = _convert(line, col + len(key) + 1, key, schema[key][0], raw)
    first_col = line.tokens[0][1]
    for key, (_, default) in schema.items():
        if key not in values:
            if default is REQUIRED:
                raise line.error(first_col, f"missing required attribute {key!r}")
            values[key] = default
    return values, label


def _parse_grid_token(line: _Line, tok: str, col: int) -> tuple[tuple[str, str], list[int]]:
    key, eq, raw = tok.partition("=")
    label, dot, attr = key.partition(".")
    if not eq or not dot or not label or not attr:
        raise line.error(col, f"grid entries look like label.attr=values, got {tok!r}")
    vcol = col + len(key) + 1
    values: list[int] = []
    for part in raw.split(","):
        m = re.fullmatch(r"(\d+)\.\.(\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if lo > hi:
                raise line.error(vcol, f"empty range {part!r}")
            values.extend(range(lo, hi + 1))
        elif _INT.match(part):
            values.append(int(part))
        else:
            raise line.error(vcol, f"grid values must be integers or lo..hi ranges, got {part!r}")
    if not values or min(values) < 1:
        raise line.error(vcol, "grid values must be positive")
    return (label, attr), sorted(set(values))


def parse_spec(text: str) -> PipelineSpec:
    """Parse a pipeline description; errors carry 1-based line and column."""
    lines = []
    for i, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0]
        if body.strip():
            lines.append(_Line(i, body))
    if not lines:
        raise SpecError(1, 1, "empty pipeline description")

    first = lines[0]
    head, col = first.tokens[0]
    if head != "source":
        raise first.error(col, f"the first statement must be 'source', got {head!r}")
    if len(first.tokens) < 2:
        raise first.error(col, "source needs a kind: synthetic or files")
    kind, kcol = first.tokens[1]
    if kind not in _SOURCE:
        raise first.error(kcol, f"unknown source kind {kind!r} (expected synthetic or files)")
    sa, _ = _attrs(first, first.tokens[2:], _SOURCE[kind])
    if kind == "synthetic":
        if sa["shards"] < 1:
            raise first.error(kcol, "shards must be >= 1")
        if sa["count"] < 0:
            raise first.error(kcol, "count must be nonnegative")
        source = SourceSpec("synthetic", sa["count"], int(round(sa["element_cost_ms"] * MS_NS)), sa["shards"],
                            cost_mode=sa["cost_mode"], line=first.number)
    else:
        source = SourceSpec("files", cost_ns=int(round(sa["element_cost_ms"] * MS_NS)), paths=list(sa["paths"]),
                            cost_mode=sa["cost_mode"], line=first.number)

    spec = PipelineSpec(source, [], text=text)
    seen_labels: set[str] = set()
    grid_lines: list[tuple[_Line, str, int]] = []
    seen_singletons: set[str] = set()
    position = 0
    for line in lines[1:]:
        head, col = line.tokens[0]
        rest = line.tokens[1:]
        if head == "source":
            raise line.error(col, "only one source statement is allowed")
        if head in ("consumer", "options"):
            if head in seen_singletons:
                raise line.error(col, f"duplicate {head} statement")
            seen_singletons.add(head)
            if head == "consumer":
                ca, _ = _attrs(line, rest, _CONSUMER)
                spec.consumer_step_ns = int(round(ca["step_ms"] * MS_NS))
                spec.consumer_mode = ca["cost_mode"]
            else:
                _apply_options(spec, line, rest)
            continue
        if head == "grid":
            if not rest:
                raise line.error(col, "grid needs at least one label.attr=values entry")
            grid_lines.extend((line, tok, c) for tok, c in rest)
            continue
        if head not in _OPS:
            known = ", ".join(sorted(_OPS))
            raise line.error(col, f"unknown statement {head!r} (expected source, {known}, consumer, options or grid)")
        position += 1
        attrs, label = _attrs(line, rest, _OPS[head], allow_label=True)
        _check_op(line, head, attrs)
        label = label or f"{head}{position}"
        if label in seen_labels:
            raise line.error(col, f"duplicate label {label!r}")
        seen_labels.add(label)
        spec.ops.append(OpSpec(head, attrs, label, line.number))

    if spec.source.shards > 1 and (not spec.ops or spec.ops[0].kind != "interleave"):
        raise SpecError(spec.source.line, 1, "a sharded source must be followed by interleave")

    for line, tok, col in grid_lines:
        key, values = _parse_grid_token(line, tok, col)
        label, attr = key
        try:
            op = spec.op(label)
        except KeyError:
            raise line.error(col, f"grid refers to unknown label {label!r}") from None
        if not isinstance(op.attrs.get(attr), Knob):
            raise line.error(col, f"{label}.{attr} is not a tunable attribute")
        if key in spec.grid:
            raise line.error(col, f"duplicate grid entry for {label}.{attr}")
        spec.grid[key] = values
    return spec


def _check_op(line: _Line, kind: str, a: dict) -> None:
    col = line.tokens[0][1]
    positive = {"filter": ["keep_every"], "interleave": ["cycle"], "batch": ["size"], "shuffle": ["buffer"],
                "shard": ["num"]}
    for name in positive.get(kind, []):
        if a[name] < 1:
            raise line.error(col, f"{name} must be >= 1")
    if kind == "interleave":
        p = a["parallel"]
        if not p.auto and p.value > a["cycle"]:
            raise line.error(col, "interleave parallel cannot exceed cycle")
        if p.auto and p.value is not None and p.value > a["cycle"]:
            raise line.error(col, "interleave hand-tuned parallel cannot exceed cycle")
    if kind == "repeat" and a["count"] < 0:
        raise line.error(col, "repeat count must be nonnegative")
    if kind == "shard" and not 0 <= a["index"] < a["num"]:
        raise line.error(col, "shard index must be in [0, num)")


def _apply_options(spec: PipelineSpec, line: _Line, tokens) -> None:
    o, _ = _attrs(line, tokens, _OPTIONS)
    spec.deterministic = o["deterministic"]
    spec.seed = o["seed"]
    spec.optimize = o["optimize"]
    spec.budget_cpu = o["budget_cpu"]
    spec.budget_ram_mb = o["budget_ram_mb"]
    spec.epochs = o["epochs"]
    if o["cost_mode"] is not None:
        spec.cost_mode = o["cost_mode"]
    if spec.epochs is not None and spec.epochs < 1:
        raise line.error(line.tokens[0][1], "epochs must be >= 1")
    for item in o["optimizations"] or []:
        if item.startswith("-"):
            spec.disable_rules.append(item[1:])
        else:
            spec.enable_rules.append(item.lstrip("+"))
    from flowline.optimizer import RULE_NAMES

    for name in spec.enable_rules + spec.disable_rules:
        if name not in RULE_NAMES:
            col = next(c for t, c in line.tokens if t.startswith("optimizations="))
            raise line.error(col, f"unknown rewrite rule {name!r}")


def load_spec(path: str) -> PipelineSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_spec(fh.read())
