"""Element values, their static type signatures, and the UDF registry.

An element is an immutable tuple of components. Each component is one of:

* ``int`` (signed 64-bit), ``float`` (64-bit), ``bytes``, ``bool``
* a ``list`` of values sharing one type (the stand-in for tensors)
* a ``tuple`` of values (composite)

Types are described by :class:`Scalar`, :class:`ListOf` and :class:`TupleOf`;
an :class:`ElementSpec` is the ordered tuple of component types.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Union

from flowline.errors import DuplicateName, TypeMismatch, UnknownUdf

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

SCALAR_KINDS = ("int64", "float64", "bytes", "bool")

Element = tuple


@dataclass(frozen=True)
class Scalar:
    kind: str

    def __post_init__(self):
        if self.kind not in SCALAR_KINDS:
            raise ValueError(f"unknown scalar kind {self.kind!r}")

    def __str__(self) -> str:
        return self.kind


@dataclass(frozen=True)
class ListOf:
    # inner is None only transiently, while inferring from empty lists.
    inner: "TypeSpec | None"
    length: int | None = None

    def __str__(self) -> str:
        if self.length is None:
            return f"list[{self.inner}]"
        return f"list[{self.inner}, {self.length}]"


@dataclass(frozen=True)
class TupleOf:
    items: tuple["TypeSpec", ...]

    def __str__(self) -> str:
        return "tuple[" + ", ".join(str(t) for t in self.items) + "]"


TypeSpec = Union[Scalar, ListOf, TupleOf]

INT64 = Scalar("int64")
FLOAT64 = Scalar("float64")
BYTES = Scalar("bytes")
BOOL = Scalar("bool")


@dataclass(frozen=True)
class ElementSpec:
    components: tuple[TypeSpec, ...]

    def __post_init__(self):
        if not isinstance(self.components, tuple):
            object.__setattr__(self, "components", tuple(self.components))

    def __len__(self) -> int:
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, i):
        return self.components[i]

    def __str__(self) -> str:
        if len(self.components) == 1:
            return f"({self.components[0]},)"
        return "(" + ", ".join(str(c) for c in self.components) + ")"


def spec(*components: TypeSpec) -> ElementSpec:
    return ElementSpec(tuple(components))


# -- conformance -----------------------------------------------------------


def value_conforms(value: Any, ts: TypeSpec) -> bool:
    if isinstance(ts, Scalar):
        k = ts.kind
        if k == "bool":
            return isinstance(value, bool)
        if k == "int64":
            return (
                isinstance(value, int)
                and not isinstance(value, bool)
                and INT64_MIN <= value <= INT64_MAX
            )
        if k == "float64":
            return isinstance(value, float)
        return isinstance(value, bytes)
    if isinstance(ts, ListOf):
        if not isinstance(value, list):
            return False
        if ts.length is not None and len(value) != ts.length:
            return False
        if ts.inner is None:
            return not value
        return all(value_conforms(v, ts.inner) for v in value)
    if isinstance(ts, TupleOf):
        return (
            isinstance(value, tuple)
            and len(value) == len(ts.items)
            and all(value_conforms(v, t) for v, t in zip(value, ts.items))
        )
    return False


def conforms(elem: Element, es: ElementSpec) -> bool:
    """Whether ``elem`` matches ``es`` component by component."""
    if not isinstance(elem, tuple) or len(elem) != len(es.components):
        return False
    return all(value_conforms(v, t) for v, t in zip(elem, es.components))


# -- inference -------------------------------------------------------------


def infer_type(value: Any) -> TypeSpec:
    if isinstance(value, bool):
        return BOOL
    if isinstance(value, int):
        if not INT64_MIN <= value <= INT64_MAX:
            raise TypeMismatch(f"integer {value} does not fit in 64 bits")
        return INT64
    if isinstance(value, float):
        return FLOAT64
    if isinstance(value, bytes):
        return BYTES
    if isinstance(value, list):
        inner: TypeSpec | None = None
        for v in value:
            inner = unify(inner, infer_type(v))
        return ListOf(inner, len(value))
    if isinstance(value, tuple):
        return TupleOf(tuple(infer_type(v) for v in value))
    raise TypeMismatch(f"unsupported value type {type(value).__name__}")


def unify(a: TypeSpec | None, b: TypeSpec | None) -> TypeSpec | None:
    """Least general type covering both ``a`` and ``b``.

    List lengths that disagree become unknown; anything else that disagrees is
    a :class:`TypeMismatch`.
    """
    if a is None:
        return b
    if b is None:
        return a
    if isinstance(a, Scalar) and isinstance(b, Scalar):
        if a != b:
            raise TypeMismatch(f"{a} is not compatible with {b}")
        return a
    if isinstance(a, ListOf) and isinstance(b, ListOf):
        length = a.length if a.length == b.length else None
        return ListOf(unify(a.inner, b.inner), length)
    if isinstance(a, TupleOf) and isinstance(b, TupleOf):
        if len(a.items) != len(b.items):
            raise TypeMismatch(f"{a} is not compatible with {b}")
        return TupleOf(tuple(unify(x, y) for x, y in zip(a.items, b.items)))
    raise TypeMismatch(f"{a} is not compatible with {b}")


def _is_complete(ts: TypeSpec | None) -> bool:
    if ts is None:
        return False
    if isinstance(ts, ListOf):
        return _is_complete(ts.inner)
    if isinstance(ts, TupleOf):
        return all(_is_complete(t) for t in ts.items)
    return True


def infer_spec(elements: list[Element]) -> ElementSpec:
    """Element spec covering every element in ``elements``."""
    if not elements:
        raise TypeMismatch("cannot infer an element spec from zero elements")
    arity = len(elements[0])
    comps: list[TypeSpec | None] = [None] * arity
    for e in elements:
        if len(e) != arity:
            raise TypeMismatch(f"elements have arity {arity} and {len(e)}")
        for i, v in enumerate(e):
            try:
                comps[i] = unify(comps[i], infer_type(v))
            except TypeMismatch as exc:
                raise TypeMismatch(str(exc), component=i) from None
    for i, c in enumerate(comps):
        if not _is_complete(c):
            raise TypeMismatch("inner type of an empty list is unknown", component=i)
    return ElementSpec(tuple(comps))


def as_element(value: Any) -> Element:
    """Wrap UDF results and raw values as elements.

    A tuple is taken as the component list; anything else becomes a
    single-component element. ``str`` is encoded to UTF-8 bytes.
    """
    if isinstance(value, tuple):
        if not value:
            raise TypeMismatch("elements must have at least one component")
        return tuple(_normalize(v) for v in value)
    return (_normalize(value),)


def _normalize(v: Any) -> Any:
    if isinstance(v, str):
        return v.encode("utf-8")
    if isinstance(v, bytearray):
        return bytes(v)
    return v


def spec_matches(actual: ElementSpec, required: ElementSpec) -> bool:
    """Whether every element of ``actual`` is also an element of ``required``."""
    if len(actual) != len(required):
        return False
    return all(_type_within(a, r) for a, r in zip(actual, required))


def _type_within(a: TypeSpec, r: TypeSpec) -> bool:
    if isinstance(a, Scalar) or isinstance(r, Scalar):
        return a == r
    if isinstance(a, ListOf) and isinstance(r, ListOf):
        if r.length is not None and a.length != r.length:
            return False
        if a.inner is None or r.inner is None:
            return True
        return _type_within(a.inner, r.inner)
    if isinstance(a, TupleOf) and isinstance(r, TupleOf):
        return len(a.items) == len(r.items) and all(
            _type_within(x, y) for x, y in zip(a.items, r.items)
        )
    return False


# -- textual form ----------------------------------------------------------

_TOKEN = re.compile(r"\s*(list|tuple|int64|float64|bytes|bool|\d+|[\[\](),])")


def parse_type_spec(text: str) -> ElementSpec:
    """Parse the form produced by ``str(ElementSpec)``, e.g. ``(list[int64, 5], bytes)``."""
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ValueError(f"bad type spec {text!r} at {pos}")
        tokens.append(m.group(1))
        pos = m.end()
    toks = iter(tokens + [None])
    cur = [next(toks)]

    def take(expected=None):
        tok = cur[0]
        if expected is not None and tok != expected:
            raise ValueError(f"bad type spec {text!r}: expected {expected!r}, got {tok!r}")
        cur[0] = next(toks)
        return tok

    def one() -> TypeSpec:
        tok = take()
        if tok in SCALAR_KINDS:
            return Scalar(tok)
        if tok == "list":
            take("[")
            inner = one()
            length = None
            if cur[0] == ",":
                take(",")
                length = int(take())
            take("]")
            return ListOf(inner, length)
        if tok == "tuple":
            take("[")
            items = [one()]
            while cur[0] == ",":
                take(",")
                items.append(one())
            take("]")
            return TupleOf(tuple(items))
        raise ValueError(f"bad type spec {text!r}: unexpected {tok!r}")

    take("(")
    comps = [one()]
    while cur[0] == ",":
        take(",")
        if cur[0] == ")":
            break
        comps.append(one())
    take(")")
    if cur[0] is not None:
        raise ValueError(f"bad type spec {text!r}: trailing input")
    return ElementSpec(tuple(comps))


# -- user-defined functions ------------------------------------------------

_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_.:\-]*\Z")

OutputSpec = Union[ElementSpec, Callable[[ElementSpec], ElementSpec], None]


@dataclass(frozen=True)
class Udf:
    """A registered function.

    ``fn`` receives the element's components as positional arguments. Map
    functions return a value or a tuple of components, predicates return a
    bool, and dataset functions return a :class:`flowline.graph.Dataset`.
    Reduce functions receive ``(state, element)`` as two tuples.

    ``output_spec`` is either a fixed spec, a function of the input spec, or
    None meaning the spec passes through unchanged. Dataset functions must
    give the element spec of the datasets they return.
    """

    name: str
    fn: Callable[..., Any]
    cost_hint_ns: int | None = None
    vectorized: Callable[..., Any] | None = None
    output_spec: OutputSpec = None

    def result_spec(self, input_spec: ElementSpec) -> ElementSpec:
        if self.output_spec is None:
            return input_spec
        if isinstance(self.output_spec, ElementSpec):
            return self.output_spec
        return self.output_spec(input_spec)


@dataclass
class UdfRegistry:
    entries: dict[str, Udf] = field(default_factory=dict)
    _derived: dict[str, Udf] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def register(
        self,
        name: str,
        fn: Callable[..., Any],
        cost_hint_ns: int | None = None,
        vectorized: Callable[..., Any] | None = None,
        output_spec: OutputSpec = None,
    ) -> Udf:
        if not _NAME.match(name):
            raise ValueError(f"invalid UDF name {name!r}")
        with self._lock:
            if name in self.entries:
                raise DuplicateName(name)
            udf = Udf(name, fn, cost_hint_ns, vectorized, output_spec)
            self.entries[name] = udf
        return udf

    def __contains__(self, name: str) -> bool:
        try:
            self.get(name)
        except UnknownUdf:
            return False
        return True

    def get(self, name: str) -> Udf:
        udf = self.entries.get(name)
        if udf is not None:
            return udf
        udf = self._derived.get(name)
        if udf is not None:
            return udf
        udf = _build_derived(self, name)
        with self._lock:
            self._derived.setdefault(name, udf)
        return udf


_default_registry = UdfRegistry()


def default_registry() -> UdfRegistry:
    return _default_registry


def set_default_registry(registry: UdfRegistry) -> UdfRegistry:
    """Install ``registry`` as the default and return the previous one."""
    global _default_registry
    previous, _default_registry = _default_registry, registry
    return previous


def register_udf(
    name: str,
    fn: Callable[..., Any],
    cost_hint_ns: int | None = None,
    vectorized: Callable[..., Any] | None = None,
    output_spec: OutputSpec = None,
) -> Udf:
    return _default_registry.register(name, fn, cost_hint_ns, vectorized, output_spec)


# -- derived functions synthesized by graph rewrites ------------------------
#
# Names look like ``compose[f,g]``; arguments may themselves be derived names.


def derived_name(op: str, *args: str) -> str:
    return f"{op}[{','.join(args)}]"


def split_derived(name: str) -> tuple[str, list[str]] | None:
    if not name.endswith("]") or "[" not in name:
        return None
    op, rest = name.split("[", 1)
    body = rest[:-1]
    args, depth, start = [], 0, 0
    for i, ch in enumerate(body):
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth < 0:
                return None
        elif ch == "," and depth == 0:
            args.append(body[start:i])
            start = i + 1
    if depth != 0:
        return None
    args.append(body[start:])
    return op, args


def call_udf(fn: Callable[..., Any], elem: Element) -> Any:
    return fn(*elem)


def _build_derived(registry: UdfRegistry, name: str) -> Udf:
    parsed = split_derived(name)
    if parsed is None or parsed[0] not in _DERIVED:
        raise UnknownUdf(name)
    op, args = parsed
    parts = [registry.get(a) for a in args]
    return _DERIVED[op](name, *parts)


def _hint_sum(*udfs: Udf) -> int | None:
    hints = [u.cost_hint_ns for u in udfs]
    if all(h is None for h in hints):
        return None
    return sum(h or 0 for h in hints)


def _compose(name: str, f: Udf, g: Udf) -> Udf:
    ff, gf = f.fn, g.fn

    def composed(*components):
        return gf(*as_element(ff(*components)))

    def out(s: ElementSpec) -> ElementSpec:
        return g.result_spec(f.result_spec(s))

    return Udf(name, composed, _hint_sum(f, g), None, out)


def _conjunction(name: str, p: Udf, q: Udf) -> Udf:
    pf, qf = p.fn, q.fn

    def both(*components):
        return bool(pf(*components)) and bool(qf(*components))

    return Udf(name, both, _hint_sum(p, q))


def _vectorized(name: str, f: Udf) -> Udf:
    if f.vectorized is None:
        raise UnknownUdf(f"{name}: {f.name!r} has no vectorized variant")

    def out(s: ElementSpec) -> ElementSpec:
        inner = ElementSpec(tuple(c.inner if isinstance(c, ListOf) else c for c in s))
        length = s[0].length if isinstance(s[0], ListOf) else None
        return ElementSpec(tuple(ListOf(c, length) for c in f.result_spec(inner)))

    return Udf(name, f.vectorized, f.cost_hint_ns, None, out)


_DERIVED: dict[str, Callable[..., Udf]] = {
    "compose": _compose,
    "conj": _conjunction,
    "vectorized": _vectorized,
}
