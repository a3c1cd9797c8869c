"""Iterator base classes, pipeline context, instrumentation and tunables."""

from __future__ import annotations

import logging
import os
import threading
import time
import weakref
from collections import deque
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Any, Callable

from flowline.elements import UdfRegistry, conforms, default_registry
from flowline.errors import FlowlineError, IteratorClosed, TypeMismatch
from flowline.graph import AUTOTUNE, DatasetNode

log = logging.getLogger(__name__)

perf_ns = time.perf_counter_ns


class _EndOfSequence:
    """Returned by ``get_next`` once an iterator is exhausted."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "EndOfSequence"

    def __bool__(self) -> bool:
        return False

    def __reduce__(self):
        return "EOS"


EOS = _EndOfSequence()
EndOfSequence = _EndOfSequence


@dataclass
class Options:
    """Per-iterator execution options.

    ``deterministic`` applies to parallel transformations whose own
    ``deterministic`` attribute is None. ``seed_override`` replaces every
    shuffle seed. ``autotune`` starts the background tuner (None: only when
    the graph has AUTOTUNE knobs). ``synthetic_mode`` selects how synthetic
    costs such as ``batch.assembly_cost_ns`` are spent: ``"sleep"`` or
    ``"spin"``.
    """

    deterministic: bool = True
    seed_override: int | None = None
    autotune: bool | None = None
    check_types: bool = False
    synthetic_mode: str = "sleep"
    budget: Any = None
    tuner_config: Any = None
    max_parallelism: int = 64
    max_buffer_size: int = 64


def spend(ns: int, mode: str = "sleep") -> None:
    """Burn ``ns`` nanoseconds of synthetic work."""
    if ns <= 0:
        return
    if mode == "spin":
        end = perf_ns() + ns
        while perf_ns() < end:
            pass
    else:
        time.sleep(ns / 1e9)


# -- tunables --------------------------------------------------------------


class TunableParameter:
    """A knob shared by every iterator instance at one node path.

    ``value`` is the integer currently in force. The tuner publishes new values
    with :meth:`publish`; listeners are woken so that workers observe the
    change between elements.
    """

    def __init__(self, name: str, value: int, minimum: int, maximum: int, autotune: bool):
        self.name = name
        self.minimum = minimum
        self.maximum = max(minimum, maximum)
        self.autotune = autotune
        self.value = min(max(value, self.minimum), self.maximum)
        self._listeners: weakref.WeakSet = weakref.WeakSet()

    def __repr__(self) -> str:
        flag = " auto" if self.autotune else ""
        return f"TunableParameter({self.name}={self.value} in [{self.minimum}, {self.maximum}]{flag})"

    def subscribe(self, listener) -> None:
        self._listeners.add(listener)

    def publish(self, value: int) -> None:
        value = int(min(max(value, self.minimum), self.maximum))
        if value == self.value:
            return
        self.value = value
        for listener in list(self._listeners):
            listener.on_tunable_change()


# -- metrics ---------------------------------------------------------------


class NodeMetrics:
    """Counters for one node path, shared by all its iterator instances.

    Writers increment plain attributes without locking; a lost increment under
    a race only nudges the estimates the tuner derives from them.
    """

    SIZE_SAMPLE_EVERY = 8

    def __init__(self, path: str):
        self.path = path
        self.processing_ns = 0
        self.elements_produced = 0
        self.size_bytes_total = 0
        self.size_samples = 0
        self._size_tick = 0
        self.buffer_peak = 0
        self.buffer_capacity_seen = 0

    def add_self(self, ns: int) -> None:
        if ns > 0:
            self.processing_ns += ns

    def add_output(self) -> None:
        self.elements_produced += 1

    def sample_size(self, value: Any) -> None:
        self._size_tick += 1
        if self._size_tick % self.SIZE_SAMPLE_EVERY:
            return
        self.size_bytes_total += approx_size(value)
        self.size_samples += 1

    def note_occupancy(self, occupancy: int, capacity: int) -> None:
        if occupancy > self.buffer_peak:
            self.buffer_peak = occupancy
        if capacity > self.buffer_capacity_seen:
            self.buffer_capacity_seen = capacity

    @property
    def bytes_per_element(self) -> float | None:
        return self.size_bytes_total / self.size_samples if self.size_samples else None

    def snapshot(self) -> dict:
        return {
            "processing_ns": self.processing_ns,
            "elements_produced": self.elements_produced,
            "bytes_per_element": self.bytes_per_element,
            "buffer_peak": self.buffer_peak,
        }


def approx_size(value: Any) -> int:
    if isinstance(value, (bytes, bytearray)):
        return len(value) + 8
    if isinstance(value, (list, tuple)):
        return 8 + sum(approx_size(v) for v in value)
    return 8


@dataclass
class ModelEntry:
    """What the tuner needs to know about one node path."""

    path: str
    node: DatasetNode
    impl: str
    is_async: bool
    metrics: NodeMetrics
    tunables: dict[str, TunableParameter] = field(default_factory=dict)

    @property
    def parent(self) -> str | None:
        return parent_path(self.path)


def parent_path(path: str) -> str | None:
    """``0.1.0`` -> ``0.1``; ``0.2/0`` -> ``0.2`` (inner dataset root)."""
    slash = path.rfind("/")
    dot = path.rfind(".")
    if dot > slash:
        return path[:dot]
    if slash >= 0:
        return path[:slash]
    return None


# -- pipeline context ------------------------------------------------------


class PipelineContext:
    """State shared by every iterator created for one ``make_iterator`` call."""

    def __init__(self, root: DatasetNode, options: Options, registry: UdfRegistry | None):
        self.root = root
        self.options = options
        self.registry = registry or default_registry()
        self.entries: dict[str, ModelEntry] = {}
        self._entries_lock = threading.Lock()
        self.structure_version = 0
        self.closed = False
        self.live: weakref.WeakSet = weakref.WeakSet()
        self.root_calls: deque = deque(maxlen=256)
        self.tuner = None

    # instrumentation registry

    def entry(self, path: str, node: DatasetNode, impl: str, is_async: bool) -> ModelEntry:
        e = self.entries.get(path)
        if e is not None:
            return e
        with self._entries_lock:
            e = self.entries.get(path)
            if e is None:
                e = ModelEntry(path, node, impl, is_async, NodeMetrics(path))
                self.entries[path] = e
                self.structure_version += 1
        return e

    def tunable(self, entry: ModelEntry, name: str, value: Any, maximum: int) -> TunableParameter:
        t = entry.tunables.get(name)
        if t is not None:
            return t
        with self._entries_lock:
            t = entry.tunables.get(name)
            if t is None:
                auto = value is AUTOTUNE
                # AUTOTUNE knobs start at 1 until the tuner publishes.
                initial = 1 if auto else int(value)
                t = TunableParameter(name, initial, 1, maximum if auto else initial, auto)
                entry.tunables[name] = t
        return t

    def deterministic_for(self, attr: bool | None) -> bool:
        return self.options.deterministic if attr is None else attr

    def record_root_call(self, ts_ns: int) -> None:
        self.root_calls.append((ts_ns, None))

    def record_root_return(self, ts_ns: int) -> None:
        calls = self.root_calls
        if calls and calls[-1][1] is None:
            calls[-1] = (calls[-1][0], ts_ns)

    def consumer_rate(self) -> float | None:
        """Root ``get_next`` calls per second the consumer would issue if never kept waiting.

        This is the inverse of the mean gap between one root call returning
        and the next call starting. Time blocked inside ``get_next`` is left
        out: it reflects the pipeline's throughput, and counting it would
        make a starved consumer look exactly satisfied.
        """
        calls = list(self.root_calls)
        gaps = [max(0, nxt[0] - cur[1]) for cur, nxt in zip(calls, calls[1:]) if cur[1] is not None]
        if not gaps:
            return None
        think = sum(gaps) / len(gaps)
        if think <= 0:
            return None
        return 1e9 / think

    def register_live(self, it: "IteratorBase") -> None:
        self.live.add(it)

    def shutdown(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self.tuner is not None:
            self.tuner.stop()
        for it in list(self.live):
            it.close()


# -- iterator base ---------------------------------------------------------

_tls = threading.local()


def _stack() -> list:
    s = getattr(_tls, "stack", None)
    if s is None:
        s = _tls.stack = []
    return s


def add_blocked(ns: int) -> None:
    """Attribute ``ns`` of the current ``get_next`` to waiting, not work."""
    s = getattr(_tls, "stack", None)
    if s:
        s[-1] += ns


class IteratorBase:
    """Common machinery: sticky EOS, self-time accounting, checkpoint keys.

    Subclasses implement ``_next`` returning an element tuple or ``EOS``.
    ``path`` names the node for instrumentation and is shared by all
    instances created over the pipeline's lifetime; ``key`` names this
    instance inside a checkpoint.
    """

    is_async = False
    impl = ""

    def __init__(self, node: DatasetNode, ctx: PipelineContext, path: str, key: str, epoch_key: tuple):
        self.node = node
        self.ctx = ctx
        self.path = path
        self.key = key
        self.epoch_key = epoch_key
        self.entry = ctx.entry(path, node, self.impl or node.kind, self.is_async)
        self.metrics = self.entry.metrics
        self._guard = nullcontext() if self.is_async else threading.Lock()
        self._eos = False
        self._closed = False
        self._check = ctx.options.check_types
        ctx.register_live(self)

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.path}>"

    def get_next(self):
        if self._eos:
            return EOS
        if self._closed:
            raise IteratorClosed(self.path)
        stack = _stack()
        stack.append(0)
        t0 = perf_ns()
        try:
            with self._guard:
                result = self._next()
        except FlowlineError as exc:
            # Tag the error with the innermost iterator it passed through.
            if getattr(exc, "path", None) is None:
                exc.path = self.path
            raise
        finally:
            dt = perf_ns() - t0
            child = stack.pop()
            if stack:
                stack[-1] += dt
            self.metrics.add_self(dt - child)
        if result is EOS:
            self._eos = True
            return EOS
        self.metrics.add_output()
        if self._check and not conforms(result, self.node.output_spec):
            raise TypeMismatch(f"{self.path} ({self.node.kind}) produced {result!r}, expected {self.node.output_spec}")
        return result

    def _next(self):
        raise NotImplementedError

    # structure

    def children(self) -> list["IteratorBase"]:
        return []

    def child(self, node: DatasetNode, index: int, epoch_key: tuple | None = None) -> "IteratorBase":
        return create_iterator(
            node, self.ctx, f"{self.path}.{index}", f"{self.key}.{index}",
            self.epoch_key if epoch_key is None else epoch_key,
        )

    def inner(self, node: DatasetNode, tag: str, epoch_key: tuple) -> "IteratorBase":
        """Iterator over a dataset returned by a UDF; metrics pool under ``path/0``."""
        return create_iterator(node, self.ctx, f"{self.path}/0", f"{self.key}/{tag}/0", epoch_key)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._shutdown()
        for c in self.children():
            c.close()

    def _shutdown(self) -> None:
        pass

    # checkpointing: state() returns an encodable value; restore_state reads it.

    def pause(self) -> None:
        pass

    def resume(self) -> None:
        pass

    def state(self) -> Any:
        return None

    def restore_state(self, states: dict[str, Any]) -> None:
        raise NotImplementedError(type(self).__name__)

    def _my_state(self, states: dict[str, Any]) -> Any:
        from flowline.errors import CorruptBlob

        if self.key not in states:
            raise CorruptBlob(f"checkpoint has no state for {self.key}")
        return states[self.key]

    def collect_states(self, out: dict[str, Any]) -> None:
        out[self.key] = (self._eos, self.state())
        for c in self.children():
            c.collect_states(out)

    def restore_from(self, states: dict[str, Any]) -> None:
        eos, _ = self._my_state(states)
        self._eos = eos
        self.restore_state(states)

    def own_state(self, states: dict[str, Any]) -> Any:
        return self._my_state(states)[1]

    def pause_tree(self) -> None:
        self.pause()
        for c in self.children():
            c.pause_tree()

    def resume_tree(self) -> None:
        for c in self.children():
            c.resume_tree()
        self.resume()

    def on_tunable_change(self) -> None:
        pass


_FACTORIES: dict[str, Callable[..., IteratorBase]] = {}


def factory(kind: str):
    def register(fn):
        _FACTORIES[kind] = fn
        return fn

    return register


def create_iterator(node: DatasetNode, ctx: PipelineContext, path: str, key: str, epoch_key: tuple) -> IteratorBase:
    return _FACTORIES[node.kind](node, ctx, path, key, epoch_key)


def cpu_count() -> int:
    return os.cpu_count() or 1
