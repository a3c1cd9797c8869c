"""Asynchronous iterators backed by worker threads and bounded buffers.

All of them share one locking scheme: a single mutex guards the node's
bookkeeping, workers sleep on ``_work_cv`` and consumers on ``_out_cv``.
Occupancy is counted as in-flight work plus buffered results and never
exceeds the node's capacity.
"""

from __future__ import annotations

import math
import threading
from collections import deque
from typing import Any

from flowline.errors import IteratorClosed, UdfError
from flowline.graph import AUTOTUNE
from flowline.runtime.core import EOS, IteratorBase, add_blocked, factory, perf_ns, spend
from flowline.runtime.sequential import (
    SequentialInterleaveIterator,
    SequentialMapFilterIterator,
    SequentialMapIterator,
    apply_udf,
    assemble_batch,
    dataset_udf,
    test_udf,
)

_DROPPED = object()


class _Failure:
    """An error waiting in a buffer for the consumer that owns its slot."""

    __slots__ = ("exc",)

    def __init__(self, exc: BaseException):
        self.exc = exc


def _encode_result(r) -> tuple:
    if r is _DROPPED:
        return (2, None)
    if isinstance(r, _Failure):
        return (1, f"{type(r.exc).__name__}: {r.exc}")
    return (0, r)


def _decode_result(entry, index: int):
    tag, value = entry
    if tag == 2:
        return _DROPPED
    if tag == 1:
        return _Failure(UdfError(index, RuntimeError(value)))
    return value


class AsyncIterator(IteratorBase):
    is_async = True

    def __init__(self, *args):
        super().__init__(*args)
        self._lock = threading.Lock()
        self._work_cv = threading.Condition(self._lock)
        self._out_cv = threading.Condition(self._lock)
        self._started = False
        self._stopping = False
        self._paused = False
        self._in_flight = 0
        self._alive: set[int] = set()
        self._threads: list[threading.Thread] = []

    # worker management

    def _target_workers(self) -> int:
        return 1

    def _ensure_workers(self) -> None:
        """Start missing workers; caller holds the lock."""
        if not self._started or self._stopping:
            return
        for wid in range(self._target_workers()):
            if wid not in self._alive:
                self._alive.add(wid)
                t = threading.Thread(target=self._run_worker, args=(wid,), daemon=True,
                                     name=f"flowline-{self.node.kind}-{self.path}-{wid}")
                self._threads.append(t)
                t.start()

    def _start(self) -> None:
        if self._started:
            return
        with self._lock:
            if not self._started:
                self._started = True
                self._ensure_workers()

    def _run_worker(self, wid: int) -> None:
        try:
            self._worker(wid)
        except IteratorClosed:
            pass
        except BaseException:
            if not self._stopping:
                raise
        finally:
            with self._lock:
                self._alive.discard(wid)
                self._out_cv.notify_all()

    def _worker(self, wid: int) -> None:
        raise NotImplementedError

    def _retire(self, wid: int) -> bool:
        """True when worker ``wid`` should exit; caller holds the lock."""
        return self._stopping or wid >= self._target_workers()

    def on_tunable_change(self) -> None:
        with self._lock:
            self._ensure_workers()
            self._work_cv.notify_all()

    def _wait_out(self) -> None:
        t0 = perf_ns()
        self._out_cv.wait(0.5)
        add_blocked(perf_ns() - t0)
        if self._stopping:
            raise IteratorClosed(self.path)

    def _shutdown(self) -> None:
        with self._lock:
            self._stopping = True
            self._work_cv.notify_all()
            self._out_cv.notify_all()

    def join(self, timeout: float = 2.0) -> None:
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout)

    # checkpointing: stop handing out work and let in-flight items land

    def _busy(self) -> int:
        return self._in_flight

    def pause(self) -> None:
        with self._lock:
            self._paused = True
            while self._busy() > 0 and not self._stopping:
                self._out_cv.wait(0.5)

    def resume(self) -> None:
        with self._lock:
            self._paused = False
            self._work_cv.notify_all()


def _raise_or_return(result):
    if isinstance(result, _Failure):
        raise result.exc
    return result


# -- prefetch --------------------------------------------------------------


@factory("prefetch")
class PrefetchIterator(AsyncIterator):
    """One background producer keeping up to ``buffer_size`` elements ready."""

    def __init__(self, *args):
        super().__init__(*args)
        self.input = self.child(self.node.inputs[0], 0)
        self.buffer_size = self.ctx.tunable(self.entry, "buffer_size", self.node.attrs["buffer_size"],
                                            self.ctx.options.max_buffer_size)
        self.buffer_size.subscribe(self)
        self._buf: deque = deque()
        self._input_done = False

    def children(self):
        return [self.input]

    def _worker(self, wid):
        while True:
            with self._lock:
                while not self._stopping and (
                    self._paused or self._input_done
                    or len(self._buf) + self._in_flight >= self.buffer_size.value
                ):
                    if self._input_done:
                        return
                    self._work_cv.wait()
                if self._stopping:
                    return
                self._in_flight += 1
            try:
                r = self.input.get_next()
            except IteratorClosed:
                raise
            except Exception as exc:
                r = _Failure(exc)
            with self._lock:
                self._in_flight -= 1
                if r is EOS:
                    self._input_done = True
                else:
                    self._buf.append(r)
                    self.metrics.note_occupancy(len(self._buf), self.buffer_size.value)
                self._out_cv.notify_all()

    def _next(self):
        self._start()
        with self._lock:
            while not self._buf:
                if self._input_done and self._in_flight == 0:
                    return EOS
                self._wait_out()
            r = self._buf.popleft()
            self._work_cv.notify()
        return _raise_or_return(r)

    def state(self):
        return (self._input_done, [_encode_result(r) for r in self._buf])

    def restore_state(self, states):
        self.input.restore_from(states)
        done, buf = self.own_state(states)
        self._input_done = done
        self._buf = deque(_decode_result(e, -1) for e in buf)


# -- parallel map (and map + filter) ---------------------------------------


class ParallelMapIterator(AsyncIterator):
    """Applies the UDF on up to ``parallelism`` workers.

    Inputs are pulled under a dedicated lock so each gets a sequence number
    matching its input position. Deterministic mode releases results in
    sequence order; otherwise in completion order. Buffer capacity equals the
    current parallelism.
    """

    impl = "map"

    def __init__(self, *args):
        super().__init__(*args)
        a = self.node.attrs
        self.input = self.child(self.node.inputs[0], 0)
        self._input_lock = threading.Lock()
        self.parallelism = self.ctx.tunable(self.entry, "parallelism", a["num_parallel_calls"],
                                            self.ctx.options.max_parallelism)
        self.parallelism.subscribe(self)
        self.deterministic = self.ctx.deterministic_for(a["deterministic"])
        reg = self.ctx.registry
        self._name = a["fn"]
        self._fn = reg.get(self._name).fn
        self._next_seq = 0
        self._next_out = 0
        self._input_done = False
        self._results: dict[int, Any] = {}
        self._completed: deque = deque()

    def children(self):
        return [self.input]

    def _target_workers(self):
        return self.parallelism.value

    def _buffered(self) -> int:
        return len(self._results) if self.deterministic else len(self._completed)

    def _transform(self, elem, seq):
        return apply_udf(self._fn, elem, seq, self._name)

    def _worker(self, wid):
        while True:
            with self._lock:
                while True:
                    if self._retire(wid) or self._input_done:
                        return
                    cap = self.parallelism.value
                    if not self._paused and self._in_flight + self._buffered() < cap:
                        break
                    self._work_cv.wait()
                self._in_flight += 1
            with self._input_lock:
                if self._input_done:
                    elem = EOS
                else:
                    try:
                        elem = self.input.get_next()
                    except IteratorClosed:
                        raise
                    except Exception as exc:
                        elem = _Failure(exc)
                    if elem is EOS:
                        self._input_done = True
                    else:
                        seq = self._next_seq
                        self._next_seq = seq + 1
            if elem is EOS:
                with self._lock:
                    self._in_flight -= 1
                    self._work_cv.notify_all()
                    self._out_cv.notify_all()
                return
            if isinstance(elem, _Failure):
                r = elem
            else:
                t0 = perf_ns()
                try:
                    r = self._transform(elem, seq)
                except Exception as exc:
                    r = _Failure(exc)
                self.metrics.add_self(perf_ns() - t0)
            with self._lock:
                self._in_flight -= 1
                if self.deterministic:
                    self._results[seq] = r
                else:
                    self._completed.append(r)
                self.metrics.note_occupancy(self._in_flight + self._buffered(), self.parallelism.value)
                self._out_cv.notify_all()

    def _take(self):
        """Next releasable result, or EOS; caller holds the lock."""
        while True:
            if self.deterministic:
                if self._next_out in self._results:
                    r = self._results.pop(self._next_out)
                    self._next_out += 1
                    return r
            elif self._completed:
                return self._completed.popleft()
            if self._input_done and self._in_flight == 0 and not self._buffered():
                return EOS
            self._ensure_workers()
            self._wait_out()

    def _next(self):
        self._start()
        while True:
            with self._lock:
                r = self._take()
                self._work_cv.notify()
            if r is not _DROPPED:
                return _raise_or_return(r)

    def state(self):
        if self.deterministic:
            buf = [(s, _encode_result(r)) for s, r in sorted(self._results.items())]
        else:
            buf = [(-1, _encode_result(r)) for r in self._completed]
        return (self._next_seq, self._next_out, self._input_done, buf)

    def restore_state(self, states):
        self.input.restore_from(states)
        self._next_seq, self._next_out, self._input_done, buf = self.own_state(states)
        self._results = {}
        self._completed = deque()
        for s, e in buf:
            r = _decode_result(e, s)
            if self.deterministic and s >= 0:
                self._results[s] = r
            else:
                self._completed.append(r)


class ParallelMapFilterIterator(ParallelMapIterator):
    impl = "map_and_filter"

    def __init__(self, *args):
        super().__init__(*args)
        self._pname = self.node.attrs["predicate"]
        self._pred = self.ctx.registry.get(self._pname).fn

    def _transform(self, elem, seq):
        out = apply_udf(self._fn, elem, seq, self._name)
        return out if test_udf(self._pred, out, seq, self._pname) else _DROPPED


def _choose(seq_cls, par_cls, attr="num_parallel_calls"):
    def make(node, ctx, path, key, epoch_key):
        p = node.attrs[attr]
        cls = seq_cls if p == 1 else par_cls
        return cls(node, ctx, path, key, epoch_key)

    return make


# -- fused map + batch -----------------------------------------------------


class SequentialMapBatchIterator(IteratorBase):
    impl = "map_and_batch"

    def __init__(self, *args):
        super().__init__(*args)
        a = self.node.attrs
        self.input = self.child(self.node.inputs[0], 0)
        self._name = a["fn"]
        self._fn = self.ctx.registry.get(self._name).fn
        self._b = a["batch_size"]
        self._drop = a["drop_remainder"]
        self._cost = a["assembly_cost_ns"]
        self._index = 0

    def children(self):
        return [self.input]

    def _next(self):
        elems = []
        for _ in range(self._b):
            e = self.input.get_next()
            if e is EOS:
                break
            i = self._index
            self._index = i + 1
            elems.append(apply_udf(self._fn, e, i, self._name))
        if not elems or (self._drop and len(elems) < self._b):
            return EOS
        spend(self._cost, self.ctx.options.synthetic_mode)
        return assemble_batch(elems)

    def state(self):
        return self._index

    def restore_state(self, states):
        self.input.restore_from(states)
        self._index = self.own_state(states)


class _PendingBatch:
    __slots__ = ("slots", "filled", "size", "error")

    def __init__(self, b: int):
        self.slots: list = [None] * b
        self.filled = 0
        self.size = b
        self.error: _Failure | None = None


class ParallelMapBatchIterator(AsyncIterator):
    """Map and batch in one node: workers write outputs straight into batch slots.

    ``parallelism`` counts concurrent UDF calls. The consumer is woken once per
    finished batch, and the batch is assembled by the worker that completes
    it. Up to ``ceil(parallelism / batch_size) + 1`` batches are outstanding.
    """

    impl = "map_and_batch"

    def __init__(self, *args):
        super().__init__(*args)
        a = self.node.attrs
        self.input = self.child(self.node.inputs[0], 0)
        self._input_lock = threading.Lock()
        self.parallelism = self.ctx.tunable(self.entry, "parallelism", a["num_parallel_calls"],
                                            self.ctx.options.max_parallelism)
        self.parallelism.subscribe(self)
        self.deterministic = self.ctx.deterministic_for(a["deterministic"])
        self._name = a["fn"]
        self._fn = self.ctx.registry.get(self._name).fn
        self._b = a["batch_size"]
        self._drop = a["drop_remainder"]
        self._cost = a["assembly_cost_ns"]
        self._mode = self.ctx.options.synthetic_mode
        self._next_seq = 0
        self._next_out = 0
        self._input_done = False
        self._pending: dict[int, _PendingBatch] = {}
        self._ready: dict[int, Any] = {}
        self._ready_order: deque = deque()
        # Batches taken out of _pending whose assembly is still running.
        self._assembling = 0

    def children(self):
        return [self.input]

    def _target_workers(self):
        return self.parallelism.value

    def capacity_batches(self) -> int:
        return math.ceil(self.parallelism.value / self._b) + 1

    def _busy(self) -> int:
        return self._in_flight + self._assembling

    def _outstanding_batches(self) -> int:
        return len(self._ready) + len(self._pending) + self._assembling

    def _can_start(self) -> bool:
        # A new input element may open a new batch only within the batch cap.
        if self._next_seq % self._b:
            return True
        return self._outstanding_batches() < self.capacity_batches()

    def _worker(self, wid):
        while True:
            # Lock order is input lock, then state lock: the batch cap check
            # depends on the sequence number this worker is about to take.
            with self._input_lock:
                with self._lock:
                    while True:
                        if self._retire(wid) or self._input_done:
                            return
                        if not self._paused and self._in_flight < self.parallelism.value and self._can_start():
                            break
                        self._work_cv.wait()
                    self._in_flight += 1
                try:
                    elem = self.input.get_next()
                except IteratorClosed:
                    raise
                except Exception as exc:
                    elem = _Failure(exc)
                if elem is EOS:
                    with self._lock:
                        self._in_flight -= 1
                        self._input_done = True
                        tail = self._finish_tail()
                        self._work_cv.notify_all()
                        self._out_cv.notify_all()
                    if tail is not None:
                        self._complete(*tail)
                    return
                seq = self._next_seq
                self._next_seq = seq + 1
                with self._lock:
                    bi = seq // self._b
                    if bi not in self._pending:
                        self._pending[bi] = _PendingBatch(self._b)
            if isinstance(elem, _Failure):
                r = elem
            else:
                t0 = perf_ns()
                try:
                    r = apply_udf(self._fn, elem, seq, self._name)
                except Exception as exc:
                    r = _Failure(exc)
                self.metrics.add_self(perf_ns() - t0)
            with self._lock:
                self._in_flight -= 1
                bi, pos = divmod(seq, self._b)
                pb = self._pending[bi]
                if isinstance(r, _Failure):
                    if pb.error is None:
                        pb.error = r
                else:
                    pb.slots[pos] = r
                pb.filled += 1
                done = pb.filled == pb.size
                if done:
                    del self._pending[bi]
                    self._assembling += 1
            if done:
                self._complete(bi, pb)

    def _complete(self, bi: int, pb: _PendingBatch) -> None:
        if pb.error is not None:
            out = pb.error
        elif self._drop and pb.size < self._b:
            out = _DROPPED
        else:
            t0 = perf_ns()
            spend(self._cost, self._mode)
            out = assemble_batch(pb.slots[: pb.size])
            self.metrics.add_self(perf_ns() - t0)
        with self._lock:
            self._assembling -= 1
            self._ready[bi] = out
            self._ready_order.append(bi)
            self.metrics.note_occupancy(self._outstanding_batches(), self.capacity_batches())
            self._out_cv.notify_all()

    def _finish_tail(self):
        """Input ended: shrink the last batch. Returns it if already complete. Lock held."""
        bi, rem = divmod(self._next_seq, self._b)
        pb = self._pending.get(bi) if rem else None
        if pb is None:
            return None
        pb.size = rem
        if pb.filled < pb.size:
            return None
        del self._pending[bi]
        self._assembling += 1
        return bi, pb

    def _out_of_batches(self) -> bool:
        if not (self._input_done and self._in_flight == 0):
            return False
        return not self._pending and not self._ready and not self._assembling

    def _next(self):
        self._start()
        while True:
            with self._lock:
                while True:
                    if self.deterministic:
                        if self._next_out in self._ready:
                            bi = self._next_out
                            break
                    elif self._ready_order:
                        bi = self._ready_order[0]
                        break
                    if self._out_of_batches():
                        return EOS
                    self._ensure_workers()
                    self._wait_out()
                r = self._ready.pop(bi)
                self._ready_order.remove(bi)
                if self.deterministic:
                    self._next_out += 1
                self._work_cv.notify_all()
            if r is not _DROPPED:
                return _raise_or_return(r)

    def state(self):
        pending = [(bi, pb.size, pb.filled, list(pb.slots)) for bi, pb in sorted(self._pending.items())
                   if pb.error is None]
        ready = [(bi, _encode_result(self._ready[bi])) for bi in self._ready_order]
        return (self._next_seq, self._next_out, self._input_done, pending, ready)

    def restore_state(self, states):
        self.input.restore_from(states)
        self._next_seq, self._next_out, self._input_done, pending, ready = self.own_state(states)
        self._pending = {}
        for bi, size, filled, slots in pending:
            pb = _PendingBatch(self._b)
            pb.size, pb.filled, pb.slots = size, filled, list(slots)
            self._pending[bi] = pb
        self._ready = {}
        self._ready_order = deque()
        for bi, e in ready:
            self._ready[bi] = _decode_result(e, bi * self._b)
            self._ready_order.append(bi)


# -- parallel interleave ---------------------------------------------------


class _Slot:
    __slots__ = ("it", "src", "index", "queue", "busy", "eos")

    def __init__(self):
        self.it: IteratorBase | None = None
        self.src = None
        self.index = -1
        self.queue: deque = deque()
        self.busy = False
        self.eos = False


class ParallelInterleaveIterator(AsyncIterator):
    """Keeps ``cycle_length`` inner datasets open and fetches from them concurrently.

    At most one worker reads a given slot at a time, so per-slot order holds.
    Workers favour slots nearest the consumer's cycle position. Deterministic
    mode yields exactly the round-robin sequence of the sequential version;
    exhausted slots are refilled from the next input element when the
    consumer reaches them.
    """

    impl = "interleave"

    def __init__(self, *args):
        super().__init__(*args)
        a = self.node.attrs
        self.input = self.child(self.node.inputs[0], 0)
        self._c = a["cycle_length"]
        self.parallelism = self.ctx.tunable(self.entry, "parallelism", a["num_parallel_calls"], self._c)
        self.parallelism.subscribe(self)
        self.deterministic = self.ctx.deterministic_for(a["deterministic"])
        self._name = a["fn"]
        self._fn = self.ctx.registry.get(self._name).fn
        self._slots = [_Slot() for _ in range(self._c)]
        self._cycle = 0
        self._opened = 0
        self._input_done = False
        self._consumer_lock = threading.Lock()
        self._initialized = False

    def children(self):
        return [self.input] + [s.it for s in self._slots if s.it is not None]

    def _target_workers(self):
        return self.parallelism.value

    def _capacity(self) -> int:
        return self.parallelism.value

    def _per_slot(self) -> int:
        return max(1, math.ceil(self._capacity() / self._c))

    def _buffered(self) -> int:
        return sum(len(s.queue) for s in self._slots)

    def _fill(self, slot: _Slot, tag: int) -> None:
        """Open the next input element's dataset into ``slot`` (consumer thread)."""
        if slot.it is not None:
            slot.it.close()
        slot.it, slot.src, slot.eos = None, None, False
        slot.queue.clear()
        if self._input_done:
            return
        elem = self.input.get_next()
        if elem is EOS:
            self._input_done = True
            return
        i = self._opened
        self._opened = i + 1
        node = dataset_udf(self._fn, elem, i, self._name)
        it = self.inner(node, f"s{tag}", self.epoch_key + (i,))
        with self._lock:
            slot.it, slot.src, slot.index = it, elem, i
            self._work_cv.notify_all()

    def _pick(self) -> _Slot | None:
        if self._paused or self._in_flight + self._buffered() >= self._capacity():
            return None
        cap = self._per_slot()
        for k in range(self._c):
            s = self._slots[(self._cycle + k) % self._c]
            if s.it is not None and not s.busy and not s.eos and len(s.queue) < cap:
                return s
        return None

    def _fetch(self, slot: _Slot):
        try:
            return slot.it.get_next()
        except IteratorClosed:
            raise
        except Exception as exc:
            return _Failure(exc)

    def _land(self, slot: _Slot, r) -> None:
        """Record a fetched result; lock held."""
        slot.busy = False
        self._in_flight -= 1
        if r is EOS:
            slot.eos = True
        else:
            slot.queue.append(r)
            self.metrics.note_occupancy(self._in_flight + self._buffered(), self._capacity())
        self._out_cv.notify_all()
        self._work_cv.notify_all()

    def _worker(self, wid):
        while True:
            with self._lock:
                while True:
                    if self._retire(wid):
                        return
                    slot = self._pick()
                    if slot is not None:
                        break
                    self._work_cv.wait()
                slot.busy = True
                self._in_flight += 1
            r = self._fetch(slot)
            with self._lock:
                self._land(slot, r)

    def _open_all(self) -> None:
        if self._initialized:
            return
        self._initialized = True
        for k, s in enumerate(self._slots):
            self._fill(s, k)

    def _next(self):
        with self._consumer_lock:
            self._open_all()
            self._start()
            return self._next_locked()

    def _advance(self) -> None:
        self._cycle = (self._cycle + 1) % self._c

    def _next_locked(self):
        while True:
            with self._lock:
                if self._input_done and all(s.it is None for s in self._slots):
                    return EOS
                if self.deterministic:
                    order = (self._cycle,)
                else:
                    order = [(self._cycle + k) % self._c for k in range(self._c)]
                ready = next((i for i in order if self._slots[i].queue), None)
                if ready is not None:
                    r = self._slots[ready].queue.popleft()
                    self._cycle = (ready + 1) % self._c
                    self._work_cv.notify_all()
                    break
                spent = next((i for i in order if self._slots[i].it is not None
                              and self._slots[i].eos and not self._slots[i].busy), None)
                s = self._slots[self._cycle]
                if spent is None and self.deterministic and s.it is None:
                    self._advance()
                    continue
                inline = (spent is None and self.deterministic and not s.busy and not s.eos
                          and self._in_flight + self._buffered() >= self._capacity())
                if inline:
                    # Buffer is full of other slots' results: read this one here.
                    s.busy = True
                    self._in_flight += 1
                elif spent is None:
                    self._ensure_workers()
                    self._wait_out()
                    continue
            if spent is not None:
                # Exhausted slots take the next input element; the cycle moves on.
                self._fill(self._slots[spent], spent)
                with self._lock:
                    self._cycle = (spent + 1) % self._c
                continue
            r = self._fetch(s)
            with self._lock:
                self._land(s, r)
        return _raise_or_return(r)


    def state(self):
        slots = []
        for s in self._slots:
            if s.it is None:
                slots.append(None)
            else:
                slots.append((s.src, s.index, s.eos, [_encode_result(r) for r in s.queue]))
        return (self._initialized, self._cycle, self._opened, self._input_done, slots)

    def restore_state(self, states):
        self.input.restore_from(states)
        self._initialized, self._cycle, self._opened, self._input_done, slots = self.own_state(states)
        for k, (s, saved) in enumerate(zip(self._slots, slots)):
            if s.it is not None:
                s.it.close()
            s.it, s.src, s.eos, s.busy = None, None, False, False
            s.queue.clear()
            if saved is None:
                continue
            src, index, eos, queue = saved
            node = dataset_udf(self._fn, src, index, self._name)
            s.it = self.inner(node, f"s{k}", self.epoch_key + (index,))
            s.it.restore_from(states)
            s.src, s.index, s.eos = src, index, eos
            s.queue.extend(_decode_result(e, index) for e in queue)


factory("map")(_choose(SequentialMapIterator, ParallelMapIterator))
factory("map_and_filter")(_choose(SequentialMapFilterIterator, ParallelMapFilterIterator))
factory("map_and_batch")(_choose(SequentialMapBatchIterator, ParallelMapBatchIterator))
factory("interleave")(_choose(SequentialInterleaveIterator, ParallelInterleaveIterator))
