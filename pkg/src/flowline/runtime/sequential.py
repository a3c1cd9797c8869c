"""Synchronous iterators: each ``get_next`` runs on the caller's thread."""

from __future__ import annotations

import os
import secrets
import threading
import weakref
from typing import Any

from flowline.elements import as_element
from flowline.errors import (
    ConcurrentCacheFill,
    FlowlineError,
    MissingFile,
    TypeMismatch,
    UdfError,
)
from flowline.graph import INFINITE, Dataset, DatasetNode
from flowline.records import RecordReader
from flowline.runtime.core import EOS, IteratorBase, factory, spend
from flowline.runtime.prng import SplitMix64, derive_seed


def apply_udf(fn, elem: tuple, index: int, name: str):
    try:
        return as_element(fn(*elem))
    except FlowlineError:
        raise
    except Exception as exc:
        raise UdfError(index, exc, name) from exc


def test_udf(fn, elem: tuple, index: int, name: str) -> bool:
    try:
        return bool(fn(*elem))
    except Exception as exc:
        raise UdfError(index, exc, name) from exc


def dataset_udf(fn, elem: tuple, index: int, name: str) -> DatasetNode:
    try:
        ds = fn(*elem)
    except Exception as exc:
        raise UdfError(index, exc, name) from exc
    if isinstance(ds, Dataset):
        return ds.root
    if isinstance(ds, DatasetNode):
        return ds
    raise UdfError(index, TypeError(f"{name} returned {type(ds).__name__}, not a Dataset"), name)


# -- sources ---------------------------------------------------------------


@factory("from_memory")
class FromMemoryIterator(IteratorBase):
    def __init__(self, *args):
        super().__init__(*args)
        self._elements = self.node.attrs["elements"]
        self._index = 0

    def _next(self):
        i = self._index
        if i >= len(self._elements):
            return EOS
        self._index = i + 1
        return self._elements[i]

    def state(self):
        return self._index

    def restore_state(self, states):
        self._index = self.own_state(states)


@factory("from_file")
class FromFileIterator(IteratorBase):
    def __init__(self, *args):
        super().__init__(*args)
        self._paths = self.node.attrs["paths"]
        for p in self._paths:
            if not os.path.isfile(p):
                raise MissingFile(p)
        self._file = 0
        self._reader: RecordReader | None = None
        self._offset = 0

    def _next(self):
        while self._file < len(self._paths):
            if self._reader is None:
                self._reader = RecordReader(self._paths[self._file], self._offset)
            rec = self._reader.read()
            if rec is not None:
                self._offset = self._reader.offset
                return (rec,)
            self._reader.close()
            self._reader = None
            self._file += 1
            self._offset = 0
        return EOS

    def state(self):
        return (self._file, self._offset)

    def restore_state(self, states):
        self._file, self._offset = self.own_state(states)
        if self._reader is not None:
            self._reader.close()
            self._reader = None

    def _shutdown(self):
        if self._reader is not None:
            self._reader.close()
            self._reader = None


# -- one-input transformations ----------------------------------------------


class UnaryIterator(IteratorBase):
    def __init__(self, *args):
        super().__init__(*args)
        self.input = self.child(self.node.inputs[0], 0)

    def children(self):
        return [self.input]

    def restore_state(self, states):
        self.input.restore_from(states)
        self._restore_own(self.own_state(states))

    def _restore_own(self, value):
        pass


class _Counting(UnaryIterator):
    """Tracks how many input elements were consumed, for UDF error indices."""

    def __init__(self, *args):
        super().__init__(*args)
        self._index = 0

    def state(self):
        return self._index

    def _restore_own(self, value):
        self._index = value


class SequentialMapIterator(_Counting):
    impl = "map"

    def __init__(self, *args):
        super().__init__(*args)
        self._name = self.node.attrs["fn"]
        self._fn = self.ctx.registry.get(self._name).fn

    def _next(self):
        elem = self.input.get_next()
        if elem is EOS:
            return EOS
        i = self._index
        self._index = i + 1
        return apply_udf(self._fn, elem, i, self._name)


class SequentialMapFilterIterator(_Counting):
    impl = "map_and_filter"

    def __init__(self, *args):
        super().__init__(*args)
        reg = self.ctx.registry
        self._name = self.node.attrs["fn"]
        self._pname = self.node.attrs["predicate"]
        self._fn = reg.get(self._name).fn
        self._pred = reg.get(self._pname).fn

    def _next(self):
        while True:
            elem = self.input.get_next()
            if elem is EOS:
                return EOS
            i = self._index
            self._index = i + 1
            out = apply_udf(self._fn, elem, i, self._name)
            if test_udf(self._pred, out, i, self._pname):
                return out


@factory("filter")
class FilterIterator(_Counting):
    def __init__(self, *args):
        super().__init__(*args)
        self._name = self.node.attrs["predicate"]
        self._pred = self.ctx.registry.get(self._name).fn

    def _next(self):
        while True:
            elem = self.input.get_next()
            if elem is EOS:
                return EOS
            i = self._index
            self._index = i + 1
            if test_udf(self._pred, elem, i, self._name):
                return elem


def assemble_batch(elems: list[tuple]) -> tuple:
    arity = len(elems[0])
    return tuple([e[c] for e in elems] for c in range(arity))


@factory("batch")
class BatchIterator(UnaryIterator):
    def __init__(self, *args):
        super().__init__(*args)
        a = self.node.attrs
        self._b = a["batch_size"]
        self._drop = a["drop_remainder"]
        self._cost = a["assembly_cost_ns"]
        self._mode = self.ctx.options.synthetic_mode

    def _next(self):
        elems = []
        for _ in range(self._b):
            e = self.input.get_next()
            if e is EOS:
                break
            elems.append(e)
        if not elems or (self._drop and len(elems) < self._b):
            return EOS
        spend(self._cost, self._mode)
        return assemble_batch(elems)


@factory("unbatch")
class UnbatchIterator(UnaryIterator):
    def __init__(self, *args):
        super().__init__(*args)
        self._current: tuple | None = None
        self._pos = 0
        self._len = 0

    def _next(self):
        while self._current is None or self._pos >= self._len:
            batch = self.input.get_next()
            if batch is EOS:
                self._current = None
                return EOS
            lengths = {len(c) for c in batch}
            if len(lengths) != 1:
                raise TypeMismatch(f"unbatch: components have different lengths {sorted(lengths)}")
            self._current, self._pos, self._len = batch, 0, lengths.pop()
        i = self._pos
        self._pos = i + 1
        return tuple(c[i] for c in self._current)

    def state(self):
        return (self._current, self._pos)

    def _restore_own(self, value):
        self._current, self._pos = value
        self._len = len(self._current[0]) if self._current else 0


@factory("shard")
class ShardIterator(UnaryIterator):
    def __init__(self, *args):
        super().__init__(*args)
        self._k = self.node.attrs["num_shards"]
        self._i = self.node.attrs["index"]
        self._pos = 0

    def _next(self):
        while True:
            e = self.input.get_next()
            if e is EOS:
                return EOS
            pos = self._pos
            self._pos = pos + 1
            if pos % self._k == self._i:
                return e

    def state(self):
        return self._pos

    def _restore_own(self, value):
        self._pos = value


@factory("reduce")
class ReduceIterator(UnaryIterator):
    def __init__(self, *args):
        super().__init__(*args)
        self._name = self.node.attrs["fn"]
        self._fn = self.ctx.registry.get(self._name).fn
        self._done = False

    def _next(self):
        if self._done:
            return EOS
        acc = self.node.attrs["initial"]
        i = 0
        while True:
            e = self.input.get_next()
            if e is EOS:
                break
            try:
                acc = as_element(self._fn(acc, e))
            except Exception as exc:
                raise UdfError(i, exc, self._name) from exc
            i += 1
        self._done = True
        return acc

    def state(self):
        return self._done

    def _restore_own(self, value):
        self._done = value


# -- shuffle ---------------------------------------------------------------


def resolve_seed(node_seed: int | None, override: int | None) -> int:
    if override is not None:
        return override
    if node_seed is not None:
        return node_seed
    return secrets.randbits(64)


class ShuffleBuffer:
    """Windowed reservoir: hold ``n`` elements, emit a uniformly chosen one."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.rng = SplitMix64(seed)
        self.buf: list[tuple] = []
        self.filled = False
        self.input_done = False

    def next(self, source) -> Any:
        if not self.filled:
            while len(self.buf) < self.n:
                e = source.get_next()
                if e is EOS:
                    self.input_done = True
                    break
                self.buf.append(e)
            self.filled = True
        if not self.buf:
            return EOS
        j = self.rng.below(len(self.buf))
        out = self.buf[j]
        nxt = EOS if self.input_done else source.get_next()
        if nxt is EOS:
            self.input_done = True
            last = self.buf.pop()
            if j < len(self.buf):
                self.buf[j] = last
        else:
            self.buf[j] = nxt
        return out

    def state(self):
        return (self.rng.state, self.filled, self.input_done, list(self.buf))

    def restore(self, value) -> None:
        self.rng.state, self.filled, self.input_done, buf = value
        self.buf = list(buf)


@factory("shuffle")
class ShuffleIterator(UnaryIterator):
    def __init__(self, *args):
        super().__init__(*args)
        a = self.node.attrs
        base = resolve_seed(a["seed"], self.ctx.options.seed_override)
        self._shuffle = ShuffleBuffer(a["buffer_size"], derive_seed(base, self.epoch_key))

    def _next(self):
        return self._shuffle.next(self.input)

    def state(self):
        return self._shuffle.state()

    def _restore_own(self, value):
        self._shuffle.restore(value)


# -- repetition ------------------------------------------------------------


class _RepeatBase(IteratorBase):
    """Re-instantiates its input once per epoch; an empty epoch ends iteration."""

    def __init__(self, *args):
        super().__init__(*args)
        count = self.node.attrs["count"]
        self._count = None if count is INFINITE else count
        self._epoch = 0
        self._produced = 0
        self.input = self._make_epoch(0)

    def _make_epoch(self, epoch: int) -> IteratorBase:
        return self.child(self.node.inputs[0], 0, self.epoch_key + (epoch,))

    def _pull(self):
        return self.input.get_next()

    def _next(self):
        while True:
            e = self._pull()
            if e is not EOS:
                self._produced += 1
                return e
            if self._produced == 0:
                return EOS
            self._epoch += 1
            if self._count is not None and self._epoch >= self._count:
                return EOS
            self.input.close()
            self._produced = 0
            self._start_epoch()

    def _start_epoch(self):
        self.input = self._make_epoch(self._epoch)

    def children(self):
        return [self.input] if self.input is not None else []

    def state(self):
        return (self._epoch, self._produced)

    def restore_state(self, states):
        epoch, produced = self.own_state(states)
        if epoch != self._epoch:
            self.input.close()
            self._epoch = epoch
            self._start_epoch()
        self._produced = produced
        self.input.restore_from(states)


@factory("repeat")
class RepeatIterator(_RepeatBase):
    pass


@factory("shuffle_and_repeat")
class ShuffleAndRepeatIterator(_RepeatBase):
    """Repeat with a reshuffle per epoch; seeds match ``repeat(shuffle(...))``."""

    def __init__(self, *args):
        self._shuffle = None
        super().__init__(*args)

    def _make_epoch(self, epoch):
        a = self.node.attrs
        key = self.epoch_key + (epoch,)
        base = resolve_seed(a["seed"], self.ctx.options.seed_override) if self._shuffle is None else self._base
        self._base = base
        self._shuffle = ShuffleBuffer(a["buffer_size"], derive_seed(base, key))
        return self.child(self.node.inputs[0], 0, key)

    def _pull(self):
        return self._shuffle.next(self.input)

    def state(self):
        return (self._epoch, self._produced, self._shuffle.state(), self._base)

    def restore_state(self, states):
        epoch, produced, shuffled, self._base = self.own_state(states)
        if epoch != self._epoch:
            self.input.close()
            self._epoch = epoch
            self._start_epoch()
        self._produced = produced
        self._shuffle.restore(shuffled)
        self.input.restore_from(states)


# -- multi-input -----------------------------------------------------------


@factory("zip")
class ZipIterator(IteratorBase):
    def __init__(self, *args):
        super().__init__(*args)
        self.inputs = [self.child(n, i) for i, n in enumerate(self.node.inputs)]

    def _next(self):
        parts = []
        for it in self.inputs:
            e = it.get_next()
            if e is EOS:
                return EOS
            parts.extend(e)
        return tuple(parts)

    def children(self):
        return list(self.inputs)

    def restore_state(self, states):
        for it in self.inputs:
            it.restore_from(states)


@factory("concatenate")
class ConcatenateIterator(IteratorBase):
    def __init__(self, *args):
        super().__init__(*args)
        self._index = 0
        self.input: IteratorBase | None = self.child(self.node.inputs[0], 0)

    def _next(self):
        while self.input is not None:
            e = self.input.get_next()
            if e is not EOS:
                return e
            self.input.close()
            self._index += 1
            if self._index < len(self.node.inputs):
                self.input = self.child(self.node.inputs[self._index], self._index)
            else:
                self.input = None
        return EOS

    def children(self):
        return [self.input] if self.input is not None else []

    def state(self):
        return self._index

    def restore_state(self, states):
        index = self.own_state(states)
        if index != self._index:
            if self.input is not None:
                self.input.close()
            self._index = index
            self.input = self.child(self.node.inputs[index], index) if index < len(self.node.inputs) else None
        if self.input is not None:
            self.input.restore_from(states)


# -- nested datasets -------------------------------------------------------


@factory("flat_map")
class FlatMapIterator(UnaryIterator):
    def __init__(self, *args):
        super().__init__(*args)
        self._name = self.node.attrs["fn"]
        self._fn = self.ctx.registry.get(self._name).fn
        self._index = 0
        self._source_elem: tuple | None = None
        self._current: IteratorBase | None = None

    def _open(self, elem: tuple, index: int) -> IteratorBase:
        node = dataset_udf(self._fn, elem, index, self._name)
        return self.inner(node, "c", self.epoch_key + (index,))

    def _next(self):
        while True:
            if self._current is not None:
                e = self._current.get_next()
                if e is not EOS:
                    return e
                self._current.close()
                self._current = None
                self._source_elem = None
            elem = self.input.get_next()
            if elem is EOS:
                return EOS
            i = self._index
            self._index = i + 1
            self._source_elem = elem
            self._current = self._open(elem, i)

    def children(self):
        kids = [self.input]
        if self._current is not None:
            kids.append(self._current)
        return kids

    def state(self):
        return (self._index, self._source_elem)

    def restore_state(self, states):
        self.input.restore_from(states)
        self._index, self._source_elem = self.own_state(states)
        if self._current is not None:
            self._current.close()
            self._current = None
        if self._source_elem is not None:
            self._current = self._open(self._source_elem, self._index - 1)
            self._current.restore_from(states)


class SequentialInterleaveIterator(UnaryIterator):
    """Round-robin over ``cycle_length`` open inner datasets, one element each."""

    impl = "interleave"

    def __init__(self, *args):
        super().__init__(*args)
        self._name = self.node.attrs["fn"]
        self._fn = self.ctx.registry.get(self._name).fn
        self._c = self.node.attrs["cycle_length"]
        self._slots: list[IteratorBase | None] = [None] * self._c
        self._slot_src: list[tuple | None] = [None] * self._c
        self._slot_idx = [0] * self._c
        self._cycle = 0
        self._opened = 0
        self._input_done = False

    def _open(self, slot: int) -> bool:
        elem = self.input.get_next()
        if elem is EOS:
            self._input_done = True
            return False
        i = self._opened
        self._opened = i + 1
        node = dataset_udf(self._fn, elem, i, self._name)
        self._slots[slot] = self.inner(node, f"s{slot}", self.epoch_key + (i,))
        self._slot_src[slot] = elem
        self._slot_idx[slot] = i
        return True

    def _next(self):
        while True:
            slot = self._cycle
            it = self._slots[slot]
            if it is None:
                if not self._input_done and self._open(slot):
                    continue
                if self._input_done and all(s is None for s in self._slots):
                    return EOS
                self._cycle = (slot + 1) % self._c
                continue
            e = it.get_next()
            if e is EOS:
                it.close()
                self._slots[slot] = None
                self._slot_src[slot] = None
                self._cycle = (slot + 1) % self._c
                continue
            self._cycle = (slot + 1) % self._c
            return e

    def children(self):
        return [self.input] + [s for s in self._slots if s is not None]

    def state(self):
        return (self._cycle, self._opened, self._input_done, list(self._slot_src), list(self._slot_idx))

    def restore_state(self, states):
        self.input.restore_from(states)
        self._cycle, self._opened, self._input_done, srcs, idxs = self.own_state(states)
        self._slot_idx = list(idxs)
        for s in range(self._c):
            if self._slots[s] is not None:
                self._slots[s].close()
                self._slots[s] = None
            self._slot_src[s] = srcs[s]
            if srcs[s] is not None:
                node = dataset_udf(self._fn, srcs[s], idxs[s], self._name)
                self._slots[s] = self.inner(node, f"s{s}", self.epoch_key + (idxs[s],))
                self._slots[s].restore_from(states)


# -- cache -----------------------------------------------------------------


class CacheStore:
    EMPTY, FILLING, COMPLETE = range(3)

    def __init__(self):
        self.lock = threading.Lock()
        self.status = CacheStore.EMPTY
        self.elements: list[tuple] = []
        self.filler: weakref.ref | None = None

    def filler_alive(self) -> bool:
        it = self.filler() if self.filler is not None else None
        return it is not None and not it._closed and not it.ctx.closed


_stores: dict[int, CacheStore] = {}
_stores_lock = threading.Lock()


def cache_store(node: DatasetNode) -> CacheStore:
    """The in-memory cache belonging to ``node``, created on first use."""
    key = id(node)
    with _stores_lock:
        store = _stores.get(key)
        if store is None:
            store = _stores[key] = CacheStore()
            weakref.finalize(node, _stores.pop, key, None)
    return store


@factory("cache")
class CacheIterator(IteratorBase):
    """Fills the node's cache on a complete first pass, replays it afterwards."""

    def __init__(self, *args):
        super().__init__(*args)
        self._store = cache_store(self.node)
        self._pos = 0
        self.input: IteratorBase | None = None
        with self._store.lock:
            self._claim()

    def _claim(self):
        st = self._store
        if st.status == CacheStore.COMPLETE:
            self._filling = False
            return
        if st.status == CacheStore.FILLING and st.filler_alive():
            raise ConcurrentCacheFill(f"cache at {self.path} is still being filled by another iterator")
        # Abandoned partial passes are discarded and recomputed.
        st.status = CacheStore.FILLING
        st.elements = []
        st.filler = weakref.ref(self)
        self._filling = True
        self.input = self.child(self.node.inputs[0], 0)

    def _next(self):
        st = self._store
        if not self._filling:
            if self._pos >= len(st.elements):
                return EOS
            e = st.elements[self._pos]
            self._pos += 1
            return e
        e = self.input.get_next()
        if e is EOS:
            with st.lock:
                st.status = CacheStore.COMPLETE
                st.filler = None
            self._filling = False
            self._pos = len(st.elements)
            return EOS
        st.elements.append(e)
        self._pos += 1
        return e

    def children(self):
        return [self.input] if self.input is not None and self._filling else []

    def state(self):
        return (self._filling, self._pos, list(self._store.elements))

    def restore_state(self, states):
        filling, pos, elements = self.own_state(states)
        st = self._store
        with st.lock:
            if filling:
                st.elements = list(elements)
                if self.input is None:
                    st.status = CacheStore.FILLING
                    st.filler = weakref.ref(self)
                    self.input = self.child(self.node.inputs[0], 0)
                self._filling = True
            else:
                if st.status != CacheStore.COMPLETE:
                    st.elements = list(elements)
                    st.status = CacheStore.COMPLETE
                    st.filler = None
                if self.input is not None:
                    self.input.close()
                    self.input = None
                self._filling = False
        self._pos = pos
        if filling:
            self.input.restore_from(states)
