"""Entry points: ``make_iterator``, ``save`` and ``restore``."""

from __future__ import annotations

import dataclasses
import os
import weakref
from typing import Any

from flowline.elements import UdfRegistry
from flowline.errors import MissingFile
from flowline.graph import AUTOTUNE, UDF_ATTRS, Dataset, DatasetNode, coerce_graph, walk
from flowline.runtime.checkpoint import decode_blob, encode_blob
from flowline.runtime.core import EOS, Options, PipelineContext, create_iterator, perf_ns
from flowline.serialization import fingerprint


def has_autotune(root: DatasetNode) -> bool:
    return any(v is AUTOTUNE for _, n in walk(root) for v in n.attrs.values())


def _preflight(root: DatasetNode, registry: UdfRegistry) -> None:
    for _, node in walk(root):
        for name in UDF_ATTRS:
            if name in node.attrs:
                registry.get(node.attrs[name])
        if node.kind == "from_file":
            for p in node.attrs["paths"]:
                if not os.path.isfile(p):
                    raise MissingFile(p)


def _options(options: Options | None, overrides: dict[str, Any]) -> Options:
    base = options or Options()
    return dataclasses.replace(base, **overrides) if overrides else base


class PipelineIterator:
    """Handle returned by :func:`make_iterator`.

    ``get_next`` returns an element tuple or :data:`EOS`; Python iteration
    stops at end of sequence. Closing the handle, or dropping the last
    reference to it, stops every worker thread and the tuner.
    """

    def __init__(self, root: DatasetNode, ctx: PipelineContext, it):
        self.graph = root
        self.ctx = ctx
        self._it = it
        self._finalizer = weakref.finalize(self, ctx.shutdown)

    @property
    def element_spec(self):
        return self.graph.output_spec

    @property
    def tuner(self):
        return self.ctx.tuner

    @property
    def root(self):
        return self._it

    def get_next(self):
        self.ctx.record_root_call(perf_ns())
        try:
            return self._it.get_next()
        finally:
            self.ctx.record_root_return(perf_ns())

    def __iter__(self):
        return self

    def __next__(self):
        e = self.get_next()
        if e is EOS:
            raise StopIteration
        return e

    def save(self) -> bytes:
        """Checkpoint the pipeline; no ``get_next`` may be running concurrently."""
        it = self._it
        it.pause_tree()
        try:
            states: dict[str, Any] = {}
            it.collect_states(states)
        finally:
            it.resume_tree()
        return encode_blob(fingerprint(self.graph).digest, states)

    def metrics(self) -> dict[str, dict]:
        return {p: e.metrics.snapshot() for p, e in sorted(self.ctx.entries.items())}

    def tunables(self) -> dict[str, dict[str, int]]:
        return {p: {k: t.value for k, t in e.tunables.items()}
                for p, e in sorted(self.ctx.entries.items()) if e.tunables}

    def close(self) -> None:
        self._finalizer()

    @property
    def closed(self) -> bool:
        return self.ctx.closed

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_iterator(graph: Dataset | DatasetNode, options: Options | None = None, *,
                  registry: UdfRegistry | None = None, **overrides) -> PipelineIterator:
    """Create a fresh iterator positioned at the start of ``graph``.

    Keyword overrides set :class:`Options` fields, e.g.
    ``make_iterator(ds, deterministic=False, seed_override=3)``.
    """
    return _instantiate(coerce_graph(graph), _options(options, overrides), registry, None)


def restore(graph: Dataset | DatasetNode, blob: bytes, options: Options | None = None, *,
            registry: UdfRegistry | None = None, **overrides) -> PipelineIterator:
    """Rebuild an iterator over ``graph`` from a blob produced by ``save``."""
    root = coerce_graph(graph)
    states = decode_blob(blob, fingerprint(root).digest)
    return _instantiate(root, _options(options, overrides), registry, states)


def save(it: PipelineIterator) -> bytes:
    return it.save()


def _instantiate(root, options, registry, states) -> PipelineIterator:
    ctx = PipelineContext(root, options, registry)
    _preflight(root, ctx.registry)
    it = create_iterator(root, ctx, "0", "0", ())
    if states is not None:
        try:
            it.restore_from(states)
        except BaseException:
            ctx.shutdown()
            raise
    handle = PipelineIterator(root, ctx, it)
    autotune = options.autotune if options.autotune is not None else has_autotune(root)
    if autotune:
        from flowline.autotune.tuner import Tuner

        ctx.tuner = Tuner(ctx, options.budget, options.tuner_config)
        ctx.tuner.start()
    return handle
