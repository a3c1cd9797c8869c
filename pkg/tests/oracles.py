"""Independent oracles the implementation is checked against.

Nothing here imports the runtime or the latency model; each oracle is
written from the definitions alone.
"""

from __future__ import annotations

import numpy as np

from flowline.elements import as_element
from flowline.graph import INFINITE, Dataset, DatasetNode


# -- finite queue ------------------------------------------------------------


def mm1k_empty_probability(n: int, x: float, y: float) -> float:
    """P(empty) of a birth-death chain on {0..n} with birth x and death y.

    Solved as the stationary distribution of the generator matrix with a
    linear solve, not from the closed form.
    """
    k = n + 1
    q = np.zeros((k, k))
    for i in range(k):
        if i < n:
            q[i, i + 1] = x
        if i > 0:
            q[i, i - 1] = y
        q[i, i] = -q[i].sum()
    a = np.vstack([q.T, np.ones(k)])
    b = np.zeros(k + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(a, b, rcond=None)[0]
    return float(pi[0])


# -- reference interpreter -----------------------------------------------------


class Unsupported(Exception):
    pass


def reference(graph, registry) -> list[tuple]:
    """Evaluate a graph eagerly, one node at a time, into a list of elements."""
    node = graph.root if isinstance(graph, Dataset) else graph
    return _eval(node, registry)


def _fn(registry, name):
    return registry.get(name).fn


def _batch(elems):
    return tuple([e[c] for e in elems] for c in range(len(elems[0])))


def _chunks(items, b, drop):
    out = []
    for i in range(0, len(items), b):
        chunk = items[i:i + b]
        if drop and len(chunk) < b:
            break
        out.append(_batch(chunk))
    return out


def _interleave(sources, c):
    """Brute-force interleave: c slots visited in turn, one element per visit.

    An empty slot is refilled from the next source and read in the same
    visit; an exhausted slot is emptied and the turn passes on.
    """
    sources = list(sources)
    slots = [None] * c
    out = []
    pos = 0
    while True:
        if slots[pos] is None:
            if sources:
                slots[pos] = list(sources.pop(0))
                continue
            if all(s is None for s in slots):
                return out
            pos = (pos + 1) % c
            continue
        if not slots[pos]:
            slots[pos] = None
            pos = (pos + 1) % c
            continue
        out.append(slots[pos].pop(0))
        pos = (pos + 1) % c


def _eval(node: DatasetNode, registry) -> list[tuple]:
    k, a = node.kind, node.attrs
    ins = [_eval(i, registry) for i in node.inputs]
    src = ins[0] if ins else None
    if k == "from_memory":
        return [as_element(e) for e in a["elements"]]
    if k == "from_file":
        out = []
        for p in a["paths"]:
            data = open(p, "rb").read()
            pos = 0
            while pos < len(data):
                n = int.from_bytes(data[pos:pos + 4], "little")
                out.append((data[pos + 4:pos + 4 + n],))
                pos += 4 + n
        return out
    if k == "map":
        f = _fn(registry, a["fn"])
        return [as_element(f(*e)) for e in src]
    if k == "filter":
        p = _fn(registry, a["predicate"])
        return [e for e in src if p(*e)]
    if k == "map_and_filter":
        f, p = _fn(registry, a["fn"]), _fn(registry, a["predicate"])
        mapped = [as_element(f(*e)) for e in src]
        return [e for e in mapped if p(*e)]
    if k == "flat_map":
        f = _fn(registry, a["fn"])
        return [x for e in src for x in reference(f(*e), registry)]
    if k == "interleave":
        f = _fn(registry, a["fn"])
        return _interleave((reference(f(*e), registry) for e in src), a["cycle_length"])
    if k == "batch":
        return _chunks(src, a["batch_size"], a["drop_remainder"])
    if k == "map_and_batch":
        f = _fn(registry, a["fn"])
        return _chunks([as_element(f(*e)) for e in src], a["batch_size"], a["drop_remainder"])
    if k == "unbatch":
        return [tuple(c[i] for c in e) for e in src for i in range(len(e[0]))]
    if k in ("prefetch", "cache"):
        return src
    if k == "repeat":
        if a["count"] is INFINITE:
            raise Unsupported("infinite repeat")
        return src * a["count"]
    if k == "shard":
        return [e for i, e in enumerate(src) if i % a["num_shards"] == a["index"]]
    if k == "zip":
        return [tuple(c for e in row for c in e) for row in zip(*ins)]
    if k == "concatenate":
        return [e for part in ins for e in part]
    if k == "reduce":
        f = _fn(registry, a["fn"])
        acc = as_element(a["initial"])
        for e in src:
            acc = as_element(f(acc, e))
        return [acc]
    raise Unsupported(k)
