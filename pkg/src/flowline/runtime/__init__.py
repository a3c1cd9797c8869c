"""Stateful iterators that execute dataset graphs."""

from flowline.runtime import parallel, sequential  # noqa: F401  (registers iterator kinds)
from flowline.runtime.api import PipelineIterator, has_autotune, make_iterator, restore, save
from flowline.runtime.core import EOS, EndOfSequence, Options, TunableParameter

__all__ = [
    "EOS",
    "EndOfSequence",
    "Options",
    "PipelineIterator",
    "TunableParameter",
    "has_autotune",
    "make_iterator",
    "restore",
    "save",
]
