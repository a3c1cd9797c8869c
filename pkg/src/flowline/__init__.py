"""flowline: a self-tuning, checkpointable input-pipeline framework."""

from flowline.elements import (
    BOOL,
    BYTES,
    FLOAT64,
    INT64,
    ElementSpec,
    ListOf,
    Scalar,
    TupleOf,
    UdfRegistry,
    conforms,
    default_registry,
    register_udf,
    spec,
)
from flowline.graph import AUTOTUNE, INFINITE, Dataset, DatasetNode, build
from flowline.runtime import EOS, Options, make_iterator, restore, save
from flowline.serialization import deserialize, fingerprint, serialize

__version__ = "0.1.0"

__all__ = [
    "AUTOTUNE",
    "BOOL",
    "BYTES",
    "EOS",
    "FLOAT64",
    "INFINITE",
    "INT64",
    "Dataset",
    "DatasetNode",
    "ElementSpec",
    "ListOf",
    "Options",
    "Scalar",
    "TupleOf",
    "UdfRegistry",
    "build",
    "conforms",
    "default_registry",
    "deserialize",
    "fingerprint",
    "make_iterator",
    "register_udf",
    "restore",
    "save",
    "serialize",
    "spec",
]
