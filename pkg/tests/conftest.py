import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from flowline.elements import UdfRegistry, set_default_registry  # noqa: E402


@pytest.fixture(autouse=True)
def registry():
    """Every test gets an empty default UDF registry."""
    fresh = UdfRegistry()
    previous = set_default_registry(fresh)
    yield fresh
    set_default_registry(previous)


def drain(ds, **options):
    from flowline import make_iterator

    with make_iterator(ds, **options) as it:
        return list(it)
