"""Shared helpers for the test suite."""
import numpy as np
import pytest

from teddy.core import ClassSpace, ScoreMap, Semantics


def scoremap(data, semantics=Semantics.SCORES) -> ScoreMap:
    return ScoreMap(np.asarray(data, dtype=np.float64), semantics)


@pytest.fixture
def space_1_2() -> ClassSpace:
    """One old class, two new classes."""
    return ClassSpace((1,), (2, 3))


@pytest.fixture
def space_4_2() -> ClassSpace:
    """The benchmark layout: four old, two new."""
    return ClassSpace((1, 2, 3, 4), (5, 6))
