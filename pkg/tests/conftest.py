import numpy as np
import pytest

from entmod.corpus import Modifier, ModifierSchema


@pytest.fixture
def binary_schema():
    return ModifierSchema((
        Modifier("negation", ("no", "yes"), "no"),
        Modifier("severity", ("unmarked", "slight", "severe"), "unmarked"),
    ))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
