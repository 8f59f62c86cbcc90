"""Shared fixtures: small deterministic datasets reused across test modules."""

import numpy as np
import pytest

from capforge import SynthSpec, generate


@pytest.fixture(scope="session")
def clean_ds():
    """Well-separated 6-class dataset with no planted structure."""
    spec = SynthSpec(n_classes=6, per_class=10, test_per_class=6, dim=16,
                     intra_class_std=0.05, seed=3)
    ds, _ = generate(spec)
    return ds


@pytest.fixture(scope="session")
def planted():
    """The canonical planted-mismatch instance: C=10, two mismatched classes."""
    spec = SynthSpec(n_classes=10, per_class=20, test_per_class=8, dim=32,
                     intra_class_std=0.08, n_mismatch=2, seed=7)
    return generate(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
