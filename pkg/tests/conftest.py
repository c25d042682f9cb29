"""Shared fixtures and input generators for the test suite."""

import numpy as np
import pytest

from viascope.geometry import ViaSet


@pytest.fixture
def rng():
    """Deterministic generator for test inputs (seed 42)."""
    return np.random.default_rng(42)


def separated_points(rng, n, width, height, min_sep=1.0, max_tries=20000):
    """Rejection-sample n points with pairwise separation >= min_sep."""
    pts = []
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not place separated points; loosen the geometry")
        cand = rng.uniform((0.0, 0.0), (width, height))
        if all(np.hypot(*(cand - p)) >= min_sep for p in pts):
            pts.append(cand)
    return np.asarray(pts)


def separated_viaset(rng, n, width=8.0, height=5.0, min_sep=1.0):
    return ViaSet(separated_points(rng, n, width, height, min_sep))
