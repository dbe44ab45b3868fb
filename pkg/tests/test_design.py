import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sugarpolicy.design import Bounds, latin_hypercube, strata_counts
from sugarpolicy.sim import ConfigError


def one_per_stratum(points, bounds):
    """Histogram oracle: each of the n equal-width bins holds exactly one point."""
    n = len(points)
    for j in range(bounds.dim):
        edges = np.linspace(bounds.lower[j], bounds.upper[j], n + 1)
        counts, _ = np.histogram(points[:, j], bins=edges)
        if not np.all(counts == 1):
            return False
    return True


def test_four_points_unit_interval():
    pts = latin_hypercube(4, Bounds([(0.0, 1.0)]), np.random.default_rng(0))
    assert sorted(np.floor(pts[:, 0] * 4).astype(int).tolist()) == [0, 1, 2, 3]


@pytest.mark.parametrize("n", [4, 40, 100])
def test_policy_state_box(n):
    box = Bounds([(0, 1), (0, 1), (6, 15), (0, 0.4)])
    pts = latin_hypercube(n, box, np.random.default_rng(n))
    assert pts.shape == (n, 4)
    assert box.contains(pts)
    assert one_per_stratum(pts, box)
    assert np.all(strata_counts(pts, box) == 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 100), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_projection_property(n, d, seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-10, 10, d)
    box = Bounds(list(zip(lo, lo + rng.uniform(0.1, 20, d))))
    assert one_per_stratum(latin_hypercube(n, box, np.random.default_rng(seed)), box)


def test_deterministic_given_seed():
    box = Bounds([(0, 1)] * 3)
    a = latin_hypercube(10, box, np.random.default_rng(5))
    b = latin_hypercube(10, box, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_too_few_points():
    with pytest.raises(ConfigError):
        latin_hypercube(1, Bounds([(0, 1)]), np.random.default_rng(0))


class TestBounds:
    def test_invalid(self):
        with pytest.raises(ConfigError):
            Bounds([(1.0, 1.0)])

    def test_unit_roundtrip(self):
        box = Bounds([(6, 15), (-1, 1)])
        x = np.array([[7.5, 0.25], [15.0, -1.0]])
        np.testing.assert_allclose(box.from_unit(box.to_unit(x)), x, atol=1e-15)

    def test_concatenation(self):
        box = Bounds([(0, 1)], names=("a",)) + Bounds([(2, 3)], names=("b",))
        assert box.dim == 2 and box.names == ("a", "b")
        np.testing.assert_array_equal(box.upper, [1, 3])
