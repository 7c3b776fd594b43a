import numpy as np
import pytest

from ridge_twfe.rng import RngStreams


def test_same_labels_same_draws():
    a = RngStreams(7).stream("network", 0, 1, 2).standard_normal(5)
    b = RngStreams(7).stream("network", 0, 1, 2).standard_normal(5)
    assert np.array_equal(a, b)


def test_labels_and_seeds_separate_streams():
    rng = RngStreams(7)
    base = rng.stream("network", 0).standard_normal(5)
    assert not np.array_equal(base, rng.stream("network", 1).standard_normal(5))
    assert not np.array_equal(base, rng.stream("test", 0).standard_normal(5))
    assert not np.array_equal(base, RngStreams(8).stream("network", 0).standard_normal(5))


def test_draws_do_not_depend_on_call_order():
    rng = RngStreams(3)
    first = rng.stream("bounds", 4).random(3)
    rng.stream("bounds", 2).random(100)
    again = rng.stream("bounds", 4).random(3)
    assert np.array_equal(first, again)


def test_negative_seed_or_label_rejected():
    with pytest.raises(ValueError):
        RngStreams(-1)
    with pytest.raises(ValueError):
        RngStreams(0).stream("network", -2)
