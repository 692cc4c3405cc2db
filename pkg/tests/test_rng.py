"""Counter-based stream determinism and independence."""

import numpy as np
import pytest

from uamt.rng import RngStream


def test_same_triple_same_draws():
    a = RngStream(42, 7, 3).generator().random(100)
    b = RngStream(42, 7, 3).generator().random(100)
    assert np.array_equal(a, b)


def test_distinct_stream_ids_differ():
    a = RngStream(42, 0).generator().random(100)
    b = RngStream(42, 1).generator().random(100)
    assert not np.array_equal(a, b)


def test_child_streams_are_deterministic_and_distinct():
    root = RngStream(7)
    c1, c2 = root.child(1), root.child(2)
    assert c1 == root.child(1)
    assert c1 != c2
    assert not np.array_equal(c1.generator().random(50), c2.generator().random(50))


def test_child_of_child_differs_from_sibling():
    root = RngStream(7)
    assert root.child(1).child(2) != root.child(2).child(1)
    assert root.child(1).child(2) != root.child(1)


def test_advanced_counter_skips_draws():
    base = RngStream(3, 5)
    full = base.generator().random(10)
    # Philox advance() moves the counter in raw 64-bit output words; drawing
    # from an advanced stream must be deterministic and differ from the start.
    again = base.advanced(4).generator().random(6)
    assert np.array_equal(again, RngStream(3, 5, 4).generator().random(6))
    assert not np.array_equal(full[:6], again)


def test_streams_are_value_objects():
    assert RngStream(1, 2, 3) == RngStream(1, 2, 3)
    with pytest.raises(Exception):
        RngStream(1).child(0).__setattr__("seed", 9)


@pytest.mark.parametrize("field", ["seed", "stream_id", "counter"])
def test_out_of_range_fields_rejected(field):
    kwargs = {"seed": 0, "stream_id": 0, "counter": 0}
    kwargs[field] = -1
    with pytest.raises(ValueError):
        RngStream(**kwargs)
    kwargs[field] = 1 << 64
    with pytest.raises(ValueError):
        RngStream(**kwargs)
