import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cerkit.errors import InvalidDistribution, UnknownLabel
from cerkit.taxonomy import (
    BASIC_NAMES,
    COMPOUND_BASIC_MAP,
    COMPOUND_NAMES,
    BasicExpression as B,
    CompoundExpression as C,
    compound_prior,
    constituents,
    parse_label,
)


def test_canonical_orders():
    assert BASIC_NAMES == ("Anger", "Happiness", "Sadness", "Surprise", "Disgust", "Fear", "Neutral")
    assert COMPOUND_NAMES == (
        "Angrily Surprised",
        "Disgustedly Surprised",
        "Fearfully Surprised",
        "Happily Surprised",
        "Sadly Angry",
        "Sadly Fearful",
        "Sadly Surprised",
    )
    assert [int(b) for b in B] == list(range(7))


def test_map_row_sums_and_neutral_column():
    assert COMPOUND_BASIC_MAP.shape == (7, 7)
    np.testing.assert_array_equal(COMPOUND_BASIC_MAP.sum(axis=1), np.full(7, 2))
    assert not COMPOUND_BASIC_MAP[:, B.NEUTRAL].any()


@pytest.mark.parametrize(
    "compound, expected",
    [
        (C.FEARFULLY_SURPRISED, (B.FEAR, B.SURPRISE)),
        (C.SADLY_ANGRY, (B.SADNESS, B.ANGER)),
        (C.HAPPILY_SURPRISED, (B.HAPPINESS, B.SURPRISE)),
    ],
)
def test_constituents(compound, expected):
    assert constituents(compound) == expected


def test_constituents_agree_with_map():
    for c in C:
        assert set(np.flatnonzero(COMPOUND_BASIC_MAP[c])) == {int(b) for b in constituents(c)}


@pytest.mark.parametrize(
    "text, expected",
    [
        ("fearfully_surprised", C.FEARFULLY_SURPRISED),
        ("Surprise", B.SURPRISE),
        ("SADLY ANGRY", C.SADLY_ANGRY),
        ("compound:3", C.HAPPILY_SURPRISED),
        ("basic:6", B.NEUTRAL),
    ],
)
def test_parse_label(text, expected):
    assert parse_label(text) is expected


@pytest.mark.parametrize("bad", ["joyful", "compound:9", "", "surprised"])
def test_parse_label_unknown(bad):
    with pytest.raises(UnknownLabel):
        parse_label(bad)


def test_prior_uniform():
    np.testing.assert_allclose(compound_prior(np.full(7, 1 / 7)), np.full(7, 1 / 7), atol=1e-15)


def test_prior_one_hot_surprise():
    p = np.zeros(7)
    p[B.SURPRISE] = 1.0
    expected = np.array([0.2, 0.2, 0.2, 0.2, 0.0, 0.0, 0.2])
    np.testing.assert_allclose(compound_prior(p), expected, atol=1e-15)


def test_prior_one_hot_neutral_falls_back_to_uniform():
    p = np.zeros(7)
    p[B.NEUTRAL] = 1.0
    np.testing.assert_array_equal(compound_prior(p), np.full(7, 1 / 7))


@pytest.mark.parametrize("bad", [np.full(7, 0.2), -np.eye(7)[0] + 2 * np.eye(7)[1], np.full(6, 1 / 6)])
def test_prior_rejects_invalid(bad):
    with pytest.raises(InvalidDistribution):
        compound_prior(bad)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=7, max_size=7).filter(lambda v: sum(v) > 1e-3))
def test_prior_is_distribution(weights):
    p = np.asarray(weights) / np.sum(weights)
    out = compound_prior(p)
    assert abs(out.sum() - 1.0) <= 1e-9
    assert (out >= 0).all()
