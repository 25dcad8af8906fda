from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import erosion_bounds, sumset_bounds
from swarm_nmpc.geom import (
    Ball,
    Interval,
    ball_contains,
    ball_minkowski_sum,
    ball_pontryagin_diff,
    identity_survey,
    interval_minkowski_sum,
    interval_pontryagin_diff,
    interval_set_identity_check,
)

coord = st.floats(-50, 50, allow_nan=False)
radius = st.floats(0.01, 20, allow_nan=False)
frac = st.builds(Fraction, st.integers(-40, 40), st.integers(1, 8))


@st.composite
def intervals(draw):
    a, b = draw(frac), draw(frac)
    return Interval(min(a, b), max(a, b))


def test_ball_rejects_bad_radius():
    for r in (0.0, -1.0, float("inf"), float("nan")):
        with pytest.raises(ValueError):
            Ball([0.0, 0.0], r)


def test_ball_center_is_read_only():
    b = Ball([1.0, 2.0], 1.0)
    with pytest.raises(ValueError):
        b.center[0] = 3.0


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        ball_minkowski_sum(Ball([0.0], 1.0), Ball([0.0, 0.0], 1.0))


def test_erosion_needs_origin_centred_subtrahend():
    with pytest.raises(ValueError):
        ball_pontryagin_diff(Ball([0.0, 0.0], 2.0), Ball([1.0, 0.0], 1.0))


def test_erosion_to_a_point_is_empty():
    assert ball_pontryagin_diff(Ball([0.0], 1.0), Ball([0.0], 1.0)) is None


@given(c1=st.lists(coord, min_size=2, max_size=2), c2=st.lists(coord, min_size=2, max_size=2),
       r1=radius, r2=radius)
def test_ball_sum_exact_form(c1, c2, r1, r2):
    s = ball_minkowski_sum(Ball(c1, r1), Ball(c2, r2))
    assert np.allclose(s.center, np.add(c1, c2))
    assert s.radius == pytest.approx(r1 + r2)


@given(c=st.lists(coord, min_size=3, max_size=3), r1=radius, r2=radius)
def test_ball_erosion_exact_form(c, r1, r2):
    d = ball_pontryagin_diff(Ball(c, r1), Ball([0, 0, 0], r2))
    if r1 > r2:
        assert d.radius == pytest.approx(r1 - r2)
        assert np.array_equal(d.center, np.asarray(c, float))
    else:
        assert d is None


@given(c=st.lists(coord, min_size=2, max_size=2), r=radius, b=radius, e=radius)
def test_erosion_of_sum_contains_original(c, r, b, e):
    # (X + B) - B contains X for origin-centred B
    X = Ball(c, r)
    B = Ball([0, 0], b)
    back = ball_pontryagin_diff(ball_minkowski_sum(X, B), B)
    assert back is not None and ball_contains(back, X, atol=1e-9)


def test_ball_contains_cases():
    big = Ball([0.0, 0.0], 2.0)
    assert ball_contains(big, Ball([1.0, 0.0], 1.0))
    assert not ball_contains(big, Ball([1.5, 0.0], 1.0))


@given(a=intervals(), b=intervals())
def test_interval_sum_matches_enumeration(a, b):
    s = interval_minkowski_sum(a, b)
    assert (s.lo, s.hi) == sumset_bounds((a.lo, a.hi), (b.lo, b.hi))


@given(a=intervals(), b=intervals())
def test_interval_erosion_matches_enumeration(a, b):
    d = interval_pontryagin_diff(a, b)
    ref = erosion_bounds((a.lo, a.hi), (b.lo, b.hi))
    assert (None if d is None else (d.lo, d.hi)) == ref


@given(a=intervals(), b=intervals(), c=intervals())
@settings(max_examples=200)
def test_identity_proof_version_holds(a, b, c):
    rep = interval_set_identity_check(a, b, c)
    if rep.lhs is not None:
        assert rep.proof_holds


def test_identity_stated_version_can_fail():
    s1, s2, s3 = Interval(0, 10), Interval(0, 4), Interval(0, 1)
    rep = interval_set_identity_check(s1, s2, s3)
    assert rep.proof_holds and not rep.stated_holds


def test_identity_survey_counts():
    out = identity_survey(200, seed=3)
    assert out["cases"] == 200
    assert out["proof_holds"] == 200
    assert out["stated_holds"] < 200
