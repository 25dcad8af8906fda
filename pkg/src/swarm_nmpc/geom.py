"""Ball and interval set algebra.

Balls are closed Euclidean balls ``{y : |y - center| <= radius}``. The
Pontryagin difference is only defined for origin-centred subtrahends, which is
all the constraint tightening needs. ``None`` is the empty set.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

__all__ = [
    "Ball",
    "Interval",
    "IdentityReport",
    "ball_minkowski_sum",
    "ball_pontryagin_diff",
    "ball_contains",
    "interval_minkowski_sum",
    "interval_pontryagin_diff",
    "interval_set_identity_check",
    "identity_survey",
]


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        if center.ndim != 1:
            raise ValueError("ball center must be a vector")
        if not np.isfinite(center).all():
            raise ValueError("ball center must be finite")
        if not (self.radius > 0 and np.isfinite(self.radius)):
            raise ValueError(f"ball radius must be positive, got {self.radius}")
        center.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Ball):
            return NotImplemented
        return self.radius == other.radius and np.array_equal(self.center, other.center)

    def __hash__(self):
        return hash((self.radius, self.center.tobytes()))


@dataclass(frozen=True)
class Interval:
    """Closed interval ``[lo, hi]``; endpoints may be ``Fraction`` for exact work."""

    lo: object
    hi: object

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")


def _same_dim(a: Ball, b: Ball) -> None:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def ball_minkowski_sum(a: Ball, b: Ball) -> Ball:
    _same_dim(a, b)
    return Ball(a.center + b.center, a.radius + b.radius)


def ball_pontryagin_diff(a: Ball, b: Ball) -> Optional[Ball]:
    """Erode ``a`` by the origin-centred ball ``b``.

    Returns ``None`` when the erosion is empty. Eroding by exactly ``a.radius``
    leaves the single point ``a.center``; a ``Ball`` cannot hold a zero radius
    so that case is also reported as ``None``.
    """
    _same_dim(a, b)
    if np.any(b.center != 0):
        raise ValueError("only origin-centred balls can be subtracted")
    r = a.radius - b.radius
    if r <= 0:
        return None
    return Ball(a.center, r)


def ball_contains(outer: Ball, inner: Ball, atol: float = 0.0) -> bool:
    """True if ``inner`` is a subset of ``outer``."""
    _same_dim(outer, inner)
    gap = float(np.linalg.norm(inner.center - outer.center))
    return gap + inner.radius <= outer.radius + atol


def interval_minkowski_sum(a: Interval, b: Interval) -> Interval:
    return Interval(a.lo + b.lo, a.hi + b.hi)


def interval_pontryagin_diff(a: Interval, b: Interval) -> Optional[Interval]:
    # {x : x + y in a for all y in b} = [a.lo - b.lo, a.hi - b.hi]
    lo, hi = a.lo - b.lo, a.hi - b.hi
    if lo > hi:
        return None
    return Interval(lo, hi)


def _msum(a, b):
    if a is None or b is None:
        return None
    return interval_minkowski_sum(a, b)


def _pdiff(a, b):
    if a is None:
        return None
    if b is None:
        # Eroding by the empty set yields everything; never reached for
        # non-empty operands.
        raise ValueError("cannot erode by the empty set")
    return interval_pontryagin_diff(a, b)


@dataclass(frozen=True)
class IdentityReport:
    lhs: Optional[Interval]
    rhs_stated: Optional[Interval]
    rhs_proof: Optional[Interval]

    @property
    def stated_holds(self) -> bool:
        return self.lhs == self.rhs_stated

    @property
    def proof_holds(self) -> bool:
        return self.lhs == self.rhs_proof


def interval_set_identity_check(s1: Interval, s2: Interval, s3: Interval) -> IdentityReport:
    """Evaluate ``(S1 - S2) + (S2 - S3)`` against two candidate right-hand sides.

    ``rhs_stated`` is ``(S1 + S2) - (S3 + S3)`` and ``rhs_proof`` is
    ``(S1 + S2) - (S2 + S3)``, where ``+`` is Minkowski addition and ``-`` the
    Pontryagin difference. Exactness follows from the endpoint type; pass
    ``Fraction`` or ``int`` endpoints for zero-tolerance comparisons.
    """
    lhs = _msum(_pdiff(s1, s2), _pdiff(s2, s3))
    top = interval_minkowski_sum(s1, s2)
    rhs_stated = _pdiff(top, interval_minkowski_sum(s3, s3))
    rhs_proof = _pdiff(top, interval_minkowski_sum(s2, s3))
    return IdentityReport(lhs, rhs_stated, rhs_proof)


def _random_interval(rng: random.Random, span: int) -> Interval:
    a = Fraction(rng.randint(-span, span), rng.randint(1, 8))
    b = Fraction(rng.randint(-span, span), rng.randint(1, 8))
    return Interval(min(a, b), max(a, b))


def identity_survey(n_cases: int = 1000, seed: int = 0, span: int = 20) -> dict:
    """Count how often each right-hand side matches on random rational intervals.

    Cases where ``S1 - S2`` or ``S2 - S3`` is empty are counted separately
    because the left side is then empty by convention.
    """
    rng = random.Random(seed)
    counts = {"cases": 0, "stated_holds": 0, "proof_holds": 0, "degenerate": 0}
    while counts["cases"] < n_cases:
        s1, s2, s3 = (_random_interval(rng, span) for _ in range(3))
        rep = interval_set_identity_check(s1, s2, s3)
        if rep.lhs is None:
            counts["degenerate"] += 1
            continue
        counts["cases"] += 1
        counts["stated_holds"] += rep.stated_holds
        counts["proof_holds"] += rep.proof_holds
    return counts
