"""Basic and compound expression label spaces."""

from __future__ import annotations

import re
from enum import IntEnum

import numpy as np

from cerkit.errors import InvalidDistribution, UnknownLabel


class BasicExpression(IntEnum):
    ANGER = 0
    HAPPINESS = 1
    SADNESS = 2
    SURPRISE = 3
    DISGUST = 4
    FEAR = 5
    NEUTRAL = 6

    @property
    def display_name(self) -> str:
        return self.name.capitalize()


class CompoundExpression(IntEnum):
    ANGRILY_SURPRISED = 0
    DISGUSTEDLY_SURPRISED = 1
    FEARFULLY_SURPRISED = 2
    HAPPILY_SURPRISED = 3
    SADLY_ANGRY = 4
    SADLY_FEARFUL = 5
    SADLY_SURPRISED = 6

    @property
    def display_name(self) -> str:
        return " ".join(w.capitalize() for w in self.name.split("_"))


NUM_BASIC = len(BasicExpression)
NUM_COMPOUND = len(CompoundExpression)

B = BasicExpression
# (modifier, head) as named by each compound class
_CONSTITUENTS: dict[CompoundExpression, tuple[BasicExpression, BasicExpression]] = {
    CompoundExpression.ANGRILY_SURPRISED: (B.ANGER, B.SURPRISE),
    CompoundExpression.DISGUSTEDLY_SURPRISED: (B.DISGUST, B.SURPRISE),
    CompoundExpression.FEARFULLY_SURPRISED: (B.FEAR, B.SURPRISE),
    CompoundExpression.HAPPILY_SURPRISED: (B.HAPPINESS, B.SURPRISE),
    CompoundExpression.SADLY_ANGRY: (B.SADNESS, B.ANGER),
    CompoundExpression.SADLY_FEARFUL: (B.SADNESS, B.FEAR),
    CompoundExpression.SADLY_SURPRISED: (B.SADNESS, B.SURPRISE),
}
del B


def _build_map() -> np.ndarray:
    m = np.zeros((NUM_COMPOUND, NUM_BASIC), dtype=np.int64)
    for c, pair in _CONSTITUENTS.items():
        for b in pair:
            m[c, b] = 1
    m.setflags(write=False)
    return m


#: M[c, b] == 1 iff basic ``b`` is a constituent of compound ``c``.
COMPOUND_BASIC_MAP = _build_map()

BASIC_NAMES = tuple(b.display_name for b in BasicExpression)
COMPOUND_NAMES = tuple(c.display_name for c in CompoundExpression)


def constituents(c: CompoundExpression | int) -> tuple[BasicExpression, BasicExpression]:
    """Return the ``(modifier, head)`` basic emotions of compound class ``c``."""
    return _CONSTITUENTS[CompoundExpression(c)]


def _norm(s: str) -> str:
    return re.sub(r"[\s_\-]+", "_", s.strip()).upper()


_BY_NAME: dict[str, BasicExpression | CompoundExpression] = {}
for _member in (*BasicExpression, *CompoundExpression):
    _BY_NAME[_member.name] = _member


def parse_label(s: str) -> BasicExpression | CompoundExpression:
    """Parse a class name or a kind-tagged id such as ``compound:3``.

    Names are case-insensitive and spaces, underscores and hyphens are
    interchangeable.
    """
    text = str(s).strip()
    m = re.fullmatch(r"(basic|compound)\s*[:=]\s*(\d+)", text, flags=re.IGNORECASE)
    if m:
        kind, idx = m.group(1).lower(), int(m.group(2))
        enum = BasicExpression if kind == "basic" else CompoundExpression
        try:
            return enum(idx)
        except ValueError:
            raise UnknownLabel(f"no {kind} class with id {idx}") from None
    try:
        return _BY_NAME[_norm(text)]
    except KeyError:
        raise UnknownLabel(f"unknown expression label {s!r}") from None


def check_distribution(p: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidDistribution("probabilities must be finite and non-negative")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > atol):
        raise InvalidDistribution(f"probabilities must sum to 1 (got {sums})")
    return p


def compound_prior(p_basic) -> np.ndarray:
    """Map a basic-expression distribution onto the compound classes.

    Each compound scores the summed mass of its two constituents; scores are
    renormalized, falling back to uniform when every score is zero
    (e.g. all mass on Neutral).
    """
    p = check_distribution(p_basic)
    if p.shape != (NUM_BASIC,):
        raise InvalidDistribution(f"expected a length-{NUM_BASIC} vector, got shape {p.shape}")
    raw = COMPOUND_BASIC_MAP @ p
    total = raw.sum()
    if total <= 0.0:
        return np.full(NUM_COMPOUND, 1.0 / NUM_COMPOUND)
    return raw / total
