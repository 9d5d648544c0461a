"""Counterfactual peptide edits.

Two edit families are generated for a source peptide:

* non-anchor edits: conservative substitutions (BLOSUM62 >= ``blosum_min``)
  restricted to non-anchor positions, anchors frozen;
* anchor edits: at least one anchor position changed, every changed anchor
  to a disruptive residue (BLOSUM62 < ``disruptive_max``), any extra
  non-anchor change conservative.

Position 1 is never edited.  All edits are substitutions, so length is
preserved.  With anchor masking switched off every position 2..L is both
editable for non-anchor edits and disruptable for anchor edits; an anchor
edit then needs at least one disruptive change and every other change must
still be conservative.
"""

from __future__ import annotations

import functools
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np

from cip.seq_core import ALPHABET, BLOSUM62_TABLE, LengthMismatch, parse_peptide

log = logging.getLogger(__name__)

EditKind = Literal["non_anchor", "anchor"]
KINDS: tuple[str, ...] = ("non_anchor", "anchor")

ScoreTable = Mapping[str, Mapping[str, int]]


class EditError(ValueError):
    pass


class NoEditablePositions(EditError):
    pass


class NoDisruptiveSubstitution(EditError):
    pass


@dataclass(frozen=True)
class AnchorScheme:
    """Anchor layout as a function of peptide length.

    ``positions`` are 1-based; negative values count from the C-terminus,
    so the default ``(2, -1)`` is {P2, PΩ}.
    """

    positions: tuple[int, ...] = (2, -1)
    masking: bool = True

    def anchors(self, length: int) -> frozenset[int]:
        if not self.masking:
            return frozenset()
        return frozenset(p if p > 0 else length + 1 + p for p in self.positions)

    def non_anchors(self, length: int) -> frozenset[int]:
        if not self.masking:
            return frozenset(range(2, length + 1))
        return frozenset(range(2, length)) - self.anchors(length)

    def disruptable(self, length: int) -> frozenset[int]:
        """Positions at which an anchor edit may apply a disruptive change."""
        if not self.masking:
            return frozenset(range(2, length + 1))
        return self.anchors(length)

    def editable(self, length: int) -> frozenset[int]:
        return self.disruptable(length) | self.non_anchors(length)


@dataclass(frozen=True)
class EditConstraints:
    max_hamming: int = 2
    blosum_min: float = 0
    disruptive_max: int = 0

    def __post_init__(self):
        if not 1 <= self.max_hamming <= 3:
            raise ValueError(f"max_hamming must be in [1, 3], got {self.max_hamming}")


NO_BLOSUM = -math.inf


@dataclass(frozen=True)
class EditSet:
    source: str
    kind: str
    members: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.members)


def changed_positions(source: str, candidate: str) -> list[int]:
    if len(source) != len(candidate):
        raise LengthMismatch(f"lengths differ: {len(source)} vs {len(candidate)}")
    return [j for j, (a, b) in enumerate(zip(source, candidate), start=1) if a != b]


# -- predicates ---------------------------------------------------------------


def validate_non_anchor(
    pi: str,
    candidate: str,
    scheme: AnchorScheme = AnchorScheme(),
    c: EditConstraints = EditConstraints(),
    matrix: ScoreTable | None = None,
) -> bool:
    B = matrix or BLOSUM62_TABLE
    changed = changed_positions(pi, candidate)
    if not changed or len(changed) > c.max_hamming:
        return False
    allowed = scheme.non_anchors(len(pi))
    for j in changed:
        if j not in allowed:
            return False
        if B[pi[j - 1]][candidate[j - 1]] < c.blosum_min:
            return False
    return True


def validate_anchor(
    pi: str,
    candidate: str,
    scheme: AnchorScheme = AnchorScheme(),
    c: EditConstraints = EditConstraints(),
    matrix: ScoreTable | None = None,
) -> bool:
    B = matrix or BLOSUM62_TABLE
    changed = changed_positions(pi, candidate)
    if not changed or len(changed) > c.max_hamming:
        return False
    L = len(pi)
    if any(j not in scheme.editable(L) for j in changed):
        return False
    scores = {j: B[pi[j - 1]][candidate[j - 1]] for j in changed}
    if scheme.masking:
        anchors = scheme.anchors(L)
        hit = [j for j in changed if j in anchors]
        if not hit:
            return False
        if any(scores[j] >= c.disruptive_max for j in hit):
            return False
        return all(scores[j] >= c.blosum_min for j in changed if j not in anchors)
    disruptive = [scores[j] < c.disruptive_max for j in changed]
    if not any(disruptive):
        return False
    return all(d or scores[j] >= c.blosum_min for j, d in zip(changed, disruptive))


# -- enumeration --------------------------------------------------------------


def _substitutes(residue: str, B: ScoreTable, lo: float, hi: float) -> list[str]:
    return [a for a in ALPHABET if a != residue and lo <= B[residue][a] < hi]


def _expand(pi: str, options: dict[int, list[tuple[str, bool]]], k: int, need_flag: bool) -> list[str]:
    """All peptides changing 1..k positions drawn from ``options``.

    Each option carries a flag; with ``need_flag`` at least one chosen
    option must be flagged.
    """
    out = []
    chars = list(pi)
    positions = sorted(options)
    for r in range(1, k + 1):
        for combo in itertools.combinations(positions, r):
            for picks in itertools.product(*(options[j] for j in combo)):
                if need_flag and not any(flag for _, flag in picks):
                    continue
                cand = chars.copy()
                for j, (aa, _) in zip(combo, picks):
                    cand[j - 1] = aa
                out.append("".join(cand))
    return out


def _enumerate_non_anchor(pi: str, scheme: AnchorScheme, c: EditConstraints, B: ScoreTable) -> tuple[str, ...]:
    positions = scheme.non_anchors(len(pi))
    if not positions:
        raise NoEditablePositions(f"no non-anchor positions for {pi}")
    options = {
        j: [(a, False) for a in _substitutes(pi[j - 1], B, c.blosum_min, math.inf)]
        for j in positions
    }
    options = {j: v for j, v in options.items() if v}
    return tuple(_expand(pi, options, c.max_hamming, need_flag=False))


def _enumerate_anchor(pi: str, scheme: AnchorScheme, c: EditConstraints, B: ScoreTable) -> tuple[str, ...]:
    L = len(pi)
    disruptable = scheme.disruptable(L)
    if not disruptable:
        raise NoEditablePositions(f"no anchor positions for {pi}")
    options: dict[int, list[tuple[str, bool]]] = {}
    for j in scheme.editable(L):
        res = pi[j - 1]
        opts = []
        if j in disruptable:
            opts += [(a, True) for a in _substitutes(res, B, -math.inf, c.disruptive_max)]
        if j not in disruptable or not scheme.masking:
            lo = max(c.blosum_min, c.disruptive_max) if not scheme.masking else c.blosum_min
            opts += [(a, False) for a in _substitutes(res, B, lo, math.inf)]
        if opts:
            options[j] = opts
    if not any(flag for opts in options.values() for _, flag in opts):
        raise NoDisruptiveSubstitution(f"no disruptive substitution available at the anchors of {pi}")
    return tuple(_expand(pi, options, c.max_hamming, need_flag=True))


@functools.lru_cache(maxsize=4096)
def _cached(pi: str, kind: str, scheme: AnchorScheme, c: EditConstraints) -> tuple[str, ...]:
    if kind == "non_anchor":
        return _enumerate_non_anchor(pi, scheme, c, BLOSUM62_TABLE)
    return _enumerate_anchor(pi, scheme, c, BLOSUM62_TABLE)


def enumerate_edits(
    pi: str,
    kind: str,
    scheme: AnchorScheme = AnchorScheme(),
    c: EditConstraints = EditConstraints(),
    matrix: ScoreTable | None = None,
) -> EditSet:
    if kind not in KINDS:
        raise ValueError(f"unknown edit kind {kind!r}")
    pi = str(parse_peptide(pi))
    if matrix is None:
        members = _cached(pi, kind, scheme, c)
    elif kind == "non_anchor":
        members = _enumerate_non_anchor(pi, scheme, c, matrix)
    else:
        members = _enumerate_anchor(pi, scheme, c, matrix)
    return EditSet(pi, kind, members)


def enumerate_non_anchor(pi, scheme=AnchorScheme(), c=EditConstraints(), matrix=None) -> EditSet:
    return enumerate_edits(pi, "non_anchor", scheme, c, matrix)


def enumerate_anchor(pi, scheme=AnchorScheme(), c=EditConstraints(), matrix=None) -> EditSet:
    return enumerate_edits(pi, "anchor", scheme, c, matrix)


def members_or_empty(pi: str, kind: str, scheme: AnchorScheme, c: EditConstraints) -> tuple[str, ...]:
    """Enumeration with structural failures mapped to the empty set."""
    try:
        return enumerate_edits(pi, kind, scheme, c).members
    except EditError:
        return ()


# -- sampling -----------------------------------------------------------------


def draw(members: tuple[str, ...], n: int, rng: np.random.Generator) -> list[str]:
    """``n`` uniform draws with replacement; empty input gives an empty list."""
    if not members:
        return []
    idx = rng.integers(0, len(members), size=n)
    return [members[i] for i in idx]


def sample_edits(
    pi: str,
    kind: str,
    n: int,
    rng_seed: int,
    scheme: AnchorScheme = AnchorScheme(),
    c: EditConstraints = EditConstraints(),
) -> list[str]:
    """Sample ``n`` members of the edit set uniformly with replacement.

    An empty edit set is signalled by an empty return list, never by an
    exception, so callers can skip the pair.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    members = members_or_empty(pi, kind, scheme, c)
    if not members:
        log.debug("empty %s edit set for %s", kind, pi)
    return draw(members, n, np.random.default_rng(rng_seed))
