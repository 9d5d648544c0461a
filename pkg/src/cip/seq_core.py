"""Amino-acid alphabet, BLOSUM62 scores and sequence distances."""

from __future__ import annotations

from typing import Sequence

import numpy as np

ALPHABET = "ARNDCQEGHILKMFPSTWYV"
AA_INDEX = {aa: i for i, aa in enumerate(ALPHABET)}

PEPTIDE_MIN_LEN = 8
PEPTIDE_MAX_LEN = 11
CDR3_MAX_LEN = 40

# NCBI BLOSUM62, rows/columns in ALPHABET order.
_BLOSUM62_ROWS = """
 4 -1 -2 -2  0 -1 -1  0 -2 -1 -1 -1 -1 -2 -1  1  0 -3 -2  0
-1  5  0 -2 -3  1  0 -2  0 -3 -2  2 -1 -3 -2 -1 -1 -3 -2 -3
-2  0  6  1 -3  0  0  0  1 -3 -3  0 -2 -3 -2  1  0 -4 -2 -3
-2 -2  1  6 -3  0  2 -1 -1 -3 -4 -1 -3 -3 -1  0 -1 -4 -3 -3
 0 -3 -3 -3  9 -3 -4 -3 -3 -1 -1 -3 -1 -2 -3 -1 -1 -2 -2 -1
-1  1  0  0 -3  5  2 -2  0 -3 -2  1  0 -3 -1  0 -1 -2 -1 -2
-1  0  0  2 -4  2  5 -2  0 -3 -3  1 -2 -3 -1  0 -1 -3 -2 -2
 0 -2  0 -1 -3 -2 -2  6 -2 -4 -4 -2 -3 -3 -2  0 -2 -2 -3 -3
-2  0  1 -1 -3  0  0 -2  8 -3 -3 -1 -2 -1 -2 -1 -2 -2  2 -3
-1 -3 -3 -3 -1 -3 -3 -4 -3  4  2 -3  1  0 -3 -2 -1 -3 -1  3
-1 -2 -3 -4 -1 -2 -3 -4 -3  2  4 -2  2  0 -3 -2 -1 -2 -1  1
-1  2  0 -1 -3  1  1 -2 -1 -3 -2  5 -1 -3 -1  0 -1 -3 -2 -2
-1 -1 -2 -3 -1  0 -2 -3 -2  1  2 -1  5  0 -2 -1 -1 -1 -1  1
-2 -3 -3 -3 -2 -3 -3 -3 -1  0  0 -3  0  6 -4 -2 -2  1  3 -1
-1 -2 -2 -1 -3 -1 -1 -2 -2 -3 -3 -1 -2 -4  7 -1 -1 -4 -3 -2
 1 -1  1  0 -1  0  0  0 -1 -2 -2  0 -1 -2 -1  4  1 -3 -2 -2
 0 -1  0 -1 -1 -1 -1 -2 -2 -1 -1 -1 -1 -2 -1  1  5 -2 -2  0
-3 -3 -4 -4 -2 -2 -3 -2 -2 -3 -2 -3 -1  1 -4 -3 -2 11  2 -3
-2 -2 -2 -3 -2 -1 -2 -3  2 -1 -1 -2 -1  3 -3 -2 -2  2  7 -1
 0 -3 -3 -3 -1 -2 -2 -3 -3  3  1 -2  1 -1 -2 -2  0 -3 -1  4
"""

BLOSUM62 = np.array(
    [[int(v) for v in row.split()] for row in _BLOSUM62_ROWS.strip().splitlines()],
    dtype=np.int64,
)
BLOSUM62.setflags(write=False)

# {a: {b: score}} view, faster than array indexing in the edit enumerators.
BLOSUM62_TABLE = {
    a: {b: int(BLOSUM62[i, j]) for j, b in enumerate(ALPHABET)}
    for i, a in enumerate(ALPHABET)
}


class SequenceError(ValueError):
    pass


class InvalidResidue(SequenceError):
    def __init__(self, position: int, char: str):
        super().__init__(f"non-canonical residue {char!r} at position {position}")
        self.position = position
        self.char = char


class InvalidLength(SequenceError):
    def __init__(self, actual: int):
        super().__init__(f"invalid sequence length {actual}")
        self.actual = actual


class LengthMismatch(SequenceError):
    pass


class BothEmpty(SequenceError):
    pass


class Peptide(str):
    """A validated 8-11 residue peptide. ``str(p)`` renders it back."""

    __slots__ = ()

    def __new__(cls, text: str) -> "Peptide":
        _check_residues(text)
        if not PEPTIDE_MIN_LEN <= len(text) <= PEPTIDE_MAX_LEN:
            raise InvalidLength(len(text))
        return super().__new__(cls, text)


class Cdr3(str):
    """A validated, non-empty CDR3 loop sequence."""

    __slots__ = ()

    def __new__(cls, text: str) -> "Cdr3":
        _check_residues(text)
        if not 1 <= len(text) <= CDR3_MAX_LEN:
            raise InvalidLength(len(text))
        return super().__new__(cls, text)


def _check_residues(text: str) -> None:
    for pos, ch in enumerate(text, start=1):
        if ch not in AA_INDEX:
            raise InvalidResidue(pos, ch)


def parse_peptide(text: str) -> Peptide:
    """Parse ``text`` into a :class:`Peptide`.

    Positions in :class:`InvalidResidue` are 1-based, matching peptide
    position conventions (P1..PL).
    """
    return Peptide(text)


def parse_cdr3(text: str) -> Cdr3:
    return Cdr3(text)


def blosum62(a: str, b: str) -> int:
    return BLOSUM62_TABLE[a][b]


def hamming(a: str, b: str) -> int:
    if len(a) != len(b):
        raise LengthMismatch(f"lengths differ: {len(a)} vs {len(b)}")
    return sum(x != y for x, y in zip(a, b))


def levenshtein(a: Sequence[str], b: Sequence[str]) -> int:
    """Unit-cost edit distance by the two-row dynamic program."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_distance(a: Sequence[str], b: Sequence[str]) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        raise BothEmpty("both sequences are empty")
    return levenshtein(a, b) / longest


def encode(seqs: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Pad residue sequences into an int array (-1 fill) plus their lengths."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if len(seqs) else 0
    out = np.full((len(seqs), width), -1, dtype=np.int16)
    for row, s in enumerate(seqs):
        out[row, : len(s)] = [AA_INDEX.get(ch, 20) for ch in s]
    return out, lengths


def levenshtein_many(query: str, targets: np.ndarray, target_lengths: np.ndarray) -> np.ndarray:
    """Edit distance from ``query`` to every row of an :func:`encode`-d batch.

    Rows of the DP table are filled one query residue at a time; the
    insertion recurrence along a row is resolved with a running minimum,
    so each row costs a handful of vectorised array operations.
    """
    n, width = targets.shape
    cols = np.arange(width + 1, dtype=np.int64)
    prev = np.broadcast_to(cols, (n, width + 1)).copy()
    for i, ch in enumerate(query, start=1):
        code = AA_INDEX.get(ch, 20)
        sub = prev[:, :-1] + (targets != code)
        cand = np.empty_like(prev)
        cand[:, 0] = i
        cand[:, 1:] = np.minimum(prev[:, 1:] + 1, sub)
        # cur[j] = min_{l <= j} cand[l] + (j - l)
        prev = np.minimum.accumulate(cand - cols, axis=1) + cols
    return prev[np.arange(n), target_lengths]


def normalized_distance_many(query: str, targets: np.ndarray, target_lengths: np.ndarray) -> np.ndarray:
    dist = levenshtein_many(query, targets, target_lengths)
    longest = np.maximum(target_lengths, len(query))
    if np.any(longest == 0):
        raise BothEmpty("both sequences are empty")
    return dist / longest
