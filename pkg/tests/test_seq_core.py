import hashlib
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cip.seq_core import (
    ALPHABET,
    BLOSUM62,
    BothEmpty,
    Cdr3,
    InvalidLength,
    InvalidResidue,
    LengthMismatch,
    Peptide,
    blosum62,
    encode,
    hamming,
    levenshtein,
    levenshtein_many,
    normalized_distance,
    normalized_distance_many,
    parse_cdr3,
    parse_peptide,
)

residues = st.sampled_from(ALPHABET)
peptides = st.integers(8, 11).flatmap(lambda n: st.lists(residues, min_size=n, max_size=n).map("".join))
short_seqs = st.lists(residues, max_size=12).map("".join)

# sha256 of the row-major scores written as comma-separated integers
BLOSUM62_SHA256 = "d81640694dba3049bc0136cd1688098b0ab77feb97f16c6bc5c673e4845b69b5"


def _recursive_levenshtein(a, b):
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        _recursive_levenshtein(a[1:], b) + 1,
        _recursive_levenshtein(a, b[1:]) + 1,
        _recursive_levenshtein(a[1:], b[1:]) + (a[0] != b[0]),
    )


class TestParsing:
    def test_valid_peptide(self):
        p = parse_peptide("GILGFVFTL")
        assert isinstance(p, Peptide)
        assert len(p) == 9

    def test_short_peptide(self):
        with pytest.raises(InvalidLength) as exc:
            parse_peptide("GILGFVF")
        assert exc.value.actual == 7

    def test_long_peptide(self):
        with pytest.raises(InvalidLength):
            parse_peptide("GILGFVFTLAAA")

    def test_noncanonical_residue(self):
        with pytest.raises(InvalidResidue) as exc:
            parse_peptide("GILGFVXTL")
        assert (exc.value.position, exc.value.char) == (7, "X")

    @pytest.mark.parametrize("code", list("BJOUXZ"))
    def test_ambiguity_codes_rejected(self, code):
        with pytest.raises(InvalidResidue):
            parse_peptide("GIL" + code + "FVFTL")

    def test_cdr3_bounds(self):
        assert parse_cdr3("C") == "C"
        assert isinstance(parse_cdr3("CASSLGF"), Cdr3)
        with pytest.raises(InvalidLength):
            parse_cdr3("")
        with pytest.raises(InvalidLength):
            parse_cdr3("A" * 41)

    @given(peptides)
    def test_round_trip(self, text):
        assert str(parse_peptide(text)) == text


class TestBlosum:
    def test_known_entries(self):
        assert blosum62("L", "I") == 2
        assert blosum62("L", "L") == 4
        assert blosum62("W", "W") == 11
        assert blosum62("C", "C") == 9
        assert blosum62("W", "G") == -2

    def test_symmetric_positive_diagonal(self):
        for a, b in itertools.product(ALPHABET, repeat=2):
            assert blosum62(a, b) == blosum62(b, a)
        assert all(blosum62(a, a) > 0 for a in ALPHABET)

    def test_checksum(self):
        text = ",".join(str(int(v)) for v in BLOSUM62.ravel())
        assert hashlib.sha256(text.encode()).hexdigest() == BLOSUM62_SHA256
        assert int(BLOSUM62.sum()) == -426

    def test_read_only(self):
        with pytest.raises(ValueError):
            BLOSUM62[0, 0] = 0


class TestHamming:
    def test_examples(self):
        assert hamming("GILGFVFTL", "GILGFVFTL") == 0
        assert hamming("GILGFVFTL", "GILGAVFTL") == 1
        assert hamming("GILGFVFTL", "GIAGFVATL") == 2

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            hamming("GILGFVFTL", "GILGFVFT")

    @given(st.integers(8, 11).flatmap(lambda n: st.tuples(*[st.lists(residues, min_size=n, max_size=n).map("".join)] * 3)))
    def test_metric_axioms(self, triple):
        a, b, c = triple
        assert hamming(a, b) >= 0
        assert (hamming(a, b) == 0) == (a == b)
        assert hamming(a, b) == hamming(b, a)
        assert hamming(a, c) <= hamming(a, b) + hamming(b, c)


class TestLevenshtein:
    def test_examples(self):
        assert levenshtein("CASS", "CASS") == 0
        assert levenshtein("CASS", "CAS") == 1
        assert levenshtein("CASSLG", "CATSG") == _recursive_levenshtein("CASSLG", "CATSG") == 2

    @settings(max_examples=200)
    @given(st.lists(residues, max_size=6).map("".join), st.lists(residues, max_size=6).map("".join))
    def test_matches_recursive_oracle(self, a, b):
        assert levenshtein(a, b) == _recursive_levenshtein(a, b)

    @given(short_seqs, short_seqs)
    def test_bounded_by_longer_length(self, a, b):
        assert levenshtein(a, b) <= max(len(a), len(b))

    @given(st.integers(1, 12).flatmap(lambda n: st.tuples(*[st.lists(residues, min_size=n, max_size=n).map("".join)] * 2)))
    def test_not_above_hamming(self, pair):
        a, b = pair
        assert levenshtein(a, b) <= hamming(a, b)

    def test_normalized(self):
        assert normalized_distance("CASSLG", "CASSLG") == 0.0
        assert normalized_distance("AAAA", "CCCC") == 1.0
        assert normalized_distance("CASS", "CAS") == 0.25
        with pytest.raises(BothEmpty):
            normalized_distance("", "")

    @settings(max_examples=50)
    @given(short_seqs, st.lists(short_seqs, min_size=1, max_size=8))
    def test_vectorised_matches_scalar(self, query, targets):
        arr, lens = encode(targets)
        got = levenshtein_many(query, arr, lens)
        assert got.tolist() == [levenshtein(query, t) for t in targets]
        if query or all(targets):
            norm = normalized_distance_many(query, arr, lens)
            np.testing.assert_allclose(norm, [normalized_distance(query, t) if (query or t) else 0 for t in targets])
