"""Synthetic TCR-peptide benchmark with a known binding rule and a planted V-family shortcut.

Ground truth: a pair binds iff both peptide anchors lie in their allowed
residue sets and the CDR3b is complementary to the peptide core.
Complementarity is judged on physico-chemical residue classes: the CDR3b
must contain a 3-mer whose class signature equals the reversed, class-wise
complement of the signature of peptide positions 4-6.

Every V family stamps a fixed 3-residue motif right after the ``CAS``
start of its CDR3b, so the family is visible to a sequence model.  In
``train`` mode binders come from a small set of designated families with
probability ``gamma``; in ``ood`` mode families are drawn uniformly for
every TCR, and a fraction of negatives carries anchor-disrupted variants of
the peptide pool (decoys) that only an anchor-aware model can rule out.
Peptide popularity among binders follows a Zipf law, so a few peptides
dominate the positives.

The universe (family motifs, peptide pool, popularity) depends only on
``universe_seed``, so train and ood datasets built with different
``rng_seed`` values share it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from cip.dataset import DEFAULT_ALLELE, PairRecord
from cip.edit_engine import AnchorScheme, EditConstraints, draw, members_or_empty
from cip.seq_core import ALPHABET

log = logging.getLogger(__name__)

RESIDUE_CLASS = {}
for _cls, _members in {"h": "AVLIM", "a": "FWY", "p": "KRH", "n": "DE", "o": "STNQ", "s": "CGP"}.items():
    for _aa in _members:
        RESIDUE_CLASS[_aa] = _cls
COMPLEMENT = {"h": "a", "a": "h", "p": "n", "n": "p", "o": "o", "s": "s"}
CLASS_MEMBERS = {c: "".join(a for a in ALPHABET if RESIDUE_CLASS[a] == c) for c in COMPLEMENT}

CDR3_START = "CAS"
CDR3_END = "QYF"
CORE_POSITIONS = (4, 5, 6)
MODES = ("train", "ood")


@dataclass(frozen=True)
class SynthConfig:
    n_pairs: int = 20000
    pos_rate: float = 0.05
    gamma: float = 0.8
    n_families: int = 12
    n_bias_families: int = 3
    n_peptides: int = 50
    background_tcr_fraction: float = 0.10
    anchor_allowed: tuple[tuple[int, str], ...] = ((2, "LMI"), (-1, "VLI"))
    use_complementarity: bool = True
    ood_decoy_rate: float = 0.5
    ood_decoy_anchors: int = 2
    popularity_exponent: float = 1.5
    mode: str = "train"
    universe_seed: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.pos_rate < 0.5:
            raise ValueError("pos_rate must lie in (0, 0.5)")
        if self.n_families < 6:
            raise ValueError("n_families must be >= 6")
        if not 0 < self.n_bias_families < self.n_families:
            raise ValueError("n_bias_families must be in [1, n_families)")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0 <= self.ood_decoy_rate < 1:
            raise ValueError("ood_decoy_rate must lie in [0, 1)")
        if self.ood_decoy_anchors < 1:
            raise ValueError("ood_decoy_anchors must be >= 1")
        if self.popularity_exponent < 0:
            raise ValueError("popularity_exponent must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.n_pairs < 20:
            raise ValueError("n_pairs must be >= 20")


def class_signature(seq: str) -> str:
    return "".join(RESIDUE_CLASS[a] for a in seq)


def target_signature(peptide: str) -> str:
    core = class_signature("".join(peptide[p - 1] for p in CORE_POSITIONS))
    return "".join(COMPLEMENT[c] for c in reversed(core))


class Oracle:
    """The ground-truth labeller; total over any CDR3 string and 8-11-mer."""

    def __init__(self, anchor_allowed: Sequence[tuple[int, str]], use_complementarity: bool = True):
        self.anchor_allowed = tuple((int(p), str(s)) for p, s in anchor_allowed)
        self.use_complementarity = use_complementarity

    def anchors_ok(self, peptide: str) -> bool:
        L = len(peptide)
        for pos, allowed in self.anchor_allowed:
            j = pos if pos > 0 else L + 1 + pos
            if peptide[j - 1] not in allowed:
                return False
        return True

    def complementary(self, cdr3: str, peptide: str) -> bool:
        target = target_signature(peptide)
        sig = class_signature(cdr3)
        return target in sig

    def __call__(self, cdr3: str, peptide: str) -> int:
        if not self.anchors_ok(peptide):
            return 0
        if self.use_complementarity and not self.complementary(cdr3, peptide):
            return 0
        return 1


@dataclass(frozen=True)
class Universe:
    families: tuple[str, ...]
    motifs: dict
    bias_families: tuple[str, ...]
    peptides: tuple[str, ...]
    popularity: np.ndarray


def _random_residues(rng: np.random.Generator, n: int) -> str:
    return "".join(ALPHABET[i] for i in rng.integers(0, 20, size=n))


def build_universe(config: SynthConfig) -> Universe:
    rng = np.random.default_rng([config.universe_seed, 0xC1])
    families = tuple(f"TRBV{i}" for i in range(1, config.n_families + 1))
    motifs: dict[str, str] = {}
    used: set[str] = set()
    for fam in families:
        m = _random_residues(rng, 3)
        while m in used:
            m = _random_residues(rng, 3)
        used.add(m)
        motifs[fam] = m
    # signatures present in the fixed CDR3 segments would make a peptide bind every TCR
    fixed = [CDR3_START + m for m in motifs.values()] + [CDR3_END]
    fixed_sigs = {class_signature(s[i : i + 3]) for s in fixed for i in range(len(s) - 2)}

    allowed = dict(config.anchor_allowed)
    lengths = rng.choice([8, 9, 10, 11], size=10 * config.n_peptides, p=[0.1, 0.6, 0.2, 0.1])
    peptides: list[str] = []
    for L in lengths:
        if len(peptides) == config.n_peptides:
            break
        chars = list(_random_residues(rng, int(L)))
        for pos, res in allowed.items():
            j = pos if pos > 0 else int(L) + 1 + pos
            chars[j - 1] = res[rng.integers(len(res))]
        pep = "".join(chars)
        if pep in peptides or target_signature(pep) in fixed_sigs:
            continue
        peptides.append(pep)
    if len(peptides) < config.n_peptides:
        raise RuntimeError("could not build the peptide pool")
    weights = 1.0 / np.arange(1, len(peptides) + 1) ** config.popularity_exponent
    return Universe(
        families=families,
        motifs=motifs,
        bias_families=families[: config.n_bias_families],
        peptides=tuple(peptides),
        popularity=weights / weights.sum(),
    )


def _make_cdr3(universe: Universe, family: str, rng: np.random.Generator) -> str:
    middle = _random_residues(rng, int(rng.integers(5, 9)))
    return CDR3_START + universe.motifs[family] + middle + CDR3_END


def _plant(cdr3: str, signature: str, rng: np.random.Generator) -> str:
    insert = "".join(CLASS_MEMBERS[c][rng.integers(len(CLASS_MEMBERS[c]))] for c in signature)
    lo = len(CDR3_START) + 3
    hi = len(cdr3) - len(CDR3_END) - 3
    at = int(rng.integers(lo, hi + 1))
    return cdr3[:at] + insert + cdr3[at + 3 :]


def _alpha(rng: np.random.Generator) -> str:
    return "CA" + _random_residues(rng, int(rng.integers(6, 10))) + "F"


def _decoy(peptide: str, anchor_allowed: dict, rng: np.random.Generator, n_anchors: int = 1) -> str:
    positions = sorted(anchor_allowed)
    chosen = rng.choice(len(positions), size=min(n_anchors, len(positions)), replace=False)
    chars = list(peptide)
    for i in sorted(chosen):
        pos = positions[i]
        j = pos if pos > 0 else len(peptide) + 1 + pos
        choices = [a for a in ALPHABET if a not in anchor_allowed[pos]]
        chars[j - 1] = choices[rng.integers(len(choices))]
    return "".join(chars)


def generate(config: SynthConfig = SynthConfig()) -> tuple[list[PairRecord], Oracle]:
    """Draw a dataset and return it with its ground-truth oracle.

    Binders get a freshly generated TCR carrying a planted complementary
    3-mer; non-binders pair a TCR from the whole repertoire (binders plus a
    background pool) with a uniformly drawn pool peptide, rejecting pairs
    the oracle would call binding.
    """
    universe = build_universe(config)
    oracle = Oracle(config.anchor_allowed, config.use_complementarity)
    rng = np.random.default_rng([config.universe_seed, config.rng_seed, MODES.index(config.mode)])
    n_pos = int(round(config.pos_rate * config.n_pairs))
    n_neg = config.n_pairs - n_pos
    others = [f for f in universe.families if f not in universe.bias_families]
    allowed = dict(config.anchor_allowed)

    def pick_family(binder: bool) -> str:
        if config.mode == "train" and binder:
            pool = universe.bias_families if rng.random() < config.gamma else others
            return pool[rng.integers(len(pool))]
        return universe.families[rng.integers(len(universe.families))]

    tcrs: list[tuple[str, str, str]] = []
    positives: list[tuple[tuple[str, str, str], str]] = []
    seen: set[tuple[str, str]] = set()
    while len(positives) < n_pos:
        pep = universe.peptides[rng.choice(len(universe.peptides), p=universe.popularity)]
        fam = pick_family(True)
        beta = _plant(_make_cdr3(universe, fam, rng), target_signature(pep), rng)
        if (beta, pep) in seen or oracle(beta, pep) != 1:
            continue
        seen.add((beta, pep))
        tcr = (_alpha(rng), beta, fam)
        tcrs.append(tcr)
        positives.append((tcr, pep))
    n_background = max(1, int(round(config.background_tcr_fraction * config.n_pairs)))
    for _ in range(n_background):
        fam = pick_family(False)
        tcrs.append((_alpha(rng), _make_cdr3(universe, fam, rng), fam))

    negatives: list[tuple[tuple[str, str, str], str]] = []
    attempts = 0
    while len(negatives) < n_neg:
        attempts += 1
        if attempts > 100 * n_neg + 1000:
            raise RuntimeError("negative sampling did not converge")
        tcr = tcrs[rng.integers(len(tcrs))]
        pep = universe.peptides[rng.integers(len(universe.peptides))]
        if config.mode == "ood" and rng.random() < config.ood_decoy_rate:
            pep = _decoy(pep, allowed, rng, config.ood_decoy_anchors)
        if oracle(tcr[1], pep) != 0:
            continue
        negatives.append((tcr, pep))

    rows = [(t, p, 1) for t, p in positives] + [(t, p, 0) for t, p in negatives]
    order = rng.permutation(len(rows))
    records = [
        PairRecord(t[0], t[1], t[2], p, DEFAULT_ALLELE, y, rid)
        for rid, (t, p, y) in enumerate(rows[i] for i in order)
    ]
    return records, oracle


def oracle_check_edits(
    records: Sequence[PairRecord],
    oracle: Oracle,
    scheme: AnchorScheme = AnchorScheme(),
    constraints: EditConstraints = EditConstraints(),
    edits_per_record: int = 20,
    rng_seed: int = 0,
) -> dict:
    """Under the ground truth, how often do sampled edits of true binders behave as assumed?

    Reports the fraction of anchor edits that abolish binding and the
    fraction of non-anchor edits that keep it.
    """
    rng = np.random.default_rng(rng_seed)
    flips = kept = n_anchor = n_non = 0
    for rec in sorted(records, key=lambda r: r.record_id):
        if oracle(rec.cdr3_beta, rec.peptide) != 1:
            continue
        for pep in draw(members_or_empty(rec.peptide, "anchor", scheme, constraints), edits_per_record, rng):
            n_anchor += 1
            flips += oracle(rec.cdr3_beta, pep) == 0
        for pep in draw(members_or_empty(rec.peptide, "non_anchor", scheme, constraints), edits_per_record, rng):
            n_non += 1
            kept += oracle(rec.cdr3_beta, pep) == 1
    return {
        "anchor_true_flip": flips / n_anchor if n_anchor else None,
        "non_anchor_preserved": kept / n_non if n_non else None,
        "n_anchor_edits": n_anchor,
        "n_non_anchor_edits": n_non,
    }


def family_label_mutual_information(records: Sequence[PairRecord]) -> float:
    """Plug-in estimate (nats) of I(V family; label)."""
    fams = sorted({r.v_gene_family for r in records})
    index = {f: i for i, f in enumerate(fams)}
    table = np.zeros((len(fams), 2))
    for r in records:
        table[index[r.v_gene_family], r.label] += 1
    joint = table / table.sum()
    pf = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pf @ py)[nz])))
