"""Pair records, negative construction and split protocols."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cip.seq_core import InvalidLength, InvalidResidue, encode, levenshtein_many, parse_cdr3, parse_peptide

log = logging.getLogger(__name__)

COLUMNS = ("cdr3_alpha", "cdr3_beta", "v_gene_family", "peptide", "mhc_allele", "label")
DEFAULT_ALLELE = "HLA-A*02:01"
PROTOCOLS = ("random", "fho", "da")


class DatasetError(ValueError):
    pass


class MissingColumn(DatasetError):
    def __init__(self, name: str):
        super().__init__(f"missing column {name!r}")
        self.name = name


class EmptyAfterFilter(DatasetError):
    pass


class InsufficientDiversity(DatasetError):
    pass


class TooFewRecords(DatasetError):
    pass


class TooFewFamilies(DatasetError):
    pass


class EmptyTestSet(DatasetError):
    pass


@dataclass(frozen=True)
class PairRecord:
    cdr3_alpha: str
    cdr3_beta: str
    v_gene_family: str
    peptide: str
    mhc_allele: str
    label: int
    record_id: int

    @property
    def tcr(self) -> tuple[str, str, str]:
        return (self.cdr3_alpha, self.cdr3_beta, self.v_gene_family)


# -- I/O ------------------------------------------------------------------------


def load_tsv(path: str | Path, allele: str | None = DEFAULT_ALLELE) -> tuple[list[PairRecord], Counter]:
    """Read a pair TSV.

    Record ids are 0-based data-row indices, so they stay stable when rows
    are skipped.  Returns the records and a Counter of skip reasons
    (``invalid_residue``, ``invalid_length``, ``invalid_label``, ``allele``).
    """
    records: list[PairRecord] = []
    skipped: Counter = Counter()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        header = reader.fieldnames or []
        for col in COLUMNS:
            if col not in header:
                raise MissingColumn(col)
        for row_id, row in enumerate(reader):
            try:
                alpha = parse_cdr3(row["cdr3_alpha"].strip())
                beta = parse_cdr3(row["cdr3_beta"].strip())
                pep = parse_peptide(row["peptide"].strip())
            except InvalidResidue:
                skipped["invalid_residue"] += 1
                continue
            except InvalidLength:
                skipped["invalid_length"] += 1
                continue
            label = row["label"].strip()
            if label not in ("0", "1"):
                skipped["invalid_label"] += 1
                continue
            mhc = row["mhc_allele"].strip()
            if allele is not None and mhc != allele:
                skipped["allele"] += 1
                continue
            records.append(PairRecord(str(alpha), str(beta), row["v_gene_family"].strip(), str(pep), mhc, int(label), row_id))
    if skipped:
        log.info("skipped %d rows from %s: %s", sum(skipped.values()), path, dict(skipped))
    if not records:
        raise EmptyAfterFilter(f"no usable records in {path}")
    return records, skipped


def write_tsv(records: Iterable[PairRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("\t".join(COLUMNS) + "\n")
        for r in records:
            fh.write("\t".join([r.cdr3_alpha, r.cdr3_beta, r.v_gene_family, r.peptide, r.mhc_allele, str(r.label)]) + "\n")


# -- deduplication ----------------------------------------------------------------


def _find(parent: list[int], i: int) -> int:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def deduplicate(records: Sequence[PairRecord], identity_threshold: float = 0.90) -> list[PairRecord]:
    """Single-linkage clustering on CDR3b identity within each peptide.

    identity(a, b) = 1 - levenshtein(a, b) / max(len(a), len(b)); one
    representative (lowest record_id) survives per cluster.
    """
    by_peptide: dict[str, list[PairRecord]] = defaultdict(list)
    for r in records:
        by_peptide[r.peptide].append(r)
    keep: list[PairRecord] = []
    for group in by_peptide.values():
        group = sorted(group, key=lambda r: r.record_id)
        seqs = [r.cdr3_beta for r in group]
        arr, lens = encode(seqs)
        parent = list(range(len(group)))
        for i in range(len(group) - 1):
            rest = slice(i + 1, len(group))
            dist = levenshtein_many(seqs[i], arr[rest], lens[rest])
            identity = 1.0 - dist / np.maximum(lens[rest], len(seqs[i]))
            for off in np.flatnonzero(identity >= identity_threshold - 1e-12):
                a, b = _find(parent, i), _find(parent, i + 1 + int(off))
                if a != b:
                    parent[max(a, b)] = min(a, b)
        keep.extend(group[i] for i in range(len(group)) if _find(parent, i) == i)
    return sorted(keep, key=lambda r: r.record_id)


# -- negatives --------------------------------------------------------------------


def generate_negatives(positives: Sequence[PairRecord], target_pos_rate: float, rng_seed: int) -> list[PairRecord]:
    """Random TCR x peptide pairings, labelled 0, until the positive rate reaches the target.

    Pairs are drawn uniformly (with replacement) from the cross product of the
    distinct TCRs and distinct peptide/allele pairs among ``positives``; any
    pair already positive is rejected.  Negatives keep their TCR's V family.
    """
    if not 0 < target_pos_rate < 1:
        raise ValueError("target_pos_rate must be in (0, 1)")
    tcrs = sorted({r.tcr for r in positives})
    peps = sorted({(r.peptide, r.mhc_allele) for r in positives})
    if len(tcrs) < 2 or len(peps) < 2:
        raise InsufficientDiversity("need at least 2 distinct TCRs and 2 distinct peptides")
    taken = {(r.tcr, (r.peptide, r.mhc_allele)) for r in positives}
    if len(taken) >= len(tcrs) * len(peps):
        raise InsufficientDiversity("every TCR-peptide pairing is already positive")

    n_pos = len(positives)
    n_neg = max(0, math.ceil(n_pos * (1 - target_pos_rate) / target_pos_rate - 1e-9))
    while n_pos / (n_pos + n_neg) > target_pos_rate:
        n_neg += 1

    rng = np.random.default_rng(rng_seed)
    next_id = max(r.record_id for r in positives) + 1
    out: list[PairRecord] = []
    while len(out) < n_neg:
        ti, pj = rng.integers(len(tcrs)), rng.integers(len(peps))
        tcr, pep = tcrs[ti], peps[pj]
        if (tcr, pep) in taken:
            continue
        out.append(PairRecord(tcr[0], tcr[1], tcr[2], pep[0], pep[1], 0, next_id + len(out)))
    return out


# -- splits -------------------------------------------------------------------------


@dataclass
class SplitBundle:
    protocol: str
    seed: int
    train_ids: list[int]
    val_ids: list[int]
    test_ids: list[int]
    evidence: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "protocol": self.protocol,
                "seed": self.seed,
                "train_ids": self.train_ids,
                "val_ids": self.val_ids,
                "test_ids": self.test_ids,
                "evidence": self.evidence,
            },
            sort_keys=True,
            indent=1,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitBundle":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["protocol"], d["seed"], d["train_ids"], d["val_ids"], d["test_ids"], d.get("evidence", {}))

    def subset(self, records: Sequence[PairRecord], part: str) -> list[PairRecord]:
        ids = set(getattr(self, f"{part}_ids"))
        return [r for r in records if r.record_id in ids]


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


def _stratified(records: Sequence[PairRecord], fractions: Sequence[float], rng: np.random.Generator) -> tuple[list[list[int]], dict]:
    """Partition record ids per label stratum by rounding each fraction of the stratum."""
    parts: list[list[int]] = [[] for _ in fractions]
    counts = {}
    for label in (0, 1):
        ids = np.array(sorted(r.record_id for r in records if r.label == label), dtype=np.int64)
        ids = ids[rng.permutation(len(ids))]
        sizes = [_round(f * len(ids)) for f in fractions[1:]]
        sizes = [len(ids) - sum(sizes)] + sizes
        start = 0
        for part, size in zip(parts, sizes):
            part.extend(int(i) for i in ids[start : start + size])
            start += size
        counts[str(label)] = sizes
    return [sorted(p) for p in parts], counts


def split_random(records: Sequence[PairRecord], fractions=(0.70, 0.10, 0.20), rng_seed: int = 0) -> SplitBundle:
    labels = Counter(r.label for r in records)
    if len(records) < 3 or labels[0] == 0 or labels[1] == 0:
        raise TooFewRecords("random split needs at least 3 records with both labels present")
    (train, val, test), counts = _stratified(records, fractions, np.random.default_rng(rng_seed))
    return SplitBundle("random", rng_seed, train, val, test, {"fractions": list(fractions), "stratum_sizes": counts})


def pick_withheld_families(records: Sequence[PairRecord], n: int = 5) -> list[str]:
    """The ``n`` families whose record counts are closest to the median count."""
    counts = Counter(r.v_gene_family for r in records)
    if len(counts) < n + 1:
        raise TooFewFamilies(f"need at least {n + 1} V families, found {len(counts)}")
    median = float(np.median(list(counts.values())))
    ranked = sorted(counts, key=lambda f: (abs(counts[f] - median), f))
    return sorted(ranked[:n])


def split_family_held_out(records: Sequence[PairRecord], n_withheld_families: int = 5, rng_seed: int = 0) -> SplitBundle:
    withheld = pick_withheld_families(records, n_withheld_families)
    held = set(withheld)
    test = sorted(r.record_id for r in records if r.v_gene_family in held)
    rest = [r for r in records if r.v_gene_family not in held]
    (train, val), counts = _stratified(rest, (0.875, 0.125), np.random.default_rng(rng_seed))
    family_counts = Counter(r.v_gene_family for r in records)
    evidence = {
        "withheld_families": withheld,
        "family_counts": dict(sorted(family_counts.items())),
        "stratum_sizes": counts,
    }
    return SplitBundle("fho", rng_seed, train, val, test, evidence)


def _min_distance(seq: str, arr: np.ndarray, lens: np.ndarray, idx: list[int]) -> float:
    if not idx:
        return math.inf
    sel = np.asarray(idx)
    d = levenshtein_many(seq, arr[sel], lens[sel])
    return float(np.min(d / np.maximum(lens[sel], len(seq))))


def split_distance_aware(
    records: Sequence[PairRecord],
    threshold: float = 0.30,
    rng_seed: int = 0,
    test_fraction: float = 0.18,
    val_fraction: float = 0.125,
) -> SplitBundle:
    """Greedy split whose test CDR3b are all > ``threshold`` away from every train CDR3b.

    Distinct CDR3b strings are visited in a seeded order; the first seeds
    the train pool.  While the test share is below ``test_fraction`` a
    string joins test if it clears the threshold against the current pool; otherwise it joins the train
    pool if it clears the threshold against test; otherwise its records are
    dropped.  The train pool is then split into train/val (stratified).
    """
    if not records:
        raise TooFewRecords("no records")
    groups: dict[str, list[int]] = defaultdict(list)
    for r in records:
        groups[r.cdr3_beta].append(r.record_id)
    seqs = sorted(groups)
    arr, lens = encode(seqs)
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(seqs))
    target = _round(test_fraction * len(records))

    pool: list[int] = []
    test: list[int] = []
    dropped: list[int] = []
    n_test = 0
    for i in map(int, order):
        s = seqs[i]
        # test candidates need a train pool to be measured against
        if pool and n_test < target and _min_distance(s, arr, lens, pool) > threshold:
            test.append(i)
            n_test += len(groups[s])
        elif _min_distance(s, arr, lens, test) > threshold:
            pool.append(i)
        else:
            dropped.append(i)
    if not test:
        raise EmptyTestSet(f"no CDR3b clears distance {threshold} against the train pool")

    pool_ids = {rid for i in pool for rid in groups[seqs[i]]}
    pool_records = [r for r in records if r.record_id in pool_ids]
    if pool_records and len({r.label for r in pool_records}) == 2:
        (train, val), counts = _stratified(pool_records, (1 - val_fraction, val_fraction), np.random.default_rng(rng_seed + 1))
    else:
        train, val, counts = sorted(pool_ids), [], {}

    seq_index = {s: i for i, s in enumerate(seqs)}
    train_set = set(train)
    train_seq_idx = sorted({seq_index[r.cdr3_beta] for r in records if r.record_id in train_set})
    test_dist = {seqs[i]: _min_distance(seqs[i], arr, lens, train_seq_idx) for i in test}
    by_id = {r.record_id: r for r in records}
    test_ids = sorted(rid for i in test for rid in groups[seqs[i]])
    evidence = {
        "threshold": threshold,
        "test_min_distance": [test_dist[by_id[rid].cdr3_beta] for rid in test_ids],
        "dropped_ids": sorted(rid for i in dropped for rid in groups[seqs[i]]),
        "stratum_sizes": counts,
    }
    return SplitBundle("da", rng_seed, train, val, test_ids, evidence)


def make_split(records: Sequence[PairRecord], protocol: str, rng_seed: int = 0, threshold: float = 0.30, families: int = 5) -> SplitBundle:
    if protocol == "random":
        return split_random(records, rng_seed=rng_seed)
    if protocol == "fho":
        return split_family_held_out(records, families, rng_seed=rng_seed)
    if protocol == "da":
        return split_distance_aware(records, threshold, rng_seed=rng_seed)
    raise ValueError(f"unknown protocol {protocol!r}")
