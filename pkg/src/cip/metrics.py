"""Discrimination, calibration and causal-diagnostic metrics."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from cip.dataset import PairRecord, SplitBundle
from cip.edit_engine import AnchorScheme, EditConstraints, draw, members_or_empty
from cip.featurizer import Featurizer
from cip.model import ModelParams, predict

ECE_BINS = 10
NLL_CLAMP = 1e-7


class MetricError(ValueError):
    pass


class SingleClass(MetricError):
    pass


class NoPositives(MetricError):
    pass


class DegenerateVariable(MetricError):
    pass


class NoEditSamples(MetricError):
    pass


def _as_arrays(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=float)
    y = np.asarray(labels, dtype=int)
    if p.shape != y.shape:
        raise ValueError("preds and labels differ in shape")
    return p, y


def auroc(preds, labels) -> float:
    """Mann-Whitney estimate with ties counted one half."""
    p, y = _as_arrays(preds, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both labels")
    ranks = rankdata(p, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(preds, labels) -> float:
    """Average precision: sum over distinct thresholds of (recall step) x precision."""
    p, y = _as_arrays(preds, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("AUPRC needs at least one positive")
    order = np.argsort(-p, kind="mergesort")
    p_sorted, y_sorted = p[order], y[order]
    tp = np.cumsum(y_sorted)
    # last index of every run of tied scores
    last = np.r_[np.flatnonzero(np.diff(p_sorted) != 0), len(p_sorted) - 1]
    tp = tp[last]
    precision = tp / (last + 1)
    recall = tp / n_pos
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * precision))


def calibration(preds, labels, n_bins: int = ECE_BINS) -> tuple[float, float, float]:
    """(ECE, Brier score, NLL).

    ECE uses ``n_bins`` equal-width bins over [0, 1] (1.0 falls in the last
    bin) and weights each bin's |mean label - mean prediction| by its size.
    """
    p, y = _as_arrays(preds, labels)
    bins = np.minimum((p * n_bins).astype(int), n_bins - 1)
    ece = 0.0
    for b in range(n_bins):
        mask = bins == b
        if mask.any():
            ece += mask.sum() / len(p) * abs(y[mask].mean() - p[mask].mean())
    brier = float(np.mean((p - y) ** 2))
    pc = np.clip(p, NLL_CLAMP, 1 - NLL_CLAMP)
    nll = float(-np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc)))
    return float(ece), brier, nll


# -- shortcut index -------------------------------------------------------------------


def rank_v_families(train_records: Sequence[PairRecord]) -> dict[str, int]:
    """Rank 1 = most frequent V family among train positives; ties lexicographic.

    Families present in train without positives are ranked after those
    with positives.  See :func:`family_rank` for unseen families.
    """
    counts = Counter(r.v_gene_family for r in train_records if r.label == 1)
    families = {r.v_gene_family for r in train_records}
    ordered = sorted(families, key=lambda f: (-counts.get(f, 0), f))
    return {f: i for i, f in enumerate(ordered, start=1)}


def family_rank(ranks: Mapping[str, int], family: str) -> int:
    return ranks.get(family, max(ranks.values(), default=0) + 1)


def spearman(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ValueError("length mismatch")
    if len(x) < 3:
        raise ValueError("Spearman correlation needs at least 3 observations")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        raise DegenerateVariable("a variable is constant; rank correlation undefined")
    return float(rx @ ry) / denom


def shortcut_index(preds, v_ranks) -> float:
    return abs(spearman(preds, v_ranks))


# -- counterfactual diagnostics -----------------------------------------------------------


@dataclass
class EditSample:
    """Predictions for one positive pair and its sampled counterfactuals."""

    p: float
    p_non_anchor: list[float] = field(default_factory=list)
    p_anchor: list[float] = field(default_factory=list)


def cfc(samples: Sequence[EditSample]) -> float:
    """1 - mean |p - p(non-anchor edit)|, flat over all (pair, edit) terms."""
    terms = [abs(s.p - q) for s in samples for q in s.p_non_anchor]
    if not terms:
        raise NoEditSamples("no non-anchor edit samples")
    return 1.0 - math.fsum(terms) / len(terms)


def afr(samples: Sequence[EditSample]) -> float:
    """Fraction of (pair, anchor edit) events with p >= 0.5 > p(edit)."""
    events = [s.p >= 0.5 > q for s in samples for q in s.p_anchor]
    if not events:
        raise NoEditSamples("no anchor edit samples")
    return sum(events) / len(events)


# -- evaluation harness ---------------------------------------------------------------------


@dataclass
class MetricsReport:
    auroc: float | None
    auprc: float | None
    ece: float
    brier: float
    nll: float
    si: float | None
    cfc: float | None
    afr: float | None
    n_test: int
    n_pos: int
    n_causal_pairs: int
    edits_per_pair: int
    skipped_non_anchor: int
    skipped_anchor: int
    protocol: str
    seed: int
    ece_bins: int = ECE_BINS
    flags: dict[str, str] = field(default_factory=dict)

    FIELDS = (
        "protocol", "seed", "n_test", "n_pos", "auroc", "auprc", "ece", "brier", "nll",
        "si", "cfc", "afr", "n_causal_pairs",
    )

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def tsv_header(self) -> str:
        return "\t".join(self.FIELDS)

    def tsv_row(self) -> str:
        d = self.to_dict()
        return "\t".join("NA" if d[k] is None else (f"{d[k]:.6f}" if isinstance(d[k], float) else str(d[k])) for k in self.FIELDS)


_UNIT = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
_COUNT = {"type": "integer", "minimum": 0}

# JSON Schema of MetricsReport.to_json(); metric values are null when undefined
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": [
        "auroc", "auprc", "ece", "brier", "nll", "si", "cfc", "afr", "n_test", "n_pos", "n_causal_pairs",
        "edits_per_pair", "skipped_non_anchor", "skipped_anchor", "protocol", "seed", "ece_bins", "flags",
    ],
    "additionalProperties": False,
    "properties": {
        "auroc": _UNIT,
        "auprc": _UNIT,
        "ece": {"type": "number", "minimum": 0, "maximum": 1},
        "brier": {"type": "number", "minimum": 0, "maximum": 1},
        "nll": {"type": "number", "minimum": 0},
        "si": _UNIT,
        "cfc": _UNIT,
        "afr": _UNIT,
        "n_test": _COUNT,
        "n_pos": _COUNT,
        "n_causal_pairs": _COUNT,
        "edits_per_pair": {"type": "integer", "minimum": 1},
        "skipped_non_anchor": _COUNT,
        "skipped_anchor": _COUNT,
        "protocol": {"type": "string"},
        "seed": {"type": "integer"},
        "ece_bins": {"type": "integer", "minimum": 1},
        "flags": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}


def _guard(flags: dict, name: str, fn, *args):
    try:
        return fn(*args)
    except MetricError as exc:
        flags[name] = f"{type(exc).__name__}: {exc}"
        return None


def collect_edit_samples(
    params: ModelParams,
    featurizer: Featurizer,
    positives: Sequence[PairRecord],
    p_orig: np.ndarray,
    scheme: AnchorScheme,
    constraints: EditConstraints,
    rng: np.random.Generator,
    edits_per_pair: int = 3,
) -> tuple[list[EditSample], int, int]:
    """Score ``edits_per_pair`` sampled edits of each kind for every positive."""
    cdr3s: list[str] = []
    peps: list[str] = []
    owners: list[tuple[int, str]] = []
    skipped = {"non_anchor": 0, "anchor": 0}
    for i, rec in enumerate(positives):
        for kind in ("non_anchor", "anchor"):
            drawn = draw(members_or_empty(rec.peptide, kind, scheme, constraints), edits_per_pair, rng)
            if not drawn:
                skipped[kind] += 1
            for pep in drawn:
                cdr3s.append(rec.cdr3_beta)
                peps.append(pep)
                owners.append((i, kind))
    samples = [EditSample(float(p)) for p in p_orig]
    if cdr3s:
        q = predict(params, featurizer.pairs(cdr3s, peps))
        for (i, kind), val in zip(owners, q):
            target = samples[i].p_non_anchor if kind == "non_anchor" else samples[i].p_anchor
            target.append(float(val))
    return samples, skipped["non_anchor"], skipped["anchor"]


def evaluate(
    params: ModelParams,
    records: Sequence[PairRecord],
    featurizer: Featurizer,
    family_ranks: Mapping[str, int],
    scheme: AnchorScheme = AnchorScheme(),
    constraints: EditConstraints = EditConstraints(),
    rng_seed: int = 0,
    n_causal_pairs: int = 5000,
    edits_per_pair: int = 3,
    protocol: str = "",
) -> MetricsReport:
    """Score ``records`` and assemble a :class:`MetricsReport`.

    Causal metrics use min(n_causal_pairs, #positives) positives chosen at
    random, each with ``edits_per_pair`` sampled edits of both kinds.
    Metric failures are recorded in ``flags`` and the value left empty.
    """
    records = sorted(records, key=lambda r: r.record_id)
    if not records:
        raise ValueError("no records to evaluate")
    X = featurizer.pairs([r.cdr3_beta for r in records], [r.peptide for r in records])
    p = predict(params, X)
    y = np.array([r.label for r in records])
    flags: dict[str, str] = {}

    auc = _guard(flags, "auroc", auroc, p, y)
    ap = _guard(flags, "auprc", auprc, p, y)
    ece, brier, nll = calibration(p, y)
    v = [family_rank(family_ranks, r.v_gene_family) for r in records]
    si = _guard(flags, "si", shortcut_index, p, v) if len(records) >= 3 else None
    if si is None and "si" not in flags:
        flags["si"] = "fewer than 3 records"

    rng = np.random.default_rng(rng_seed)
    pos_idx = np.flatnonzero(y == 1)
    n_pairs = min(n_causal_pairs, len(pos_idx))
    chosen = np.sort(rng.choice(pos_idx, size=n_pairs, replace=False)) if n_pairs else pos_idx[:0]
    samples, skip_non, skip_anc = collect_edit_samples(
        params, featurizer, [records[i] for i in chosen], p[chosen], scheme, constraints, rng, edits_per_pair
    )
    return MetricsReport(
        auroc=auc,
        auprc=ap,
        ece=ece,
        brier=brier,
        nll=nll,
        si=si,
        cfc=_guard(flags, "cfc", cfc, samples),
        afr=_guard(flags, "afr", afr, samples),
        n_test=len(records),
        n_pos=int(y.sum()),
        n_causal_pairs=n_pairs,
        edits_per_pair=edits_per_pair,
        skipped_non_anchor=skip_non,
        skipped_anchor=skip_anc,
        protocol=protocol,
        seed=rng_seed,
        flags=flags,
    )


def evaluate_split(params, split: SplitBundle, records: Sequence[PairRecord], featurizer: Featurizer, **kwargs) -> MetricsReport:
    ranks = rank_v_families(split.subset(records, "train"))
    return evaluate(params, split.subset(records, "test"), featurizer, ranks, protocol=split.protocol, **kwargs)
