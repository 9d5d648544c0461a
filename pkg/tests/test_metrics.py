import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cip.dataset import PairRecord
from cip.featurizer import FeatureConfig, Featurizer
from cip.metrics import (
    REPORT_SCHEMA,
    DegenerateVariable,
    EditSample,
    MetricsReport,
    NoEditSamples,
    NoPositives,
    SingleClass,
    afr,
    auprc,
    auroc,
    calibration,
    cfc,
    evaluate,
    family_rank,
    rank_v_families,
    shortcut_index,
    spearman,
)
from cip.model import init
from oracles import pairwise_auroc, spearman_oracle, sweep_auprc

FIX_P = [0.9, 0.8, 0.8, 0.4, 0.3, 0.1]
FIX_Y = [1, 0, 1, 1, 0, 0]

scored = st.lists(st.tuples(st.sampled_from([i / 10 for i in range(11)]), st.integers(0, 1)), min_size=2, max_size=60)


def _both(rows):
    return len({y for _, y in rows}) == 2


class TestAuroc:
    def test_examples(self):
        assert auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
        assert auroc([0.5] * 4, [1, 0, 1, 0]) == 0.5
        assert auroc(FIX_P, FIX_Y) == pairwise_auroc(FIX_P, FIX_Y)

    def test_single_class(self):
        with pytest.raises(SingleClass):
            auroc([0.2, 0.3], [1, 1])

    @given(scored)
    def test_matches_pairwise_oracle(self, rows):
        if not _both(rows):
            return
        p, y = zip(*rows)
        assert auroc(p, y) == pytest.approx(pairwise_auroc(p, y), abs=1e-12)

    @given(scored)
    def test_monotone_invariance(self, rows):
        if not _both(rows):
            return
        p, y = zip(*rows)
        assert auroc(np.array(p) ** 3, y) == pytest.approx(auroc(p, y), abs=1e-12)


class TestAuprc:
    def test_examples(self):
        assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
        assert auprc(FIX_P, FIX_Y) == pytest.approx(sweep_auprc(FIX_P, FIX_Y), abs=1e-12)

    def test_no_positives(self):
        with pytest.raises(NoPositives):
            auprc([0.2, 0.3], [0, 0])

    def test_random_scores_near_base_rate(self):
        rng = np.random.default_rng(0)
        y = (rng.random(20000) < 0.1).astype(int)
        assert auprc(rng.random(20000), y) == pytest.approx(0.1, abs=0.01)

    @given(scored)
    def test_matches_sweep_oracle(self, rows):
        p, y = zip(*rows)
        if sum(y) == 0:
            return
        assert auprc(p, y) == pytest.approx(sweep_auprc(p, y), abs=1e-12)


class TestCalibration:
    def test_perfect(self):
        ece, brier, nll = calibration([1.0, 0.0, 1.0], [1, 0, 1])
        assert ece == 0.0 and brier == 0.0 and nll < 1e-6

    def test_half(self):
        ece, brier, nll = calibration([0.5] * 4, [1, 0, 1, 0])
        assert ece == 0.0 and brier == 0.25 and nll == pytest.approx(math.log(2))

    def test_hand_binned_fixture(self):
        p = [0.05, 0.15, 0.15, 0.35, 0.45, 0.55, 0.65, 0.85, 0.95, 0.95]
        y = [0, 0, 1, 0, 1, 1, 0, 1, 1, 1]
        # per-bin weight x gap: .1*.05 + .2*.35 + .1*.35 + .1*.55 + .1*.45 + .1*.65 + .1*.15 + .2*.05
        ece, brier, _ = calibration(p, y)
        assert ece == pytest.approx(0.30, abs=1e-12)
        assert brier == pytest.approx(np.mean((np.array(p) - y) ** 2))

    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
    def test_ranges(self, rows):
        p, y = zip(*rows)
        ece, brier, nll = calibration(p, y)
        assert 0 <= ece <= 1 and 0 <= brier <= 1 and math.isfinite(nll) and nll >= 0


def _rec(fam, label=1, rid=0):
    return PairRecord("CAVR", "CASSF", fam, "GILGFVFTL", "HLA-A*02:01", label, rid)


class TestShortcutIndex:
    def test_family_ranks(self):
        recs = [_rec("A")] * 5 + [_rec("B")] * 3 + [_rec("C")] * 3
        ranks = rank_v_families(recs)
        assert ranks == {"A": 1, "B": 2, "C": 3}
        assert family_rank(ranks, "Z") == 4

    def test_single_family_degenerate(self):
        ranks = rank_v_families([_rec("A")] * 4)
        assert set(ranks.values()) == {1}
        with pytest.raises(DegenerateVariable):
            shortcut_index([0.1, 0.2, 0.3], [1, 1, 1])

    def test_monotone(self):
        assert shortcut_index([0.1, 0.2, 0.3, 0.9], [1, 2, 3, 4]) == pytest.approx(1.0)
        assert shortcut_index([0.9, 0.2, 0.1], [1, 2, 3]) == pytest.approx(1.0)

    def test_null(self):
        rng = np.random.default_rng(0)
        assert shortcut_index(rng.random(10000), rng.integers(1, 13, 10000)) < 0.05

    def test_tied_fixture(self):
        x = [0.1, 0.4, 0.4, 0.2, 0.9, 0.9, 0.9, 0.3]
        v = [1, 1, 2, 2, 3, 3, 1, 4]
        assert spearman(x, v) == pytest.approx(spearman_oracle(x, v), abs=1e-12)

    @settings(max_examples=60)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(1, 4)), min_size=3, max_size=30))
    def test_matches_oracle_and_symmetric(self, rows):
        x, v = zip(*rows)
        if len(set(x)) < 2 or len(set(v)) < 2:
            return
        got = spearman(x, v)
        assert got == pytest.approx(spearman_oracle(x, v), abs=1e-12)
        perm = np.random.default_rng(len(rows)).permutation(len(rows))
        assert spearman(np.array(x)[perm], np.array(v)[perm]) == pytest.approx(got, abs=1e-12)
        assert spearman(x, x) == pytest.approx(1.0)
        assert spearman(x, [-a for a in x]) == pytest.approx(-1.0)


class TestCausalDiagnostics:
    def test_cfc_examples(self):
        assert cfc([EditSample(0.7, [0.7, 0.7])]) == 1.0
        assert cfc([EditSample(0.8, [0.3])]) == pytest.approx(0.5)

    def test_cfc_flat_mean(self):
        rng = np.random.default_rng(4)
        samples = [EditSample(float(rng.random()), list(rng.random(3))) for _ in range(4)]
        terms = [abs(s.p - q) for s in samples for q in s.p_non_anchor]
        assert len(terms) == 12
        assert cfc(samples) == pytest.approx(1 - sum(terms) / 12, abs=1e-15)

    def test_afr_examples(self):
        assert afr([EditSample(0.6, p_anchor=[0.4])]) == 1.0
        assert afr([EditSample(0.4, p_anchor=[0.1, 0.0])]) == 0.0
        assert afr([EditSample(0.5, p_anchor=[0.5])]) == 0.0
        assert afr([EditSample(0.5, p_anchor=[0.49, 0.7])]) == 0.5

    def test_empty(self):
        with pytest.raises(NoEditSamples):
            cfc([EditSample(0.5)])
        with pytest.raises(NoEditSamples):
            afr([])


@pytest.fixture(scope="module")
def eval_setup(small_records):
    cfg = FeatureConfig(hash_dim=64)
    params = init(0, cfg.input_dim, 8)
    return params, Featurizer(cfg), rank_v_families(small_records[:1500])


class TestEvaluate:
    def test_ranges_and_cap(self, small_records, eval_setup):
        params, f, ranks = eval_setup
        rep = evaluate(params, small_records[1500:], f, ranks, rng_seed=0)
        assert rep.n_causal_pairs == rep.n_pos < 5000
        for name in ("auroc", "auprc", "si", "cfc", "afr"):
            assert 0 <= getattr(rep, name) <= 1
        assert rep.ece >= 0 and rep.brier >= 0 and rep.nll >= 0

    def test_cap_applies(self, small_records, eval_setup):
        params, f, ranks = eval_setup
        rep = evaluate(params, small_records, f, ranks, n_causal_pairs=10)
        assert rep.n_causal_pairs == 10

    def test_deterministic(self, small_records, eval_setup):
        params, f, ranks = eval_setup
        a = evaluate(params, small_records[1500:], f, ranks, rng_seed=3)
        b = evaluate(params, small_records[1500:], f, ranks, rng_seed=3)
        assert a.to_json() == b.to_json()

    def test_single_class_flagged_not_raised(self, small_records, eval_setup):
        params, f, ranks = eval_setup
        negatives = [r for r in small_records if r.label == 0][:50]
        rep = evaluate(params, negatives, f, ranks)
        assert rep.auroc is None and "auroc" in rep.flags and "cfc" in rep.flags

    def test_schema(self, small_records, eval_setup):
        jsonschema = pytest.importorskip("jsonschema")
        params, f, ranks = eval_setup
        rep = evaluate(params, small_records[1500:], f, ranks)
        jsonschema.validate(rep.to_dict(), REPORT_SCHEMA)
        assert rep.tsv_header().count("\t") == rep.tsv_row().count("\t")
        assert set(MetricsReport.FIELDS) <= set(REPORT_SCHEMA["required"]) == set(rep.to_dict())
