import dataclasses

import pytest

from cip.synth import (
    Oracle,
    SynthConfig,
    build_universe,
    family_label_mutual_information,
    generate,
    oracle_check_edits,
)


@pytest.mark.parametrize("kw", [{"pos_rate": 0.5}, {"pos_rate": 0.0}, {"n_families": 5}, {"gamma": 1.5}, {"mode": "x"}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


@pytest.mark.parametrize("rate", [0.05, 0.1, 0.3])
def test_positive_rate(rate):
    records, _ = generate(SynthConfig(n_pairs=3000, pos_rate=rate, rng_seed=1))
    assert len(records) == 3000
    assert abs(sum(r.label for r in records) / 3000 - rate) <= 0.005


def test_oracle_consistent_with_labels(small_synth):
    records, oracle = small_synth
    assert all(oracle(r.cdr3_beta, r.peptide) == r.label for r in records)


def test_oracle_anchor_mutation_kills_binding(small_synth):
    records, oracle = small_synth
    pos = next(r for r in records if r.label == 1)
    mutated = pos.peptide[0] + "G" + pos.peptide[2:]
    assert oracle(pos.cdr3_beta, mutated) == 0


def test_full_bias():
    cfg = SynthConfig(n_pairs=2000, gamma=1.0, rng_seed=2)
    bias = set(build_universe(cfg).bias_families)
    records, _ = generate(cfg)
    assert all(r.v_gene_family in bias for r in records if r.label == 1)


def test_deterministic():
    cfg = SynthConfig(n_pairs=500, rng_seed=9)
    assert generate(cfg)[0] == generate(cfg)[0]
    assert generate(cfg)[0] != generate(dataclasses.replace(cfg, rng_seed=10))[0]


def test_ids_unique(small_records):
    assert sorted(r.record_id for r in small_records) == list(range(len(small_records)))


@pytest.mark.slow
def test_family_label_mutual_information():
    train, _ = generate(SynthConfig(n_pairs=10000, gamma=0.8, rng_seed=4))
    ood, _ = generate(SynthConfig(n_pairs=10000, gamma=0.8, mode="ood", rng_seed=4))
    assert family_label_mutual_information(train) > 0.01
    assert family_label_mutual_information(ood) < 0.01


def test_anchor_edits_always_flip(small_records, small_synth):
    rep = oracle_check_edits(small_records[:400], small_synth[1], edits_per_record=5)
    assert rep["anchor_true_flip"] == 1.0
    assert 0 <= rep["non_anchor_preserved"] <= 1


def test_non_anchor_preserved_without_complementarity(small_records, small_synth):
    # an anchor-only rule ignores every position a non-anchor edit can touch
    oracle = Oracle(small_synth[1].anchor_allowed, use_complementarity=False)
    rep = oracle_check_edits(small_records[:400], oracle, edits_per_record=5)
    assert rep["non_anchor_preserved"] == 1.0
    assert rep["anchor_true_flip"] == 1.0
