"""Multi-seed comparison of training configurations on the synthetic benchmark.

For every seed ``s`` a train-mode dataset (``rng_seed = s``) is split at
random into train/val/test, each configuration is trained on train/val,
and every model is scored on a freshly generated ood-mode dataset
(``rng_seed = OOD_SEED_OFFSET + s``) in which V family carries no label
information.  All configurations of one seed see identical data.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from cip.dataset import split_random
from cip.featurizer import Featurizer
from cip.metrics import MetricsReport, evaluate
from cip.synth import SynthConfig, generate
from cip.trainer import ABLATIONS, PRESETS, TrainConfig, apply_ablation, train

log = logging.getLogger(__name__)

OOD_SEED_OFFSET = 1000
METRIC_NAMES = ("auroc", "auprc", "ece", "brier", "nll", "si", "cfc", "afr")


def config_for(name: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    """A preset name or an ablation name turned into a config."""
    if name in PRESETS:
        return base.replace(preset=name, ablation=None)
    if name in ABLATIONS:
        return apply_ablation(base.replace(preset="cip", ablation=None), name)
    raise ValueError(f"unknown configuration {name!r}; choose from {PRESETS + ABLATIONS}")


@dataclass
class BenchRun:
    name: str
    seed: int
    report: MetricsReport
    best_epoch: int
    train_log: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    def row(self) -> dict:
        d = self.report.to_dict()
        return {"config": self.name, "seed": self.seed, "best_epoch": self.best_epoch,
                **{k: d[k] for k in METRIC_NAMES}}


def run_seed(
    seed: int,
    names: Sequence[str],
    synth: SynthConfig = SynthConfig(),
    base: TrainConfig = TrainConfig(),
    on_run: Callable[[BenchRun], None] | None = None,
) -> list[BenchRun]:
    records, _ = generate(dataclasses.replace(synth, mode="train", rng_seed=seed))
    ood, _ = generate(dataclasses.replace(synth, mode="ood", rng_seed=OOD_SEED_OFFSET + seed))
    split = split_random(records, rng_seed=seed)
    tr, va = split.subset(records, "train"), split.subset(records, "val")
    runs = []
    for name in names:
        cfg = config_for(name, base).replace(rng_seed=seed)
        t0 = time.perf_counter()
        res = train(tr, va, cfg)
        # diagnostics always use the default anchor scheme and edit constraints
        rep = evaluate(res.params, ood, Featurizer(cfg.features), res.family_ranks, rng_seed=seed, protocol="ood")
        run = BenchRun(name, seed, rep, res.best_epoch, res.log, time.perf_counter() - t0)
        log.info("seed %d %s: si=%.3f cfc=%.3f afr=%.3f auroc=%.3f", seed, name, rep.si or np.nan,
                 rep.cfc or np.nan, rep.afr or np.nan, rep.auroc or np.nan)
        if on_run is not None:
            on_run(run)
        runs.append(run)
    return runs


def run_benchmark(
    seeds: Iterable[int],
    names: Sequence[str],
    synth: SynthConfig = SynthConfig(),
    base: TrainConfig = TrainConfig(),
    on_run: Callable[[BenchRun], None] | None = None,
) -> list[BenchRun]:
    out: list[BenchRun] = []
    for seed in seeds:
        out.extend(run_seed(seed, names, synth, base, on_run))
    return out


def _metric(runs: Sequence[BenchRun], name: str, metric: str) -> list[float]:
    vals = [getattr(r.report, metric) for r in runs if r.name == name]
    return [np.nan if v is None else float(v) for v in vals]


def means(runs: Sequence[BenchRun]) -> dict[str, dict[str, float]]:
    """Per-configuration mean of every metric over seeds."""
    names = list(dict.fromkeys(r.name for r in runs))
    return {n: {m: float(np.mean(_metric(runs, n, m))) for m in METRIC_NAMES} for n in names}


def directional_summary(runs: Sequence[BenchRun], treated: str = "cip", control: str = "baseline") -> dict:
    """Seed-mean contrasts between two configurations on the ood set.

    ``si_reduction`` is relative (1 - SI_treated / SI_control); the CFC and
    AFR entries are absolute differences; ``auroc_wins`` counts seeds in
    which the treated model's AUROC is at least the control's.
    """
    m = means(runs)
    a = {r.seed: r.report.auroc for r in runs if r.name == treated}
    b = {r.seed: r.report.auroc for r in runs if r.name == control}
    shared = sorted(set(a) & set(b))
    return {
        "si_reduction": 1.0 - m[treated]["si"] / m[control]["si"],
        "cfc_gain": m[treated]["cfc"] - m[control]["cfc"],
        "afr_gain": m[treated]["afr"] - m[control]["afr"],
        "auroc_wins": sum(a[s] >= b[s] for s in shared),
        "n_seeds": len(shared),
    }


def ablation_summary(runs: Sequence[BenchRun]) -> dict:
    """Seed-mean AFR and CFC of the two loss ablations."""
    m = means(runs)
    return {
        "afr_no_sens": m["no_sens"]["afr"],
        "afr_no_inv": m["no_inv"]["afr"],
        "cfc_no_sens": m["no_sens"]["cfc"],
        "cfc_no_inv": m["no_inv"]["cfc"],
    }
