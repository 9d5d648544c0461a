"""Command-line entry point: ``cip {synth,split,edits,train,eval,report}``.

Every subcommand is a pure function of its flags, input files and seed.
Settings merge as defaults < ``--config`` JSON file < explicit flags, and
the merged snapshot is written to a run manifest ``<output>.manifest.json``
(``manifest.json`` inside the output directory for ``report``).  Wall-clock
data appear only in manifests.

Seeds:
  synth   the generator stream (the peptide/family universe is fixed)
  split   the split permutation
  edits   the sampler (``--sample`` only)
  train   spawned into weight init, batch order and edit sampling streams
  eval    choice of causal pairs and edit sampling
  report  the list of benchmark seeds; each seed drives data, split and training

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from cip import bench, model, synth
from cip.dataset import PROTOCOLS, SplitBundle, load_tsv, make_split, write_tsv
from cip.edit_engine import AnchorScheme, EditConstraints, changed_positions, enumerate_edits, sample_edits
from cip.featurizer import FeatureConfig, Featurizer
from cip.metrics import evaluate, rank_v_families
from cip.seq_core import parse_peptide
from cip.trainer import ABLATIONS, PRESETS, DivergenceDetected, TrainConfig, apply_ablation, train, write_log

log = logging.getLogger("cip")

DEFAULTS: dict[str, dict[str, Any]] = {
    "synth": {"n": 20000, "pos_rate": 0.05, "gamma": 0.8, "mode": "train", "seed": 0},
    "split": {"protocol": "random", "threshold": 0.30, "families": 5, "seed": 0},
    "edits": {"kind": "non-anchor", "k": 2, "bmin": 0.0, "seed": 0, "no_anchor_masking": False},
    "train": {
        "preset": "cip", "ablation": None, "lambda1": 0.4, "lambda2": 0.2, "margin": 0.3, "k": 2, "bmin": 0.0,
        "epochs": 30, "batch_size": 128, "lr": 1e-3, "patience": 10, "hidden_dim": 64, "seed": 0,
        "stop_grad_original": False,
    },
    "eval": {"causal_pairs": 5000, "edits_per_pair": 3, "seed": 0, "part": "test"},
    "report": {
        "seeds": "0,1,2,3,4", "configs": "baseline,editaug,cip,no_sens,no_inv", "n": 20000, "pos_rate": 0.05,
        "gamma": 0.8, "epochs": 30,
    },
}


class UsageError(Exception):
    pass


# -- helpers ------------------------------------------------------------------------


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _merge(sub: str, args: argparse.Namespace) -> dict[str, Any]:
    """defaults < --config file < explicit flags."""
    merged = dict(DEFAULTS[sub])
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(merged))
        if unknown:
            raise UsageError(f"unknown config keys for {sub}: {', '.join(unknown)}")
        merged.update(loaded)
    for key in DEFAULTS[sub]:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _write_manifest(
    path: Path, sub: str, config: dict, seeds: dict, inputs: Sequence, outputs: Sequence, t0: float, **extra
) -> None:
    manifest = {
        "subcommand": sub,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "started_utc": datetime.fromtimestamp(t0, timezone.utc).isoformat(timespec="seconds"),
        "duration_s": round(time.time() - t0, 3),
        **extra,
    }
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_path(out: str | Path) -> Path:
    return Path(str(out) + ".manifest.json")


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"{what} must be a comma-separated list of integers") from exc


# -- subcommands ---------------------------------------------------------------------


def cmd_synth(args, cfg: dict) -> int:
    if not 0 < cfg["pos_rate"] < 0.5:
        raise UsageError("--pos-rate must lie strictly between 0 and 0.5")
    if not 0 <= cfg["gamma"] <= 1:
        raise UsageError("--gamma must lie in [0, 1]")
    if cfg["n"] < 20:
        raise UsageError("--n must be at least 20")
    if cfg["mode"] not in synth.MODES:
        raise UsageError(f"--mode must be one of {synth.MODES}")
    t0 = time.time()
    sc = synth.SynthConfig(n_pairs=cfg["n"], pos_rate=cfg["pos_rate"], gamma=cfg["gamma"], mode=cfg["mode"],
                           rng_seed=cfg["seed"])
    records, _ = synth.generate(sc)
    out = Path(args.out)
    write_tsv(records, out)
    _write_manifest(
        _manifest_path(out), "synth", cfg, {"rng_seed": cfg["seed"], "universe_seed": sc.universe_seed}, [], [out], t0,
        summary={"n_records": len(records), "n_pos": sum(r.label for r in records),
                 "family_label_mi": synth.family_label_mutual_information(records)},
    )
    print(f"wrote {len(records)} records to {out}")
    return 0


def cmd_split(args, cfg: dict) -> int:
    if cfg["protocol"] not in PROTOCOLS:
        raise UsageError(f"--protocol must be one of {PROTOCOLS}")
    if not 0 <= cfg["threshold"] < 1:
        raise UsageError("--threshold must lie in [0, 1)")
    if cfg["families"] < 1:
        raise UsageError("--families must be >= 1")
    t0 = time.time()
    records, skipped = load_tsv(args.data)
    bundle = make_split(records, cfg["protocol"], rng_seed=cfg["seed"], threshold=cfg["threshold"],
                        families=cfg["families"])
    out = Path(args.out)
    bundle.save(out)
    _write_manifest(
        _manifest_path(out), "split", cfg, {"rng_seed": cfg["seed"]}, [args.data], [out], t0,
        summary={"train": len(bundle.train_ids), "val": len(bundle.val_ids), "test": len(bundle.test_ids),
                 "skipped_rows": dict(sorted(skipped.items()))},
    )
    print(f"{bundle.protocol}: train={len(bundle.train_ids)} val={len(bundle.val_ids)} test={len(bundle.test_ids)}")
    return 0


def cmd_edits(args, cfg: dict) -> int:
    if not 1 <= cfg["k"] <= 3:
        raise UsageError("--k must be 1, 2 or 3")
    if args.sample is not None and args.sample < 1:
        raise UsageError("--sample must be >= 1")
    kind = cfg["kind"].replace("-", "_")
    if kind not in ("non_anchor", "anchor"):
        raise UsageError("--kind must be non-anchor or anchor")
    t0 = time.time()
    scheme = AnchorScheme(masking=not cfg["no_anchor_masking"])
    cons = EditConstraints(max_hamming=cfg["k"], blosum_min=cfg["bmin"])
    pi = str(parse_peptide(args.peptide.strip()))
    if args.sample is None:
        members = list(enumerate_edits(pi, kind, scheme, cons).members)
    else:
        members = sample_edits(pi, kind, args.sample, cfg["seed"], scheme, cons)
    lines = ["source\tkind\tmember\thamming\tchanged_positions"]
    for m in members:
        pos = changed_positions(pi, m)
        lines.append(f"{pi}\t{kind}\t{m}\t{len(pos)}\t{','.join(map(str, pos))}")
    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
        return 0
    out = Path(args.out)
    out.write_text(text, encoding="utf-8")
    _write_manifest(_manifest_path(out), "edits", {**cfg, "peptide": pi, "sample": args.sample},
                    {"rng_seed": cfg["seed"]}, [], [out], t0, summary={"n_rows": len(members)})
    print(f"wrote {len(members)} {kind} edits of {pi} to {out}")
    return 0


def _train_config(cfg: dict) -> TrainConfig:
    tc = TrainConfig(
        preset=cfg["preset"], lambda1=cfg["lambda1"], lambda2=cfg["lambda2"], margin=cfg["margin"],
        max_hamming=cfg["k"], blosum_min=cfg["bmin"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"], patience=cfg["patience"], hidden_dim=cfg["hidden_dim"], rng_seed=cfg["seed"],
        stop_grad_original=cfg["stop_grad_original"],
    )
    if cfg["ablation"] is not None:
        tc = apply_ablation(tc, cfg["ablation"])
    return tc


def cmd_train(args, cfg: dict) -> int:
    if cfg["preset"] not in PRESETS:
        raise UsageError(f"--preset must be one of {PRESETS}")
    if cfg["ablation"] is not None and cfg["ablation"] not in ABLATIONS:
        raise UsageError(f"--ablation must be one of {ABLATIONS}")
    if cfg["epochs"] < 1 or cfg["batch_size"] < 1:
        raise UsageError("--epochs and --batch-size must be positive")
    try:
        tc = _train_config(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    t0 = time.time()
    records, _ = load_tsv(args.data)
    split = SplitBundle.load(args.split)
    res = train(split.subset(records, "train"), split.subset(records, "val"), tc)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
    lam1, lam2 = tc.lambdas
    model.save(
        res.params, out, res.feature_fingerprint, tc.rng_seed,
        features=dataclasses.asdict(tc.features), train_config=tc.to_dict(), family_ranks=res.family_ranks,
        best_epoch=res.best_epoch, best_val_auroc=res.best_val_auroc,
        class_weights={"w_plus": res.class_weights.w_plus, "w_minus": res.class_weights.w_minus},
    )
    write_log(res.log, log_path)
    snapshot = {**cfg, "effective": {"lambda1": lam1, "lambda2": lam2, "margin": tc.margin, "k": tc.max_hamming,
                                     "bmin": tc.blosum_min, "anchor_masking": tc.anchor_masking}}
    _write_manifest(
        _manifest_path(out), "train", snapshot, {"rng_seed": tc.rng_seed, "streams": ["init", "shuffle", "edits"]},
        [args.data, args.split], [out, log_path], t0,
        summary={"best_epoch": res.best_epoch, "best_val_auroc": res.best_val_auroc, "epochs_run": len(res.log)},
    )
    print(f"{tc.name}: best epoch {res.best_epoch}, val AUROC {res.best_val_auroc}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    if cfg["causal_pairs"] < 0 or cfg["edits_per_pair"] < 1:
        raise UsageError("--causal-pairs must be >= 0 and --edits-per-pair >= 1")
    if cfg["part"] not in ("train", "val", "test"):
        raise UsageError("--part must be train, val or test")
    t0 = time.time()
    params, meta = model.load(args.model)
    fcfg = FeatureConfig(**meta["features"])
    if fcfg.fingerprint() != meta["feature_fingerprint"]:
        raise model.VersionMismatch("stored feature settings do not match the stored fingerprint")
    records, _ = load_tsv(args.data)
    inputs = [args.model, args.data]
    if args.split is not None:
        split = SplitBundle.load(args.split)
        ranks = rank_v_families(split.subset(records, "train"))
        targets = split.subset(records, cfg["part"])
        protocol = split.protocol
        inputs.append(args.split)
    else:
        ranks = {str(k): int(v) for k, v in meta["family_ranks"].items()}
        targets, protocol = records, "all"
    report = evaluate(params, targets, Featurizer(fcfg), ranks, rng_seed=cfg["seed"],
                      n_causal_pairs=cfg["causal_pairs"], edits_per_pair=cfg["edits_per_pair"], protocol=protocol)
    out = Path(args.out)
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    tsv = out.with_suffix(".tsv")
    tsv.write_text(report.tsv_header() + "\n" + report.tsv_row() + "\n", encoding="utf-8")
    _write_manifest(_manifest_path(out), "eval", cfg, {"rng_seed": cfg["seed"]}, inputs, [out, tsv], t0)
    print(report.tsv_header())
    print(report.tsv_row())
    return 0


def cmd_report(args, cfg: dict) -> int:
    seeds = _parse_int_list(cfg["seeds"], "--seeds")
    names = [s.strip() for s in str(cfg["configs"]).split(",") if s.strip()]
    for name in names:
        if name not in PRESETS + ABLATIONS:
            raise UsageError(f"unknown configuration {name!r}")
    if not seeds or not names:
        raise UsageError("need at least one seed and one configuration")
    if not 0 < cfg["pos_rate"] < 0.5:
        raise UsageError("--pos-rate must lie strictly between 0 and 0.5")
    # deferred so the other subcommands do not pay for matplotlib
    from cip import plotting

    t0 = time.time()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sc = synth.SynthConfig(n_pairs=cfg["n"], pos_rate=cfg["pos_rate"], gamma=cfg["gamma"])
    base = TrainConfig(epochs=cfg["epochs"])
    runs = bench.run_benchmark(seeds, names, sc, base)

    cols = ["config", "seed", "best_epoch", *bench.METRIC_NAMES]
    runs_tsv = out_dir / "runs.tsv"
    with open(runs_tsv, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for run in runs:
            row = run.row()
            fh.write("\t".join(_fmt(row[c]) for c in cols) + "\n")
    summary_tsv = out_dir / "summary.tsv"
    means = bench.means(runs)
    with open(summary_tsv, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["config", *bench.METRIC_NAMES]) + "\n")
        for name, m in means.items():
            fh.write("\t".join([name, *(_fmt(m[k]) for k in bench.METRIC_NAMES)]) + "\n")
    outputs = [runs_tsv, summary_tsv]
    contrasts = {}
    if {"cip", "baseline"} <= set(names):
        contrasts["cip_vs_baseline"] = bench.directional_summary(runs)
    if {"no_sens", "no_inv"} <= set(names):
        contrasts["ablations"] = bench.ablation_summary(runs)
    if contrasts:
        contrasts_json = out_dir / "contrasts.json"
        contrasts_json.write_text(json.dumps(contrasts, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        outputs.append(contrasts_json)
    outputs.append(plotting.metric_panels(runs, out_dir / "metrics.png"))
    outputs.append(plotting.training_curves(runs, out_dir / "curves.png"))
    _write_manifest(out_dir / "manifest.json", "report", cfg, {"seeds": seeds, "ood_seed_offset": bench.OOD_SEED_OFFSET},
                    [], outputs, t0)
    sys.stdout.write(summary_tsv.read_text(encoding="utf-8"))
    return 0


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "NA"
    return f"{v:.6f}" if isinstance(v, float) else str(v)


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cip", description="Counterfactual invariant TCR-peptide pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    subs = parser.add_subparsers(dest="command", required=True)

    def sub(name: str, help_: str) -> argparse.ArgumentParser:
        p = subs.add_parser(name, help=help_)
        p.set_defaults(sub_parser=p)
        p.add_argument("--config", help="JSON file with settings; explicit flags take precedence")
        return p

    p = sub("synth", "generate a synthetic dataset TSV")
    p.add_argument("--n", type=int)
    p.add_argument("--pos-rate", type=float)
    p.add_argument("--gamma", type=float, help="shortcut strength for train mode")
    p.add_argument("--mode", choices=synth.MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub("split", "split a dataset into train/val/test")
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--threshold", type=float, help="distance-aware minimum normalized distance")
    p.add_argument("--families", type=int, help="number of withheld V families (fho)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub("edits", "enumerate or sample counterfactual peptide edits")
    p.add_argument("--peptide", required=True)
    p.add_argument("--kind", choices=("non-anchor", "anchor"))
    p.add_argument("--k", type=int, help="maximum Hamming distance")
    p.add_argument("--bmin", type=float, help="minimum BLOSUM62 score of conservative substitutions")
    p.add_argument("--no-anchor-masking", action="store_const", const=True, default=None)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--enumerate", action="store_true")
    mode.add_argument("--sample", type=int, metavar="N")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="TSV path (default: stdout, no manifest)")

    p = sub("train", "train a scorer")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--bmin", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--stop-grad-original", action="store_const", const=True, default=None,
                   help="treat the original prediction as a constant in the invariance loss")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="model file (.npz)")
    p.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")

    p = sub("eval", "score a model and compute all metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split JSON; without it every record in --data is scored")
    p.add_argument("--part", choices=("train", "val", "test"))
    p.add_argument("--causal-pairs", type=int)
    p.add_argument("--edits-per-pair", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="metrics JSON; a .tsv sibling holds the delimited row")

    p = sub("report", "multi-seed synthetic benchmark with TSV tables and figures")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--configs", help="comma-separated presets and ablations")
    p.add_argument("--n", type=int)
    p.add_argument("--pos-rate", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out-dir", required=True)
    return parser


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "edits": cmd_edits, "train": cmd_train, "eval": cmd_eval,
            "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _merge(args.command, args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        args.sub_parser.print_usage(sys.stderr)
        print(f"cip {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceDetected, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"cip {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
