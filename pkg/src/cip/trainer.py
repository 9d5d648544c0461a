"""Counterfactual invariant training of the MLP scorer.

Objective per mini-batch::

    L = L_bce + lambda1 * L_inv + lambda2 * L_sens

L_inv is the mean squared prediction change under sampled non-anchor
edits of each positive, L_sens the mean hinge max(0, m - (p - p_anchor))
under sampled anchor edits.  Both are averaged over the positives of the
batch; a positive with an empty edit set contributes zero.

Random streams (all derived from ``rng_seed`` through SeedSequence.spawn):
0 = weight init, 1 = batch shuffling, 2 = edit sampling.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from cip.dataset import PairRecord
from cip.edit_engine import NO_BLOSUM, AnchorScheme, EditConstraints, draw, members_or_empty
from cip.featurizer import FeatureConfig, Featurizer
from cip.metrics import SingleClass, auroc, rank_v_families
from cip.model import ModelParams, backward, forward, init, predict

log = logging.getLogger(__name__)

PRESETS = ("baseline", "editaug", "cip")
ABLATIONS = ("no_sens", "no_inv", "no_anchor_masking", "no_blosum_constraint")

LAMBDA1_GRID = (0.1, 0.2, 0.4, 0.8)
LAMBDA2_GRID = (0.05, 0.1, 0.2, 0.4)
K_GRID = (1, 2, 3)


class DivergenceDetected(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "cip"
    lambda1: float = 0.4
    lambda2: float = 0.2
    margin: float = 0.3
    edits_per_positive: int = 1
    max_hamming: int = 2
    blosum_min: float | None = 0  # None disables the conservative constraint
    anchor_masking: bool = True
    ablation: str | None = None
    stop_grad_original: bool = False
    batch_size: int = 128
    epochs: int = 30
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    hidden_dim: int = 64
    kmer_size: int = 3
    hash_dim: int = 256
    position_onehot: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if not 0 < self.margin < 1:
            raise ValueError("margin must lie in (0, 1)")
        if self.edits_per_positive < 1:
            raise ValueError("edits_per_positive must be >= 1")

    @property
    def name(self) -> str:
        return self.ablation or self.preset

    @property
    def lambdas(self) -> tuple[float, float]:
        """Weights actually applied; only the CIP preset uses the auxiliary losses."""
        if self.preset != "cip":
            return 0.0, 0.0
        return self.lambda1, self.lambda2

    @property
    def scheme(self) -> AnchorScheme:
        return AnchorScheme(masking=self.anchor_masking)

    @property
    def constraints(self) -> EditConstraints:
        bmin = NO_BLOSUM if self.blosum_min is None else self.blosum_min
        return EditConstraints(max_hamming=self.max_hamming, blosum_min=bmin)

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig(self.kmer_size, self.hash_dim, self.position_onehot)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def apply_ablation(config: TrainConfig, ablation: str) -> TrainConfig:
    changes = {
        "no_sens": {"lambda2": 0.0},
        "no_inv": {"lambda1": 0.0},
        "no_anchor_masking": {"anchor_masking": False},
        "no_blosum_constraint": {"blosum_min": None},
    }
    if ablation not in changes:
        raise ValueError(f"unknown ablation {ablation!r}")
    return config.replace(preset="cip", ablation=ablation, **changes[ablation])


def ablation_matrix(base: TrainConfig) -> list[TrainConfig]:
    """Full model, the four single-component ablations, and the plain baseline."""
    full = base.replace(preset="cip", ablation=None)
    return [full] + [apply_ablation(full, a) for a in ABLATIONS] + [full.replace(preset="baseline")]


def sweep_grid(base: TrainConfig) -> list[TrainConfig]:
    """lambda1 x lambda2 grid at the base edit budget, then the edit-budget sweep."""
    full = base.replace(preset="cip", ablation=None)
    out = [full.replace(lambda1=l1, lambda2=l2) for l1 in LAMBDA1_GRID for l2 in LAMBDA2_GRID]
    return out + [full.replace(max_hamming=k) for k in K_GRID]


# -- losses -----------------------------------------------------------------------


@dataclass(frozen=True)
class ClassWeights:
    w_plus: float
    w_minus: float
    n: int
    n_plus: int
    n_minus: int

    @classmethod
    def from_labels(cls, labels) -> "ClassWeights":
        y = np.asarray(labels)
        n, n_plus = len(y), int(y.sum())
        n_minus = n - n_plus
        if n_plus == 0 or n_minus == 0:
            raise ValueError("class weights need both labels")
        return cls(n / (2 * n_plus), n / (2 * n_minus), n, n_plus, n_minus)


def bce_from_logits(z, labels, weights: ClassWeights) -> tuple[float, np.ndarray]:
    """Class-weighted BCE (batch mean) and its gradient w.r.t. the logits."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(labels, dtype=float)
    n = len(z)
    # -log sigmoid(z) = logaddexp(0, -z);  -log(1 - sigmoid(z)) = logaddexp(0, z)
    per = weights.w_plus * y * np.logaddexp(0.0, -z) + weights.w_minus * (1 - y) * np.logaddexp(0.0, z)
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    grad = (weights.w_plus * y * (s - 1.0) + weights.w_minus * (1 - y) * s) / n
    return float(per.mean()), grad


def loss_bce(preds, labels, weights: ClassWeights) -> tuple[float, np.ndarray]:
    """Class-weighted BCE in probability space and its gradient w.r.t. the predictions."""
    p = np.asarray(preds, dtype=float)
    y = np.asarray(labels, dtype=float)
    n = len(p)
    per = -(weights.w_plus * y * np.log(p) + weights.w_minus * (1 - y) * np.log1p(-p))
    grad = (-weights.w_plus * y / p + weights.w_minus * (1 - y) / (1 - p)) / n
    return float(per.mean()), grad


def _edit_counts(owner: np.ndarray, n_pairs: int) -> np.ndarray:
    counts = np.bincount(owner, minlength=n_pairs).astype(float)
    return np.maximum(counts, 1.0)


def loss_inv(
    p: np.ndarray, q: np.ndarray, owner: np.ndarray, n_pairs: int | None = None, stop_grad_original: bool = False
) -> tuple[float, np.ndarray, np.ndarray]:
    """Invariance loss over ``n_pairs`` positives.

    ``q[e]`` is the prediction on an edit of pair ``owner[e]`` whose own
    prediction is ``p[owner[e]]``.  Returns (loss, dL/dp, dL/dq).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    owner = np.asarray(owner, dtype=int)
    n_pairs = len(p) if n_pairs is None else n_pairs
    if n_pairs == 0 or len(q) == 0:
        return 0.0, np.zeros_like(p), np.zeros_like(q)
    scale = 1.0 / (_edit_counts(owner, len(p))[owner] * n_pairs)
    diff = p[owner] - q
    loss = float(np.sum(scale * diff**2))
    dq = -2.0 * scale * diff
    dp = np.zeros_like(p) if stop_grad_original else np.bincount(owner, weights=-dq, minlength=len(p))
    return loss, dp, dq


def loss_sens(
    p: np.ndarray, q: np.ndarray, owner: np.ndarray, margin: float = 0.3, n_pairs: int | None = None
) -> tuple[float, np.ndarray, np.ndarray]:
    """Margin loss max(0, m - (p - q)); the subgradient at the kink is 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    owner = np.asarray(owner, dtype=int)
    n_pairs = len(p) if n_pairs is None else n_pairs
    if n_pairs == 0 or len(q) == 0:
        return 0.0, np.zeros_like(p), np.zeros_like(q)
    scale = 1.0 / (_edit_counts(owner, len(p))[owner] * n_pairs)
    slack = margin - (p[owner] - q)
    active = slack > 0
    loss = float(np.sum(scale * np.where(active, slack, 0.0)))
    dq = scale * active
    dp = np.bincount(owner, weights=-dq, minlength=len(p))
    return loss, dp, dq


# -- batch objective ----------------------------------------------------------------


@dataclass
class Batch:
    """Stacked inputs for one optimisation step.

    Rows ``[0, n_bce)`` carry BCE labels; ``pos_rows`` index the positives
    among them; ``inv_rows``/``sens_rows`` hold edit rows with their
    owning positive (an index into ``pos_rows``).
    """

    X: np.ndarray
    labels: np.ndarray
    pos_rows: np.ndarray
    inv_rows: np.ndarray
    inv_owner: np.ndarray
    sens_rows: np.ndarray
    sens_owner: np.ndarray


@dataclass
class StepResult:
    total: float
    bce: float
    inv: float
    sens: float
    grads: ModelParams


def objective(params: ModelParams, batch: Batch, weights: ClassWeights, config: TrainConfig) -> StepResult:
    lam1, lam2 = config.lambdas
    trace = forward(params, batch.X)
    n_bce = len(batch.labels)
    bce, grad_z_bce = bce_from_logits(trace.z[:n_bce], batch.labels, weights)
    grad_z = np.zeros(len(trace.z))
    grad_z[:n_bce] = grad_z_bce
    grad_p = np.zeros(len(trace.z))
    n_pos = len(batch.pos_rows)
    p_pos = trace.p[batch.pos_rows]
    inv = sens = 0.0
    if lam1 > 0 and len(batch.inv_rows):
        inv, dp, dq = loss_inv(p_pos, trace.p[batch.inv_rows], batch.inv_owner, n_pos, config.stop_grad_original)
        np.add.at(grad_p, batch.pos_rows, lam1 * dp)
        np.add.at(grad_p, batch.inv_rows, lam1 * dq)
    if lam2 > 0 and len(batch.sens_rows):
        sens, dp, dq = loss_sens(p_pos, trace.p[batch.sens_rows], batch.sens_owner, config.margin, n_pos)
        np.add.at(grad_p, batch.pos_rows, lam2 * dp)
        np.add.at(grad_p, batch.sens_rows, lam2 * dq)
    grads, _ = backward(trace, grad_p, grad_z)
    return StepResult(bce + lam1 * inv + lam2 * sens, bce, inv, sens, grads)


class Adam:
    def __init__(self, params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, g in grads.arrays().items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            w = getattr(params, name)
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    best_epoch: int
    best_val_auroc: float | None
    class_weights: ClassWeights
    family_ranks: dict[str, int]
    config: TrainConfig
    feature_fingerprint: str = ""
    extra: dict = field(default_factory=dict)


def build_batch(
    records: Sequence[PairRecord],
    rows: np.ndarray,
    X_train: np.ndarray,
    featurizer: Featurizer,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[Batch, int]:
    """Assemble the stacked batch; returns it with the number of empty edit sets met."""
    scheme, cons = config.scheme, config.constraints
    lam1, lam2 = config.lambdas
    batch_recs = [records[i] for i in rows]
    labels = [r.label for r in batch_recs]
    pos_rows = [i for i, r in enumerate(batch_recs) if r.label == 1]
    extra_cdr3: list[str] = []
    extra_pep: list[str] = []
    skipped = 0

    if config.preset == "editaug":
        for i in pos_rows:
            rec = batch_recs[i]
            drawn = draw(members_or_empty(rec.peptide, "non_anchor", scheme, cons), config.edits_per_positive, rng)
            skipped += not drawn
            extra_cdr3 += [rec.cdr3_beta] * len(drawn)
            extra_pep += drawn
        labels += [0] * len(extra_pep)

    n_bce = len(labels)
    groups = {}
    for kind, lam in (("non_anchor", lam1), ("anchor", lam2)):
        idx, owner = [], []
        if lam > 0:
            for k, i in enumerate(pos_rows):
                rec = batch_recs[i]
                drawn = draw(members_or_empty(rec.peptide, kind, scheme, cons), config.edits_per_positive, rng)
                skipped += not drawn
                for pep in drawn:
                    idx.append(n_bce + len(extra_pep))
                    owner.append(k)
                    extra_cdr3.append(rec.cdr3_beta)
                    extra_pep.append(pep)
        groups[kind] = (np.array(idx, dtype=int), np.array(owner, dtype=int))

    X = X_train[rows]
    if extra_pep:
        X = np.vstack([X, featurizer.pairs(extra_cdr3, extra_pep)])
    batch = Batch(
        X=X,
        labels=np.array(labels, dtype=float),
        pos_rows=np.array(pos_rows, dtype=int),
        inv_rows=groups["non_anchor"][0],
        inv_owner=groups["non_anchor"][1],
        sens_rows=groups["anchor"][0],
        sens_owner=groups["anchor"][1],
    )
    return batch, skipped


def _val_auroc(params: ModelParams, X_val: np.ndarray | None, y_val: np.ndarray | None) -> float | None:
    if X_val is None or len(X_val) == 0:
        return None
    try:
        return auroc(predict(params, X_val), y_val)
    except SingleClass:
        return None


def train(
    train_records: Sequence[PairRecord],
    val_records: Sequence[PairRecord],
    config: TrainConfig = TrainConfig(),
    on_epoch: Callable[[int, ModelParams, dict], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam training with early stopping on validation AUROC.

    Returns the checkpoint with the best validation AUROC (the final
    parameters when validation AUROC is undefined).  ``on_epoch`` is called
    after every epoch with the epoch number, the current parameters and the
    log entry.
    """
    train_records = sorted(train_records, key=lambda r: r.record_id)
    val_records = sorted(val_records, key=lambda r: r.record_id)
    if not train_records:
        raise ValueError("empty training split")
    weights = ClassWeights.from_labels([r.label for r in train_records])
    featurizer = Featurizer(config.features)
    X_train = featurizer.pairs([r.cdr3_beta for r in train_records], [r.peptide for r in train_records])
    X_val = y_val = None
    if val_records:
        X_val = featurizer.pairs([r.cdr3_beta for r in val_records], [r.peptide for r in val_records])
        y_val = np.array([r.label for r in val_records])

    init_ss, shuffle_ss, edit_ss = np.random.SeedSequence(config.rng_seed).spawn(3)
    params = init(int(init_ss.generate_state(1)[0]), featurizer.input_dim, config.hidden_dim)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    edit_rng = np.random.default_rng(edit_ss)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)

    best = params.copy()
    best_auc: float | None = None
    best_epoch = 0
    stale = 0
    history: list[dict] = []
    n = len(train_records)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = {"bce": 0.0, "inv": 0.0, "sens": 0.0, "total": 0.0}
        skipped = 0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            batch, sk = build_batch(train_records, rows, X_train, featurizer, config, edit_rng)
            skipped += sk
            step = objective(params, batch, weights, config)
            if not math.isfinite(step.total):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}")
            opt.step(params, step.grads)
            for key in sums:
                sums[key] += getattr(step, key)
            n_batches += 1
        val_auc = _val_auroc(params, X_val, y_val)
        entry = {k: v / n_batches for k, v in sums.items()}
        entry = {"epoch": epoch, **entry, "val_auroc": val_auc, "skipped_empty_editsets": skipped}
        history.append(entry)
        if on_epoch is not None:
            on_epoch(epoch, params, entry)
        log.debug("epoch %d %s", epoch, json.dumps(entry))
        if val_auc is None:
            best, best_epoch = params.copy(), epoch
            continue
        if best_auc is None or val_auc > best_auc:
            best, best_auc, best_epoch, stale = params.copy(), val_auc, epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(
        params=best,
        log=history,
        best_epoch=best_epoch,
        best_val_auroc=best_auc,
        class_weights=weights,
        family_ranks=rank_v_families(train_records),
        config=config,
        feature_fingerprint=config.features.fingerprint(),
    )


def write_log(history: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
