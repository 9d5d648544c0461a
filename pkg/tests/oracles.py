"""Independent reference implementations used as test oracles."""

import itertools

from cip.edit_engine import validate_anchor, validate_non_anchor
from cip.seq_core import ALPHABET


def candidates_within(pi, k):
    """Every length-preserving substitution variant of ``pi`` at Hamming 1..k."""
    out = set()
    for r in range(1, k + 1):
        for pos in itertools.combinations(range(len(pi)), r):
            for subs in itertools.product(ALPHABET, repeat=r):
                if any(pi[j] == a for j, a in zip(pos, subs)):
                    continue
                chars = list(pi)
                for j, a in zip(pos, subs):
                    chars[j] = a
                out.add("".join(chars))
    return out


def brute_force_edits(pi, kind, scheme, c):
    pred = validate_non_anchor if kind == "non_anchor" else validate_anchor
    return {cand for cand in candidates_within(pi, c.max_hamming) if pred(pi, cand, scheme, c)}


def objective_fd_error(params, batch, weights, config, eps=1e-5):
    """Worst relative gap between analytic and central-difference gradients of the objective."""
    import numpy as np

    from cip.model import PARAM_NAMES
    from cip.trainer import objective

    grads = objective(params, batch, weights, config).grads
    worst = 0.0
    for name in PARAM_NAMES:
        arr, g = getattr(params, name), getattr(grads, name)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = objective(params, batch, weights, config).total
            arr[idx] = old - eps
            dn = objective(params, batch, weights, config).total
            arr[idx] = old
            num = (up - dn) / (2 * eps)
            worst = max(worst, abs(num - g[idx]) / max(1e-6, abs(num) + abs(g[idx])))
    return worst


def micro_batch(rng, input_dim=5, n=3, n_pos=2):
    """A small stacked batch: ``n`` labelled rows plus one inv and one sens edit per positive."""
    import numpy as np

    from cip.trainer import Batch

    labels = np.array([1.0] * n_pos + [0.0] * (n - n_pos))
    X = rng.normal(size=(n + 2 * n_pos, input_dim))
    pos = np.arange(n_pos)
    inv_rows = n + np.arange(n_pos)
    sens_rows = n + n_pos + np.arange(n_pos)
    return Batch(X, labels, pos, inv_rows, pos.copy(), sens_rows, pos.copy())


def pairwise_auroc(preds, labels):
    """O(n^2) count of positive-negative orderings, ties one half."""
    pos = [p for p, y in zip(preds, labels) if y == 1]
    neg = [p for p, y in zip(preds, labels) if y == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def sweep_auprc(preds, labels):
    """Average precision from an explicit sweep over distinct thresholds, high to low."""
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(preds), reverse=True):
        sel = [y for p, y in zip(preds, labels) if p >= t]
        tp = sum(sel)
        recall = tp / n_pos
        ap += (recall - prev_recall) * tp / len(sel)
        prev_recall = recall
    return ap


def average_ranks(values):
    """1-based ranks with ties given the mean of the positions they span."""
    out = []
    for v in values:
        below = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        out.append(below + (equal + 1) / 2)
    return out


def spearman_oracle(x, y):
    rx, ry = average_ranks(list(x)), average_ranks(list(y))
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    return cov / (vx * vy) ** 0.5
