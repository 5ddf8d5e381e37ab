"""Distortion, classification and ranking measures.

Undefined values (no positives, a fully tied vector, an empty label set) are
returned as ``nan``; aggregates skip them and reports print ``N.A.``.
"""

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

UNDEFINED = float("nan")


def is_undefined(v):
    return v is None or (isinstance(v, float) and math.isnan(v))


def rmsd(r):
    r = np.asarray(r, dtype=np.float64)
    return float(np.sqrt(np.mean(r * r)))


def hamming_on(indices, h_star, target):
    """Fraction of ``indices`` where the prediction disagrees with the target."""
    indices = list(indices)
    if not indices:
        return UNDEFINED
    h_star = np.asarray(h_star)
    target = np.asarray(target)
    return float(np.mean(h_star[indices] != target[indices]))


def instance_f1(h_star, target):
    h = np.asarray(h_star) == 1
    t = np.asarray(target) == 1
    tp = int(np.sum(h & t))
    fp = int(np.sum(h & ~t))
    fn = int(np.sum(~h & t))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def _pos_neg(target):
    t = np.asarray(target)
    return np.flatnonzero(t == 1), np.flatnonzero(t != 1)


def ranking_loss(scores, target):
    """Fraction of (positive, negative) pairs ranked the wrong way; ties count half."""
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = _pos_neg(target)
    if len(pos) == 0 or len(neg) == 0:
        return UNDEFINED
    diff = s[pos][:, None] - s[neg][None, :]
    return float((np.sum(diff < 0) + 0.5 * np.sum(diff == 0)) / diff.size)


def instance_auc(scores, target):
    loss = ranking_loss(scores, target)
    return UNDEFINED if math.isnan(loss) else 1.0 - loss


def instance_ap(scores, target):
    """Average precision of one label ranking (descending score, ties by index)."""
    s = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(target) == 1
    if not relevant.any():
        return UNDEFINED
    order = np.lexsort((np.arange(len(s)), -s))
    ranks = np.flatnonzero(relevant[order]) + 1
    # exact rational mean, rounded once
    total = sum(Fraction(k, int(rank)) for k, rank in enumerate(ranks, start=1))
    return float(total / len(ranks))


def mean_ap(score_rows, target_rows):
    """Instance-wise mAP: average of per-instance AP over defined instances."""
    vals = [instance_ap(s, t) for s, t in zip(score_rows, target_rows)]
    return nanmean(vals)


def label_wise_map(score_rows, target_rows):
    """Label-wise mAP: rank instances per label, average AP over labels."""
    S = np.asarray(score_rows, dtype=np.float64)
    T = np.asarray(target_rows)
    if S.ndim != 2 or S.size == 0:
        return UNDEFINED
    return nanmean([instance_ap(S[:, j], T[:, j]) for j in range(S.shape[1])])


def kendall_tau_b(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError("kendall_tau_b needs two vectors of equal length")
    n = len(u)
    if n < 2:
        return UNDEFINED
    iu = np.triu_indices(n, 1)
    su = np.sign(u[:, None] - u[None, :])[iu]
    sv = np.sign(v[:, None] - v[None, :])[iu]
    n0 = n * (n - 1) // 2
    n1 = int(np.sum(su == 0))
    n2 = int(np.sum(sv == 0))
    den = (n0 - n1) * (n0 - n2)
    if den == 0:
        return UNDEFINED
    return float(np.sum(su * sv)) / math.sqrt(den)


def nanmean(values):
    vals = [float(v) for v in values if not is_undefined(v)]
    return float(np.mean(vals)) if vals else UNDEFINED


# aggregates

ATTACK_METRICS = ("rmsd", "hamming_A", "hamming_B", "instance_f1", "ranking_loss",
                  "map", "auc", "kendall_tau_b")


@dataclass
class EvalReport:
    """Per (strategy, method) means of the per-instance attack metrics."""

    strategy: str
    method: str
    n: int
    n_failed: int
    success_rate: float
    rmsd: float
    hamming_A: float
    hamming_B: float
    instance_f1: float
    ranking_loss: float
    map: float
    auc: float
    kendall_tau_b: float
    label_map: float

    def values(self):
        return [getattr(self, k) for k in self.__dataclass_fields__]


def aggregate(strategy, method, rows, label_map=UNDEFINED):
    """Average per-instance metric dicts; rows with ``failed`` set only count in ``n_failed``."""
    ok = [r for r in rows if not r.get("failed")]
    means = {k: nanmean([r[k] for r in ok]) for k in ATTACK_METRICS}
    succ = nanmean([1.0 if r["success"] else 0.0 for r in ok])
    return EvalReport(strategy, method, len(rows), len(rows) - len(ok), succ,
                      label_map=label_map, **means)


# victim-model quality (validation report)

def micro_f1(H, Y):
    H = np.asarray(H) == 1
    Y = np.asarray(Y) == 1
    tp = np.sum(H & Y)
    fp = np.sum(H & ~Y)
    fn = np.sum(~H & Y)
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else float(2 * tp / den)


def macro_f1(H, Y):
    H = np.asarray(H) == 1
    Y = np.asarray(Y) == 1
    out = []
    for j in range(Y.shape[1]):
        tp = np.sum(H[:, j] & Y[:, j])
        den = 2 * tp + np.sum(H[:, j] & ~Y[:, j]) + np.sum(~H[:, j] & Y[:, j])
        out.append(1.0 if den == 0 else 2 * tp / den)
    return float(np.mean(out))


def hamming_loss(H, Y):
    return float(np.mean(np.asarray(H) != np.asarray(Y)))


def format_value(v):
    return "N.A." if is_undefined(v) else repr(float(v))
