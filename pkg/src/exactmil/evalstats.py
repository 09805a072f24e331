"""Detection, overlap and ranking metrics plus bootstrap and rank-sum tests.

Bootstrap resample ``b`` draws its indices from a Philox generator keyed by
``seed + (b << 64)``, so each resample is an independent, reproducible
substream that other implementations can regenerate.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def _binary(x, what):
    x = np.asarray(x)
    if not np.isin(x, (0, 1)).all():
        raise ValueError(f"{what} must be binary")
    return x.astype(bool)


def _aligned(a, b, what):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------- point metrics

def dsc(pred, gt, eps=1e-5):
    pred, gt = _aligned(pred, gt, "dsc")
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    return float(2.0 * np.sum(p & g) / (p.sum() + g.sum() + eps))


def auroc(scores, labels):
    """Mann-Whitney statistic with midranks (ties count one half)."""
    s, y = _aligned(np.asarray(scores, dtype=float).ravel(), np.asarray(labels).ravel(), "auroc")
    y = _binary(y, "labels")
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("auroc: both classes are required")
    r = rankdata(s)
    return float((r[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def _confusion(pred, labels):
    p, y = _aligned(pred, labels, "confusion")
    p, y = _binary(p, "pred"), _binary(y, "labels")
    return int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & y)), int(np.sum(~p & ~y))


def f1(pred, labels):
    tp, fp, fn, _ = _confusion(pred, labels)
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def accuracy(pred, labels):
    tp, fp, fn, tn = _confusion(pred, labels)
    n = tp + fp + fn + tn
    if n == 0:
        raise ValueError("accuracy: empty input")
    return (tp + tn) / n


def aupr(scores, labels):
    """Rectangle-rule area under the precision-recall step curve.

    One operating point per distinct score (predict positive when
    score >= threshold); precision is not interpolated.
    """
    s, y = _aligned(np.asarray(scores, dtype=float).ravel(), np.asarray(labels).ravel(), "aupr")
    y = _binary(y, "labels")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("aupr: at least one positive is required")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]   # end of each tie block
    precision = tp[last] / (last + 1.0)
    recall = tp[last] / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def hit_rate(values, threshold=0.05):
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("hit_rate: empty list")
    return float(np.sum(v > threshold) / v.size)


def macro(metric, scores, labels):
    """Average a per-disease metric over columns; skips columns that raise.

    Returns (mean, per-disease values with NaN for skipped, skip count).
    """
    scores, labels = np.asarray(scores), np.asarray(labels)
    vals = np.full(scores.shape[1], np.nan)
    for i in range(scores.shape[1]):
        try:
            vals[i] = metric(scores[:, i], labels[:, i])
        except ValueError:
            pass
    skipped = int(np.isnan(vals).sum())
    mean = float(np.nanmean(vals)) if skipped < len(vals) else float("nan")
    return mean, vals, skipped


# ---------------------------------------------------------------- bootstrap

@dataclass(frozen=True)
class MetricReport:
    metric: str
    estimate: float
    ci_low: float
    ci_high: float
    level: float = 0.95
    resamples: int = 0
    seed: int = 0
    n: int = 0
    method: str = ""

    COLUMNS = ("method", "metric", "estimate", "ci_low", "ci_high", "level", "resamples", "seed", "n")

    def row(self):
        d = asdict(self)
        return "\t".join(_fmt(d[c]) for c in self.COLUMNS)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def reports_tsv(reports):
    return "\t".join(MetricReport.COLUMNS) + "\n" + "".join(r.row() + "\n" for r in reports)


def write_reports(reports, path):
    Path(path).write_text(reports_tsv(reports))


def resample_rng(seed, b):
    """Substream for bootstrap resample ``b``."""
    return np.random.Generator(np.random.Philox(key=int(seed) + (int(b) << 64)))


def resample_indices(n, seed, b):
    return resample_rng(seed, b).integers(0, n, size=n)


def _take_all(data, idx):
    return tuple(np.asarray(d)[idx] for d in data)


def bootstrap_distribution(data, statistic, resamples, seed):
    """Statistic over ``resamples`` paired resamples; resamples where the
    statistic raises ValueError (e.g. a single-class draw) are dropped."""
    data = tuple(np.asarray(d) for d in data)
    n = len(data[0])
    if any(len(d) != n for d in data):
        raise ValueError("bootstrap: data arrays are not aligned")
    out = []
    for b in range(resamples):
        try:
            out.append(statistic(*_take_all(data, resample_indices(n, seed, b))))
        except ValueError:
            continue
    return np.asarray(out, dtype=float)


def bootstrap_ci(data, statistic=np.mean, resamples=1000, level=0.95, seed=0, name="statistic", method=""):
    """Percentile bootstrap CI around the plug-in estimate.

    ``data`` is one array or a tuple of aligned arrays passed positionally
    to ``statistic``.
    """
    data = data if isinstance(data, tuple) else (data,)
    n = len(data[0])
    if n < 2:
        raise ValueError("bootstrap_ci: n >= 2 required")
    if not 0 < level < 1:
        raise ValueError("bootstrap_ci: level must lie in (0, 1)")
    est = float(statistic(*data))
    dist = bootstrap_distribution(data, statistic, resamples, seed)
    if dist.size == 0:
        raise ValueError("bootstrap_ci: every resample was degenerate")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(dist, [100 * alpha, 100 * (1 - alpha)])
    return MetricReport(name, est, float(lo), float(hi), level, resamples, seed, n, method)


def bootstrap_pvalue(metric, pred_a, pred_b, labels, resamples=2000, seed=0):
    """Two-sided paired bootstrap test of metric(A) - metric(B)."""
    pred_a, pred_b, labels = np.asarray(pred_a), np.asarray(pred_b), np.asarray(labels)
    if not len(pred_a) == len(pred_b) == len(labels):
        raise ValueError("bootstrap_pvalue: predictions and labels are not aligned")
    delta = bootstrap_distribution((pred_a, pred_b, labels),
                                   lambda a, b, y: metric(a, y) - metric(b, y), resamples, seed)
    if delta.size == 0:
        raise ValueError("bootstrap_pvalue: every resample was degenerate")
    p = 2.0 * min(np.mean(delta <= 0), np.mean(delta >= 0))
    return float(min(max(p, 1.0 / resamples), 1.0))


# ---------------------------------------------------------------- rank-sum test

EXACT_MAX_N = 12


def _ranksum_exact(w, ranks, n_a):
    n = len(ranks)
    total = math.comb(n, n_a)
    le = ge = 0
    for combo in itertools.combinations(ranks, n_a):
        s = sum(combo)
        le += s <= w + 1e-9
        ge += s >= w - 1e-9
    return min(1.0, 2.0 * min(le, ge) / total)


def _ranksum_normal(w, ranks, n_a, n_b):
    n = n_a + n_b
    mu = n_a * (n + 1) / 2.0
    _, counts = np.unique(ranks, return_counts=True)
    ties = float(np.sum(counts ** 3 - counts))
    var = n_a * n_b / 12.0 * ((n + 1) - ties / (n * (n - 1)))
    if var <= 0:
        return 1.0
    z = max(abs(w - mu) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def wilcoxon_ranksum(a, b, method="auto"):
    """Two-sided rank-sum p-value.  ``method``: "auto", "exact" or "normal"."""
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("wilcoxon_ranksum: both samples must be nonempty")
    ranks = rankdata(np.r_[a, b])
    w = float(ranks[:a.size].sum())
    tied = len(np.unique(ranks)) < ranks.size
    if method == "auto":
        method = "exact" if a.size + b.size <= EXACT_MAX_N and not tied else "normal"
    if method == "exact":
        return _ranksum_exact(w, list(ranks), a.size)
    if method == "normal":
        return _ranksum_normal(w, ranks, a.size, b.size)
    raise ValueError(f"unknown method {method!r}")
