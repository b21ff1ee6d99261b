"""Score-set evaluation: DET/ROC points, EER, AUC, d', histograms and 2-D projections."""

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateVariance, EmptyClass, TooFewScores

HIGHER = "higher_is_genuine"
LOWER = "lower_is_genuine"


@dataclass(frozen=True, eq=False)
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray
    polarity: str = HIGHER

    def __post_init__(self):
        if self.polarity not in (HIGHER, LOWER):
            raise ValueError(f"unknown polarity {self.polarity!r}")
        object.__setattr__(self, "genuine", np.asarray(self.genuine, dtype=np.float64).ravel())
        object.__setattr__(self, "impostor", np.asarray(self.impostor, dtype=np.float64).ravel())

    def require_both(self):
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise EmptyClass("genuine and impostor scores must both be non-empty")

    def mapped(self, fn):
        return ScoreSet(fn(self.genuine), fn(self.impostor), self.polarity)


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    fmr: float
    fnmr: float


def normalize_polarity(scores):
    if scores.polarity == HIGHER:
        return scores
    return ScoreSet(-scores.genuine, -scores.impostor, HIGHER)


def _rates(scores):
    s = normalize_polarity(scores)
    s.require_both()
    g = np.sort(s.genuine)
    i = np.sort(s.impostor)
    thr = np.concatenate([[-np.inf], np.unique(np.concatenate([g, i])), [np.inf]])
    fmr = (i.size - np.searchsorted(i, thr, side="left")) / i.size
    fnmr = np.searchsorted(g, thr, side="left") / g.size
    return thr, fmr, fnmr


def det_curve(scores):
    """FMR/FNMR at every distinct score plus the two infinite sentinels.

    A trial is accepted when its score is >= threshold.
    """
    thr, fmr, fnmr = _rates(scores)
    return [CurvePoint(float(t), float(a), float(b)) for t, a, b in zip(thr, fmr, fnmr)]


def roc_curve(scores):
    """(threshold, false positive rate, true positive rate) triples."""
    thr, fmr, fnmr = _rates(scores)
    return [(float(t), float(a), float(1.0 - b)) for t, a, b in zip(thr, fmr, fnmr)]


def eer(scores):
    """Equal error rate by linear interpolation where FMR - FNMR changes sign."""
    thr, fmr, fnmr = _rates(scores)
    diff = fmr - fnmr
    k = int(np.argmax(diff <= 0))  # diff starts at +1 and ends at -1
    if diff[k] == 0 or k == 0:
        return float(fmr[k]), float(thr[k])
    alpha = diff[k - 1] / (diff[k - 1] - diff[k])
    rate = fmr[k - 1] + alpha * (fmr[k] - fmr[k - 1])
    lo, hi = thr[k - 1], thr[k]
    if not np.isfinite(lo):
        t = hi
    elif not np.isfinite(hi):
        t = lo
    else:
        t = lo + alpha * (hi - lo)
    return float(rate), float(t)


def auc(scores):
    """P(genuine > impostor) with ties counted 1/2, from the rank sum."""
    s = normalize_polarity(scores)
    s.require_both()
    ranks = rankdata(np.concatenate([s.genuine, s.impostor]))
    ng, ni = s.genuine.size, s.impostor.size
    u = ranks[:ng].sum() - ng * (ng + 1) / 2.0
    return float(u / (ng * ni))


def d_prime(scores):
    """Equal-variance sensitivity index |mu_g - mu_i| / sqrt((var_g + var_i) / 2)."""
    g, i = scores.genuine, scores.impostor
    if g.size < 2 or i.size < 2:
        raise TooFewScores("each class needs at least two scores")
    pooled = np.sqrt((g.var(ddof=1) + i.var(ddof=1)) / 2.0)
    gap = abs(g.mean() - i.mean())
    if pooled == 0:
        return 0.0 if gap == 0 else float("inf")
    return float(gap / pooled)


def histogram(scores, bins=20):
    """Shared equal-width bins over the pooled range; returns (edges, genuine, impostor)."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    pooled = np.concatenate([scores.genuine, scores.impostor])
    if pooled.size == 0:
        return np.array([0.0, 1.0]), np.zeros(bins, int), np.zeros(bins, int)
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    g, _ = np.histogram(scores.genuine, bins=edges)
    i, _ = np.histogram(scores.impostor, bins=edges)
    return edges, g, i


def summarize(scores):
    e, t = eer(scores)
    return {
        "polarity": scores.polarity,
        "n_genuine": int(scores.genuine.size),
        "n_impostor": int(scores.impostor.size),
        "mean_genuine": float(scores.genuine.mean()),
        "mean_impostor": float(scores.impostor.mean()),
        "eer": e,
        "eer_threshold": t if scores.polarity == HIGHER else -t,
        "auc": auc(scores),
        "d_prime": d_prime(scores),
    }


# -- 2-D projection ------------------------------------------------------------

def _power_iteration(matvec, dim, rng, tol, max_iter):
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        norm = np.linalg.norm(w)
        if norm == 0:
            return v, 0.0
        w /= norm
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v, lam = w, norm
        if done:
            break
    return v, float(v @ matvec(v))


def principal_axes(x, k=2, tol=1e-9, max_iter=100000, seed=0):
    """Top-``k`` covariance eigenpairs by power iteration with deflation."""
    xc = x - x.mean(axis=0)
    n = xc.shape[0]
    rng = np.random.default_rng(seed)
    axes, values = [], []

    def matvec(v):
        out = xc.T @ (xc @ v) / (n - 1)
        for a, lam in zip(axes, values):
            out -= lam * (a @ v) * a
        return out

    for _ in range(k):
        v, lam = _power_iteration(matvec, xc.shape[1], rng, tol, max_iter)
        big = np.argmax(np.abs(v))
        if v[big] < 0:
            v = -v
        axes.append(v)
        values.append(lam)
    return np.stack(axes), np.array(values)


def project_2d(data):
    """Centred coordinates on the top two principal directions."""
    x = np.asarray(data.embeddings, dtype=np.float64)
    if x.shape[0] < 3:
        raise ValueError("projection needs at least three embeddings")
    xc = x - x.mean(axis=0)
    if not np.any(xc):
        raise DegenerateVariance("all embeddings are identical")
    axes, _ = principal_axes(x)
    return xc @ axes.T


# -- CSV emitters --------------------------------------------------------------

def _header(fh, config):
    if config is not None:
        fh.write("# " + json.dumps(config, sort_keys=True) + "\n")


def write_det_csv(path, points, config=None):
    with open(path, "w", newline="") as fh:
        _header(fh, config)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fmr", "fnmr"])
        for p in points:
            w.writerow([repr(p.threshold), repr(p.fmr), repr(p.fnmr)])


def write_roc_csv(path, points, config=None):
    with open(path, "w", newline="") as fh:
        _header(fh, config)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, a, b in points:
            w.writerow([repr(t), repr(a), repr(b)])


def write_histogram_csv(path, edges, genuine, impostor, config=None):
    with open(path, "w", newline="") as fh:
        _header(fh, config)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "genuine", "impostor"])
        for k in range(len(genuine)):
            w.writerow([repr(float(edges[k])), repr(float(edges[k + 1])), int(genuine[k]), int(impostor[k])])


def write_projection_csv(path, points, labels, config=None):
    with open(path, "w", newline="") as fh:
        _header(fh, config)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "speaker_id"])
        for (x, y), lab in zip(points, labels):
            w.writerow([repr(float(x)), repr(float(y)), lab])
