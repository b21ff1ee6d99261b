"""Slow, direct reference implementations used as test oracles.

Nothing here imports from tripletvoice; each oracle follows the textbook
definition with plain loops.
"""

import math

import numpy as np


def dist(a, b):
    return math.sqrt(math.fsum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def centroid(rows):
    rows = [list(map(float, r)) for r in rows]
    n = len(rows)
    return np.array([math.fsum(col) / n for col in zip(*rows)])


def silhouette(points, labels):
    n = len(points)
    clusters = sorted(set(labels))
    scores = []
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = math.fsum(dist(points[i], points[j]) for j in own) / len(own)
        b = math.inf
        for c in clusters:
            if c == labels[i]:
                continue
            members = [j for j in range(n) if labels[j] == c]
            b = min(b, math.fsum(dist(points[i], points[j]) for j in members) / len(members))
        scores.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return scores


def auc(genuine, impostor):
    total = 0.0
    for g in genuine:
        for i in impostor:
            total += 1.0 if g > i else 0.5 if g == i else 0.0
    return total / (len(genuine) * len(impostor))


def det_points(genuine, impostor):
    """(threshold, fmr, fnmr) over -inf, every distinct score, +inf; accept when score >= t."""
    thresholds = [-math.inf] + sorted(set(genuine) | set(impostor)) + [math.inf]
    out = []
    for t in thresholds:
        fmr = sum(1 for i in impostor if i >= t) / len(impostor)
        fnmr = sum(1 for g in genuine if g < t) / len(genuine)
        out.append((t, fmr, fnmr))
    return out


def eer(genuine, impostor):
    pts = det_points(genuine, impostor)
    for (t0, a0, b0), (t1, a1, b1) in zip(pts, pts[1:]):
        d0, d1 = a0 - b0, a1 - b1
        if d0 == 0:
            return a0
        if d0 > 0 >= d1:
            w = d0 / (d0 - d1)
            return a0 + w * (a1 - a0)
    return pts[-1][1]


def d_prime(genuine, impostor):
    def mean_var(v):
        m = math.fsum(v) / len(v)
        return m, math.fsum((x - m) ** 2 for x in v) / (len(v) - 1)

    mg, vg = mean_var(genuine)
    mi, vi = mean_var(impostor)
    return abs(mg - mi) / math.sqrt((vg + vi) / 2)


def lr_dr(questioned, reference, population):
    q, r = centroid(questioned), centroid(reference)
    nearest = min(dist(q, centroid(p)) for p in population)
    return nearest / dist(r, q)


def percentile_linear(values, pct):
    v = sorted(values)
    pos = (len(v) - 1) * pct / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def quality(points, labels):
    """(IAD, OAD) by the per-speaker definitions."""
    speakers = sorted(set(labels))
    groups = {s: [p for p, l in zip(points, labels) if l == s] for s in speakers}
    cents = {s: centroid(groups[s]) for s in speakers}
    iads, oads = [], []
    for s in speakers:
        iads.append(math.fsum(dist(p, cents[s]) for p in groups[s]) / len(groups[s]))
        per_other = [math.fsum(dist(p, cents[o]) for p in groups[s]) / len(groups[s]) for o in speakers if o != s]
        oads.append(math.fsum(per_other) / len(per_other))
    return math.fsum(iads) / len(iads), math.fsum(oads) / len(oads)
