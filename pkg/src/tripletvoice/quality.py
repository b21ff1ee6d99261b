"""Cluster-quality metrics for speaker-labelled embeddings: IAD, OAD, DR and MSC."""

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptySet, SingleSpeaker, ZeroOAD


@dataclass(frozen=True, eq=False)
class LabeledEmbeddingSet:
    embeddings: np.ndarray  # (n, dim)
    labels: tuple

    def __post_init__(self):
        e = np.asarray(self.embeddings, dtype=np.float64)
        if e.ndim != 2:
            raise ValueError("embeddings must be a 2-D array")
        if e.shape[0] != len(self.labels):
            raise ValueError(f"{e.shape[0]} embeddings but {len(self.labels)} labels")
        object.__setattr__(self, "embeddings", e)
        object.__setattr__(self, "labels", tuple(self.labels))

    @classmethod
    def from_groups(cls, groups):
        """Build from ``{speaker: (n_i, dim) array}``."""
        keys = sorted(groups)
        arrays = [np.asarray(groups[k], dtype=np.float64) for k in keys]
        labels = [k for k, a in zip(keys, arrays) for _ in range(a.shape[0])]
        return cls(np.concatenate(arrays, axis=0), labels)

    def speakers(self):
        return sorted(set(self.labels))

    def groups(self):
        lab = np.asarray(self.labels, dtype=object)
        return {s: self.embeddings[lab == s] for s in self.speakers()}

    def scaled(self, c):
        return LabeledEmbeddingSet(self.embeddings * c, self.labels)


@dataclass
class SpeakerQuality:
    n: int
    iad: float
    oad: float
    silhouette: float


@dataclass
class QualityReport:
    iad: float
    oad: float
    dr: float
    msc: float
    n_speakers: int
    n_embeddings: int
    per_speaker: dict = field(default_factory=dict)

    CSV_FIELDS = ("iad", "oad", "dr", "msc", "n_speakers", "n_embeddings")

    def to_dict(self):
        d = asdict(self)
        d["per_speaker"] = {str(k): asdict(v) for k, v in self.per_speaker.items()}
        return d

    def to_json(self, extra=None):
        d = self.to_dict()
        if extra:
            d = {**extra, **d}
        return json.dumps(d, sort_keys=True, indent=2)

    def csv_row(self, header=True, prefix=None):
        """One-line CSV (optionally with header) for sweep tables."""
        prefix = prefix or {}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(list(prefix) + list(self.CSV_FIELDS))
        values = [getattr(self, f) for f in self.CSV_FIELDS]
        w.writerow(list(prefix.values()) + [repr(v) if isinstance(v, float) else v for v in values])
        return buf.getvalue()


def centroid(embeddings):
    if isinstance(embeddings, (list, tuple)):
        embeddings = [getattr(e, "values", e) for e in embeddings]
    arr = np.asarray(embeddings, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise EmptySet("centroid of an empty set")
    return arr.mean(axis=0)


def _dist_to(points, target):
    return np.sqrt(np.sum((points - target) ** 2, axis=1))


def _cluster_mean_distances(x, codes, k, block=512):
    """Sum of distances from every point to every cluster, shape (n, k)."""
    n = x.shape[0]
    x = x - x.mean(axis=0)  # centring limits cancellation in the Gram expansion
    sq = np.sum(x * x, axis=1)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), codes] = 1.0
    sums = np.empty((n, k))
    for start in range(0, n, block):
        rows = slice(start, min(start + block, n))
        d2 = sq[rows, None] + sq[None, :] - 2.0 * (x[rows] @ x.T)
        np.maximum(d2, 0.0, out=d2)
        d = np.sqrt(d2)
        d[np.arange(d.shape[0]), np.arange(rows.start, rows.stop)] = 0.0
        sums[rows] = d @ onehot
    return sums


def silhouette_samples(x, labels):
    """Per-point silhouette; members of singleton clusters get 0."""
    x = np.asarray(x, dtype=np.float64)
    uniq, codes = np.unique(np.asarray(labels, dtype=object).astype(str), return_inverse=True)
    k = uniq.shape[0]
    if k < 2:
        raise SingleSpeaker("silhouette needs at least two clusters")
    counts = np.bincount(codes, minlength=k).astype(np.float64)
    sums = _cluster_mean_distances(x, codes, k)
    own = counts[codes]
    n = x.shape[0]
    a = np.where(own > 1, sums[np.arange(n), codes] / np.maximum(own - 1, 1), 0.0)
    means = sums / counts[None, :]
    means[np.arange(n), codes] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own > 1, s, 0.0)


def compute_quality(data):
    """IAD, OAD, DR = IAD/OAD and mean silhouette over a labelled set.

    IAD averages, per speaker, the distance of each sample to the speaker's own
    centroid; OAD averages the distance of each sample to every other speaker's
    centroid. Both are then averaged over speakers.
    """
    groups = data.groups()
    speakers = list(groups)
    if len(speakers) < 2:
        raise SingleSpeaker("quality metrics need at least two speakers")
    cents = {s: groups[s].mean(axis=0) for s in speakers}
    per = {}
    for s in speakers:
        pts = groups[s]
        iad_s = float(_dist_to(pts, cents[s]).mean())
        oad_s = float(np.mean([_dist_to(pts, cents[o]).mean() for o in speakers if o != s]))
        per[s] = SpeakerQuality(pts.shape[0], iad_s, oad_s, 0.0)
    iad = float(np.mean([per[s].iad for s in speakers]))
    oad = float(np.mean([per[s].oad for s in speakers]))
    if oad == 0.0:
        raise ZeroOAD("all speaker centroids coincide with every sample")

    sil = silhouette_samples(data.embeddings, data.labels)
    lab = np.asarray(data.labels, dtype=object)
    for s in speakers:
        per[s].silhouette = float(sil[lab == s].mean())
    return QualityReport(
        iad=iad,
        oad=oad,
        dr=iad / oad,
        msc=float(sil.mean()),
        n_speakers=len(speakers),
        n_embeddings=int(data.embeddings.shape[0]),
        per_speaker=per,
    )
