"""Triplet loss over L2 distances, in-batch mining and the training loop."""

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBatch, DimensionMismatch, NonFiniteLoss
from .net import SGD, save_checkpoint

log = logging.getLogger(__name__)

MINING = ("random", "semi_hard")


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 2.0
    speakers_per_batch: int = 8
    patches_per_speaker: int = 4
    steps: int = 500
    max_seconds: float | None = None
    mining: str = "semi_hard"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.speakers_per_batch < 2 or self.patches_per_speaker < 2:
            raise ValueError("need at least 2 speakers x 2 patches per batch")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.mining not in MINING:
            raise ValueError(f"mining must be one of {MINING}")


def _vec(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def l2(a, b):
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def pairwise_distances(x):
    """Euclidean distance matrix, accumulated in float64."""
    x = np.asarray(x, dtype=np.float64)
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _unit(diff, dist):
    return diff / dist if dist > 0 else np.zeros_like(diff)


def triplet_loss(anchor, positive, negative, margin):
    """``max(D(A,P) - D(A,N) + m, 0)`` and its subgradients w.r.t. A, P, N."""
    a, p, n = _vec(anchor), _vec(positive), _vec(negative)
    if not a.shape == p.shape == n.shape:
        raise DimensionMismatch(f"{a.shape}, {p.shape}, {n.shape}")
    d_ap = float(np.linalg.norm(a - p))
    d_an = float(np.linalg.norm(a - n))
    hinge = d_ap - d_an + margin
    if hinge < 0:
        z = np.zeros_like(a)
        return 0.0, z, z.copy(), z.copy()
    u_ap = _unit(a - p, d_ap)
    u_an = _unit(a - n, d_an)
    return max(hinge, 0.0), u_ap - u_an, -u_ap, u_an


def batch_triplet_loss(embeddings, triplets, margin):
    """Mean loss over ``triplets`` with the gradient w.r.t. every batch embedding.

    Returns ``(loss, grad, active_fraction)``.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    grad = np.zeros_like(e)
    if not triplets:
        return 0.0, grad, 0.0
    idx = np.array([(t.anchor, t.positive, t.negative) for t in triplets])
    a, p, n = e[idx[:, 0]], e[idx[:, 1]], e[idx[:, 2]]
    diff_ap, diff_an = a - p, a - n
    d_ap = np.linalg.norm(diff_ap, axis=1)
    d_an = np.linalg.norm(diff_an, axis=1)
    hinge = d_ap - d_an + margin
    active = hinge >= 0
    losses = np.where(active, np.maximum(hinge, 0.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        u_ap = np.where((d_ap > 0)[:, None], diff_ap / d_ap[:, None], 0.0)
        u_an = np.where((d_an > 0)[:, None], diff_an / d_an[:, None], 0.0)
    scale = active[:, None] / len(triplets)
    np.add.at(grad, idx[:, 0], scale * (u_ap - u_an))
    np.add.at(grad, idx[:, 1], -scale * u_ap)
    np.add.at(grad, idx[:, 2], scale * u_an)
    return float(losses.mean()), grad, float(np.mean(losses > 0))


def mine_triplets(labels, distances, strategy="semi_hard", rng=None, margin=2.0):
    """Choose one negative for every ordered (anchor, positive) pair in the batch.

    ``random`` draws the negative uniformly; ``semi_hard`` takes the closest
    negative with ``D(A,P) < D(A,N) < D(A,P) + m``, falling back to the closest
    negative overall.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if strategy not in MINING:
        raise ValueError(f"unknown mining strategy {strategy!r}")
    same = labels[:, None] == labels[None, :]
    if np.unique(labels).shape[0] < 2:
        raise DegenerateBatch("batch holds a single speaker")
    if not np.any(same & ~np.eye(n, dtype=bool)):
        raise DegenerateBatch("no speaker has two patches in the batch")
    if strategy == "random" and rng is None:
        raise ValueError("random mining needs an rng")
    d = np.asarray(distances, dtype=np.float64)

    out = []
    for a in range(n):
        neg = np.nonzero(~same[a])[0]
        for p in np.nonzero(same[a])[0]:
            if p == a:
                continue
            if strategy == "random":
                out.append(Triplet(a, int(p), int(neg[rng.integers(neg.shape[0])])))
                continue
            d_ap = d[a, p]
            d_neg = d[a, neg]
            band = (d_neg > d_ap) & (d_neg < d_ap + margin)
            pool = neg[band] if np.any(band) else neg
            out.append(Triplet(a, int(p), int(pool[np.argmin(d[a, pool])])))
    return out


class BatchSampler:
    """Infinite "S speakers x K patches" batches from per-speaker patch pools."""

    def __init__(self, patches_by_speaker, speakers_per_batch=8, patches_per_speaker=4, seed=0):
        self.speakers = sorted(k for k, v in patches_by_speaker.items() if len(v) >= 2)
        if len(self.speakers) < 2:
            raise DegenerateBatch("need at least two speakers with two or more patches")
        self.pools = {k: np.asarray(patches_by_speaker[k]) for k in self.speakers}
        self.s = min(speakers_per_batch, len(self.speakers))
        self.k = patches_per_speaker
        self.rng = np.random.default_rng(seed)

    def __iter__(self):
        return self

    def __next__(self):
        chosen = self.rng.choice(len(self.speakers), size=self.s, replace=False)
        xs, labels = [], []
        for si in chosen:
            pool = self.pools[self.speakers[si]]
            take = self.rng.choice(pool.shape[0], size=self.k, replace=pool.shape[0] < self.k)
            xs.append(pool[take])
            labels.extend([int(si)] * self.k)
        return np.concatenate(xs, axis=0), np.array(labels)


@dataclass
class TraceRow:
    step: int
    loss: float
    active_fraction: float


@dataclass
class TrainResult:
    net: object
    trace: list = field(default_factory=list)
    stopped: str = "steps"


def train(net, batches, cfg, optimizer=None, checkpoint_path=None, dump_path=None):
    """Optimise ``net`` in place with the triplet loss.

    ``batches`` yields ``(patches, labels)``; each step runs forward, mining,
    loss, backward and one optimizer update.
    """
    optimizer = optimizer or SGD.for_config(net.config)
    rng = np.random.default_rng([cfg.seed, 0x7219])
    result = TrainResult(net)
    started = time.monotonic()
    for step_no in range(1, cfg.steps + 1):
        if cfg.max_seconds is not None and time.monotonic() - started >= cfg.max_seconds:
            result.stopped = "time"
            break
        x, labels = next(batches)
        emb = net.forward(x, training=True)
        triplets = mine_triplets(labels, pairwise_distances(emb), cfg.mining, rng, cfg.margin)
        loss, grad, active = batch_triplet_loss(emb, triplets, cfg.margin)
        if not np.isfinite(loss):
            state = {"step": step_no, "labels": labels, "embeddings": emb}
            if dump_path is not None:
                np.savez(dump_path, **state, **{k.replace(".", "_"): v for k, v in net.params.items()})
            raise NonFiniteLoss(f"loss became {loss} at step {step_no}", state)
        grads = net.backward(grad)
        optimizer.step(net.params, grads)
        result.trace.append(TraceRow(step_no, loss, active))
        if step_no % 50 == 0:
            log.info("step %d loss %.4f active %.3f", step_no, loss, active)
        if checkpoint_path and cfg.checkpoint_every and step_no % cfg.checkpoint_every == 0:
            save_checkpoint(net, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(net, checkpoint_path)
    return result


def write_trace_csv(path, trace, header=None):
    with open(path, "w", newline="") as fh:
        if header is not None:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "active_fraction"])
        for row in trace:
            w.writerow([row.step, repr(row.loss), repr(row.active_fraction)])
