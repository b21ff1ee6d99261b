"""Genuine/impostor case construction and the two distance-based LR scores."""

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateCalibration,
    EmptyPopulation,
    InsufficientPopulation,
    SingleSpeaker,
)
from .quality import centroid

log = logging.getLogger(__name__)

REFERENCE_RECORDINGS = 3
PATCHES_PER_RECORDING = 15
POPULATION_SIZE = 100
LR_DR_CAP = 1e12
DEGENERATE_DISTANCE = 1e-9


@dataclass(frozen=True, eq=False)
class Recording:
    """Patch embeddings of one recording, ``values`` of shape (n_patches, dim)."""

    recording_id: str
    speaker_id: str
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class ForensicCase:
    case_id: str
    truth: str  # "genuine" or "impostor"
    reference_speaker: str
    questioned_speaker: str
    reference: np.ndarray
    questioned: np.ndarray
    population: tuple  # of (n_i, dim) arrays
    population_speakers: tuple
    reference_recordings: tuple = ()
    questioned_recording: str = ""

    def roster_row(self):
        return {
            "case_id": self.case_id,
            "truth": self.truth,
            "reference_speaker": self.reference_speaker,
            "reference_recordings": list(self.reference_recordings),
            "questioned_speaker": self.questioned_speaker,
            "questioned_recording": self.questioned_recording,
            "population_speakers": list(self.population_speakers),
        }


@dataclass(frozen=True)
class CalibrationConstant:
    N: float
    provenance: str = ""

    def __post_init__(self):
        if not self.N > 0:
            raise DegenerateCalibration(f"normaliser must be positive, got {self.N}")

    def to_dict(self):
        return {"N": self.N, "provenance": self.provenance}


@dataclass
class CaseBuildResult:
    cases: list
    skipped: dict = field(default_factory=dict)  # speaker -> reason


def _sample_rows(values, count, rng):
    n = values.shape[0]
    idx = rng.choice(n, size=count, replace=n < count)
    return values[np.sort(idx)]


def _speaker_sample_set(recordings, rng, per_recording=PATCHES_PER_RECORDING, n_recordings=REFERENCE_RECORDINGS):
    """45 samples: 15 from each of 3 recordings when available, else 45 pooled."""
    picks = rng.choice(len(recordings), size=min(n_recordings, len(recordings)), replace=False)
    chosen = [recordings[i] for i in sorted(picks)]
    if len(chosen) == n_recordings:
        parts = [_sample_rows(r.values, per_recording, rng) for r in chosen]
        return np.concatenate(parts, axis=0), tuple(r.recording_id for r in chosen)
    pooled = np.concatenate([r.values for r in chosen], axis=0)
    total = per_recording * n_recordings
    return _sample_rows(pooled, total, rng), tuple(r.recording_id for r in chosen)


def build_cases(recordings_by_speaker, seed, population_size=POPULATION_SIZE, cases_per_speaker=1):
    """One genuine and one impostor case per eligible speaker (``cases_per_speaker`` times).

    Genuine: three recordings of the speaker form the reference, a fourth is the
    questioned sample. Impostor: the questioned recording comes from another
    speaker outside the population. The population is ``population_size``
    speakers disjoint from both the reference and questioned speakers.
    """
    speakers = sorted(recordings_by_speaker)
    needed = population_size + 2
    if len(speakers) < needed:
        raise InsufficientPopulation(
            f"{len(speakers)} speakers; a {population_size}-speaker population plus "
            f"reference and impostor needs {needed}"
        )
    rng = np.random.default_rng([int(seed), 0xCA5E])
    result = CaseBuildResult([])
    for spk in speakers:
        recs = list(recordings_by_speaker[spk])
        if len(recs) < REFERENCE_RECORDINGS + 1:
            result.skipped[spk] = f"only {len(recs)} recordings"
            continue
        others = [s for s in speakers if s != spk]
        for rep in range(cases_per_speaker):
            order = rng.permutation(len(recs))
            ref_recs = [recs[i] for i in sorted(order[:REFERENCE_RECORDINGS])]
            reference = np.concatenate(
                [_sample_rows(r.values, PATCHES_PER_RECORDING, rng) for r in ref_recs], axis=0
            )
            ref_ids = tuple(r.recording_id for r in ref_recs)

            # genuine
            q_rec = recs[order[REFERENCE_RECORDINGS]]
            pop_ids = _draw(others, population_size, rng)
            result.cases.append(
                _make_case(f"{spk}-{rep}-g", "genuine", spk, spk, reference, q_rec, ref_ids, pop_ids, recordings_by_speaker, rng)
            )

            # impostor
            imp = others[int(rng.integers(len(others)))]
            pool = [s for s in others if s != imp]
            pop_ids = _draw(pool, population_size, rng)
            imp_recs = recordings_by_speaker[imp]
            q_rec = imp_recs[int(rng.integers(len(imp_recs)))]
            result.cases.append(
                _make_case(f"{spk}-{rep}-i", "impostor", spk, imp, reference, q_rec, ref_ids, pop_ids, recordings_by_speaker, rng)
            )
    if result.skipped:
        log.warning("skipped %d speakers without a fourth recording", len(result.skipped))
    return result


def _draw(speakers, count, rng):
    idx = rng.choice(len(speakers), size=count, replace=False)
    return tuple(sorted(speakers[i] for i in idx))


def _make_case(case_id, truth, ref_spk, q_spk, reference, q_rec, ref_ids, pop_ids, by_speaker, rng):
    population = []
    for p in pop_ids:
        values, _ = _speaker_sample_set(list(by_speaker[p]), rng)
        population.append(values)
    questioned = _sample_rows(q_rec.values, PATCHES_PER_RECORDING, rng)
    case = ForensicCase(
        case_id=case_id,
        truth=truth,
        reference_speaker=ref_spk,
        questioned_speaker=q_spk,
        reference=reference,
        questioned=questioned,
        population=tuple(population),
        population_speakers=pop_ids,
        reference_recordings=ref_ids,
        questioned_recording=q_rec.recording_id,
    )
    if ref_spk in pop_ids or q_spk in pop_ids:
        raise AssertionError(f"case {case_id}: population overlaps reference or questioned speaker")
    return case


def _dist(a, b):
    return float(np.sqrt(np.sum((np.asarray(a, dtype=np.float64) - b) ** 2)))


def lr_d(case, cal):
    """Questioned-to-reference centroid distance over the normaliser N; lower favours same speaker."""
    return _dist(centroid(case.questioned), centroid(case.reference)) / cal.N


def lr_dr_flagged(case):
    if len(case.population) == 0:
        raise EmptyPopulation("LR_DR needs at least one population speaker")
    q = centroid(case.questioned)
    r = centroid(case.reference)
    nearest = min(_dist(q, centroid(p)) for p in case.population)
    d_rq = _dist(r, q)
    if d_rq < DEGENERATE_DISTANCE:
        return LR_DR_CAP, True
    return min(nearest / d_rq, LR_DR_CAP), False


def lr_dr(case):
    """Nearest population centroid distance over reference distance; higher favours same speaker."""
    return lr_dr_flagged(case)[0]


def calibrate_N(groups, percentile=99.0, provenance="training split"):
    """99th percentile (linear interpolation) of inter-speaker centroid distances.

    ``groups`` maps speaker to an (n_i, dim) array of embeddings.
    """
    speakers = sorted(groups)
    if len(speakers) < 2:
        raise SingleSpeaker("calibration needs at least two speakers")
    cents = np.stack([centroid(groups[s]) for s in speakers])
    iu = np.triu_indices(len(speakers), k=1)
    diff = cents[:, None, :] - cents[None, :, :]
    d = np.sqrt(np.sum(diff**2, axis=-1))[iu]
    value = float(np.percentile(d, percentile))
    if not value > 0:
        raise DegenerateCalibration("training centroids coincide; N would be 0")
    return CalibrationConstant(value, f"p{percentile:g} of {d.shape[0]} centroid distances, {provenance}")


@dataclass
class CaseScore:
    case_id: str
    truth: str
    lr_d: float
    lr_dr: float
    flags: tuple = ()


def score_case(case, cal):
    value, degenerate = lr_dr_flagged(case)
    return CaseScore(case.case_id, case.truth, lr_d(case, cal), value, ("degenerate_distance",) if degenerate else ())


def write_scores_csv(path, scores, header=None):
    with open(path, "w", newline="") as fh:
        if header is not None:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "truth", "lr_d", "lr_dr", "flags"])
        for s in scores:
            w.writerow([s.case_id, s.truth, repr(s.lr_d), repr(s.lr_dr), ";".join(s.flags)])


def read_scores_csv(path):
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    out = []
    for row in csv.DictReader(rows):
        flags = tuple(f for f in row["flags"].split(";") if f)
        out.append(CaseScore(row["case_id"], row["truth"], float(row["lr_d"]), float(row["lr_dr"]), flags))
    return out
