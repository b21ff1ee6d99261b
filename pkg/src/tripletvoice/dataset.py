"""Manifest handling, speaker-disjoint splits, subgroup filters and synthetic speakers."""

import json
import logging
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .audio_io import AudioClip
from .errors import DuplicatePath, ParseError, TooFewSpeakers

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")

_GENDER = {
    "f": "F", "female": "F", "woman": "F", "mujer": "F", "femenino": "F",
    "m": "M", "male": "M", "man": "M", "hombre": "M", "masculino": "M",
}
_AGE = {
    "youth": "youth", "joven": "youth", "13-17": "youth",
    "adult": "adult", "adulto": "adult", "18-64": "adult",
    "senior": "senior", "65+": "senior", "65 or greater": "senior",
}
_NATIVE = {
    "yes": "yes", "y": "yes", "true": "yes", "si": "yes", "sí": "yes",
    "no": "no", "n": "no", "false": "no",
}


@dataclass(frozen=True)
class RecordingMeta:
    path: str
    speaker_id: str
    gender: str = "unknown"
    age_group: str = "unknown"
    native: str = "unknown"
    dialect: str = ""
    duration_s: float = 1.0
    split: str | None = None

    def __post_init__(self):
        if not self.speaker_id:
            raise ValueError("speaker_id must be non-empty")
        if not self.duration_s > 0:
            raise ValueError(f"duration_s must be positive, got {self.duration_s}")
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def to_json(self):
        d = {
            "path": self.path,
            "speaker_id": self.speaker_id,
            "gender": self.gender,
            "age_group": self.age_group,
            "native": self.native,
            "dialect": self.dialect,
            "duration_s": self.duration_s,
        }
        if self.split is not None:
            d["split"] = self.split
        return d


@dataclass(frozen=True)
class Manifest:
    records: tuple
    split_seed: int = 0
    root: str = ""
    unknown_values: int = 0

    def speakers(self):
        return sorted({r.speaker_id for r in self.records})

    def by_speaker(self):
        out = {}
        for r in self.records:
            out.setdefault(r.speaker_id, []).append(r)
        return out

    def resolve(self, record):
        if os.path.isabs(record.path) or not self.root:
            return record.path
        return os.path.join(self.root, record.path)

    def __len__(self):
        return len(self.records)


def _fold(value, table, field_name, counter):
    if value is None:
        return "unknown"
    key = str(value).strip().lower()
    if key in ("", "unknown"):
        return "unknown"
    if key in table:
        return table[key]
    if field_name == "age_group" and key.isdigit():
        age = int(key)
        return "youth" if age < 18 else "adult" if age < 65 else "senior"
    counter[0] += 1
    return "unknown"


def parse_record(obj, counter):
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    for key in ("path", "speaker_id"):
        if key not in obj:
            raise ValueError(f"missing field {key!r}")
    duration = float(obj.get("duration_s", 1.0))
    split = obj.get("split")
    return RecordingMeta(
        path=str(obj["path"]),
        speaker_id=str(obj["speaker_id"]),
        gender=_fold(obj.get("gender"), _GENDER, "gender", counter),
        age_group=_fold(obj.get("age_group"), _AGE, "age_group", counter),
        native=_fold(obj.get("native"), _NATIVE, "native", counter),
        dialect=str(obj.get("dialect") or ""),
        duration_s=duration,
        split=split if split else None,
    )


def parse_manifest_lines(lines, root="", split_seed=0):
    records = []
    seen = set()
    counter = [0]
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        try:
            rec = parse_record(json.loads(text), counter)
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            raise ParseError(lineno, str(exc)) from exc
        if rec.path in seen:
            raise DuplicatePath(f"line {lineno}: duplicate path {rec.path!r}")
        seen.add(rec.path)
        records.append(rec)
    if counter[0]:
        log.warning("%d unrecognised enum values mapped to 'unknown'", counter[0])
    return Manifest(tuple(records), split_seed=split_seed, root=root, unknown_values=counter[0])


def load_manifest(path, split_seed=0):
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    root = os.path.dirname(os.path.abspath(path))
    return parse_manifest_lines(lines, root=root, split_seed=split_seed)


def write_manifest(path, records, header=None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def split_speakers(manifest, fractions=(0.8, 0.1, 0.1), seed=0):
    """Assign each speaker to train/validation/test, speaker-disjoint.

    Speakers are shuffled by ``seed``; validation and test sizes are floored and
    the remainder goes to training. Speakers carrying an explicit ``split`` in the
    manifest keep it and are excluded from the shuffle.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    speakers = manifest.speakers()
    if len(speakers) < 3:
        raise TooFewSpeakers(f"need at least 3 speakers, found {len(speakers)}")

    assignment = {}
    for r in manifest.records:
        if r.split is not None:
            prev = assignment.setdefault(r.speaker_id, r.split)
            if prev != r.split:
                raise ValueError(f"speaker {r.speaker_id!r} has conflicting split overrides")
    free = [s for s in speakers if s not in assignment]
    order = np.random.default_rng(seed).permutation(len(free))
    shuffled = [free[i] for i in order]
    n = len(shuffled)
    n_val = int(math.floor(n * fractions[1] + 1e-9))
    n_test = int(math.floor(n * fractions[2] + 1e-9))
    for i, spk in enumerate(shuffled):
        if i < n_val:
            assignment[spk] = "validation"
        elif i < n_val + n_test:
            assignment[spk] = "test"
        else:
            assignment[spk] = "train"
    return assignment


def apply_split(manifest, assignment):
    records = tuple(replace(r, split=assignment[r.speaker_id]) for r in manifest.records)
    return replace(manifest, records=records)


def _matches(value, wanted):
    if isinstance(wanted, (set, frozenset, list, tuple)):
        return value in wanted
    return value == wanted


def filter_manifest(manifest, predicate=None, **criteria):
    """Record-preserving subset.

    ``criteria`` match RecordingMeta fields against a value or a collection of
    values, e.g. ``gender="F"`` or ``dialect={"Spain"}``.
    """
    unknown = set(criteria) - set(RecordingMeta.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown filter fields: {sorted(unknown)}")
    kept = []
    for r in manifest.records:
        if predicate is not None and not predicate(r):
            continue
        if all(_matches(getattr(r, k), v) for k, v in criteria.items()):
            kept.append(r)
    return replace(manifest, records=tuple(kept))


filter = filter_manifest  # noqa: A001


def parse_filter_expr(expr):
    """``"gender=F"`` or ``"dialect=Spain|Mexico"`` -> (field, value-or-set)."""
    if "=" not in expr:
        raise ValueError(f"filter {expr!r} must look like field=value")
    key, value = expr.split("=", 1)
    key = key.strip()
    values = [v.strip() for v in value.split("|")]
    if key == "gender":
        values = [_GENDER.get(v.lower(), v) for v in values]
    return key, (values[0] if len(values) == 1 else set(values))


# -- synthetic speakers ------------------------------------------------------

F0_MIN_HZ = 90.0
F0_STEP_HZ = 5.0
F0_LATTICE = 39  # 90, 95, ..., 280 Hz
_F0_STRIDE = 23  # coprime with F0_LATTICE


def speaker_f0(speaker_seed):
    """Fundamental of a synthetic speaker; injective on any 39 consecutive seeds."""
    return F0_MIN_HZ + F0_STEP_HZ * ((speaker_seed * _F0_STRIDE) % F0_LATTICE)


@dataclass(frozen=True)
class SpeakerVoice:
    f0_hz: float
    formants_hz: tuple
    bandwidths_hz: tuple
    tilt: float
    vibrato_hz: float
    vibrato_depth_hz: float = 0.4


def speaker_voice(speaker_seed):
    rng = np.random.default_rng([int(speaker_seed), 0x5EED])
    formants = (
        float(rng.uniform(300, 900)),
        float(rng.uniform(950, 2400)),
        float(rng.uniform(2500, 3800)),
    )
    bandwidths = tuple(float(b) for b in rng.uniform(80, 220, size=3))
    return SpeakerVoice(
        f0_hz=speaker_f0(speaker_seed),
        formants_hz=formants,
        bandwidths_hz=bandwidths,
        tilt=float(rng.uniform(0.8, 1.6)),
        vibrato_hz=float(rng.uniform(4.0, 7.0)),
    )


def _smooth_noise(rng, n, sample_rate, cutoff_hz):
    # linearly interpolated coarse noise, normalised to unit peak
    k = max(1, int(sample_rate / cutoff_hz))
    coarse = rng.standard_normal(n // k + 2)
    fine = np.interp(np.arange(n) / k, np.arange(coarse.shape[0]), coarse)
    return fine / (np.max(np.abs(fine)) + 1e-12)


def synth_speaker_clip(speaker_seed, utterance_seed, duration_s=3.0, sample_rate=16000, snr_db=30.0):
    """Deterministic harmonic "voice" for corpus-free experiments.

    The speaker seed fixes pitch, three resonances, spectral tilt and vibrato
    rate; the utterance seed drives the loudness envelope, pitch jitter,
    harmonic phases and additive noise.
    """
    if duration_s < 2.5:
        raise ValueError("duration_s must be at least 2.5 s")
    voice = speaker_voice(speaker_seed)
    rng = np.random.default_rng([int(speaker_seed), int(utterance_seed), 0xA11])
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    f0_offset = rng.uniform(-0.25, 0.25)
    jitter = 0.15 * _smooth_noise(rng, n, sample_rate, 20.0)
    vib_phase = rng.uniform(0, 2 * np.pi)
    f_inst = (
        voice.f0_hz
        + f0_offset
        + jitter
        + voice.vibrato_depth_hz * np.sin(2 * np.pi * voice.vibrato_hz * t + vib_phase)
    )
    phase = 2 * np.pi * np.cumsum(f_inst) / sample_rate

    n_harm = int((0.48 * sample_rate) // voice.f0_hz)
    k = np.arange(1, n_harm + 1)
    fk = k * voice.f0_hz
    res = np.zeros_like(fk)
    for fc, bw in zip(voice.formants_hz, voice.bandwidths_hz):
        res = np.maximum(res, 1.0 / (1.0 + ((fk - fc) / (bw / 2.0)) ** 2))
    amps = k ** (-voice.tilt) * (0.15 + 0.85 * res)
    amps[0] = 1.0
    theta = rng.uniform(0, 2 * np.pi, size=n_harm)

    signal = np.zeros(n)
    for a, kk, th in zip(amps, k, theta):
        signal += a * np.sin(kk * phase + th)

    # syllable-like loudness envelope, never fully silent
    env = 0.55 + 0.45 * np.abs(_smooth_noise(rng, n, sample_rate, rng.uniform(3.0, 6.0)))
    signal *= env
    rms = np.sqrt(np.mean(signal**2))
    noise = rng.standard_normal(n) * rms * 10 ** (-snr_db / 20.0)
    signal = signal + noise
    signal *= 0.5 / np.max(np.abs(signal))
    return AudioClip(signal, sample_rate, f"spk{speaker_seed:04d}_utt{utterance_seed:04d}")


_SYNTH_DIALECTS = ("Spain", "Argentina", "Mexico", "Chile", "Latin America")


def synth_meta(speaker_seed, utterance_seed, duration_s, path):
    voice = speaker_voice(speaker_seed)
    rng = np.random.default_rng([int(speaker_seed), 0xD1A])
    return RecordingMeta(
        path=path,
        speaker_id=f"spk{speaker_seed:04d}",
        gender="F" if voice.f0_hz >= 165.0 else "M",
        age_group="adult",
        native="yes",
        dialect=_SYNTH_DIALECTS[int(rng.integers(len(_SYNTH_DIALECTS)))],
        duration_s=float(duration_s),
    )
