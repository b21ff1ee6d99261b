"""Glue between manifests, audio, patches and the network used by the CLI."""

import csv
import json
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .audio_io import DEFAULT_PRE_EMPHASIS, condition, read_wav
from .forensic import Recording
from .spectrogram import SpectrogramConfig, sample_patches, stft_bands

SAMPLE_RATE = 16000


def recording_rng(seed, path):
    return np.random.default_rng([int(seed), zlib.crc32(path.encode("utf-8"))])


def record_patches(manifest, record, spec, count, seed, alpha=DEFAULT_PRE_EMPHASIS):
    """``count`` standardised patches of one recording, deterministic in (seed, path)."""
    clip = condition(read_wav(manifest.resolve(record), source_id=record.path), SAMPLE_RATE, alpha)
    bands = stft_bands(clip, spec)
    patches = sample_patches(
        bands, spec, count, recording_rng(seed, record.path), record.path, record.speaker_id
    )
    return patches


def manifest_patches(manifest, records, spec, count, seed, workers=1, alpha=DEFAULT_PRE_EMPHASIS):
    """Patches for every record, in record order. Threads only change wall time."""

    def work(rec):
        return record_patches(manifest, rec, spec, count, seed, alpha)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, records))
    return [work(r) for r in records]


def embed_records(net, manifest, records, spec, count, seed, workers=1, alpha=DEFAULT_PRE_EMPHASIS):
    """``{speaker: [Recording, ...]}`` with per-recording patch embeddings."""
    out = {}
    for rec, patches in zip(records, manifest_patches(manifest, records, spec, count, seed, workers, alpha)):
        values = net.embed(np.stack([p.values for p in patches])).astype(np.float64)
        out.setdefault(rec.speaker_id, []).append(Recording(rec.path, rec.speaker_id, values))
    return out


def grouped(recordings_by_speaker):
    return {s: np.concatenate([r.values for r in recs], axis=0) for s, recs in recordings_by_speaker.items()}


# -- patch tensor sidecar ----------------------------------------------------

def labels_path(tensor_path):
    return str(tensor_path) + ".labels.csv"


def write_patch_labels(path, patches, header):
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "source_id", "speaker_id", "start_ms"])
        for i, p in enumerate(patches):
            w.writerow([i, p.source_id, p.speaker_id, repr(float(p.start_ms))])


def read_patch_labels(path):
    with open(path, newline="") as fh:
        first = fh.readline()
        header = json.loads(first[1:]) if first.startswith("#") else {}
        if not first.startswith("#"):
            fh.seek(0)
        rows = list(csv.DictReader(fh))
    return header, rows


# -- checkpoint sidecar ------------------------------------------------------

def sidecar_path(checkpoint_path):
    return str(checkpoint_path) + ".json"


def write_sidecar(checkpoint_path, payload):
    with open(sidecar_path(checkpoint_path), "w") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def read_sidecar(checkpoint_path):
    with open(sidecar_path(checkpoint_path)) as fh:
        return json.load(fh)


def spec_from_dict(d):
    return SpectrogramConfig(
        t_ms=d["t_ms"], w_ms=d["w_ms"], h_ms=d["h_ms"], n_bins=d.get("n_bins", 256), f_max_hz=d.get("f_max_hz", 8500.0)
    )
