"""Hann-window spectrogram bands and fixed-height patches for the embedding net."""

import csv
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ClipTooShort, OutOfRange

N_BINS = 256


@dataclass(frozen=True)
class SpectrogramConfig:
    t_ms: float = 2000
    w_ms: float = 100
    h_ms: float = 50
    n_bins: int = N_BINS
    f_max_hz: float = 8500.0

    def __post_init__(self):
        if not 0 < self.h_ms <= self.w_ms <= self.t_ms:
            raise ValueError(
                f"need 0 < h_ms <= w_ms <= t_ms, got t={self.t_ms} w={self.w_ms} h={self.h_ms}"
            )
        if self.n_bins != N_BINS:
            raise ValueError(f"n_bins is fixed at {N_BINS}")
        if self.f_max_hz <= 0:
            raise ValueError("f_max_hz must be positive")

    @property
    def width(self):
        return patch_width(self.t_ms, self.h_ms)

    def as_dict(self):
        return {
            "t_ms": self.t_ms,
            "w_ms": self.w_ms,
            "h_ms": self.h_ms,
            "n_bins": self.n_bins,
            "f_max_hz": self.f_max_hz,
        }


@dataclass(frozen=True, eq=False)
class SpectrogramPatch:
    values: np.ndarray  # (W, 256), time-major
    config: SpectrogramConfig
    start_ms: float = 0.0
    source_id: str = ""
    speaker_id: str = ""

    @property
    def width(self):
        return self.values.shape[0]


def patch_width(t_ms, h_ms):
    """Number of hop-aligned frames in a patch of ``t_ms`` milliseconds."""
    if not t_ms >= h_ms > 0:
        raise ValueError(f"need t_ms >= h_ms > 0, got {t_ms}, {h_ms}")
    if isinstance(t_ms, int) and isinstance(h_ms, int):
        return t_ms // h_ms
    return int(math.floor(t_ms / h_ms + 1e-9))


def _band_matrix(n_fft, sample_rate, f_max, n_bins):
    """(n_fft//2+1, n_bins) averaging matrix from one-sided FFT bins onto linear bands."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    band_width = f_max / n_bins
    band = np.floor(freqs / band_width + 1e-9).astype(np.int64)
    band[np.isclose(freqs, f_max)] = n_bins - 1
    m = np.zeros((freqs.shape[0], n_bins))
    inside = band < n_bins
    m[np.nonzero(inside)[0], band[inside]] = 1.0
    counts = m.sum(axis=0)
    # bands narrower than the bin spacing take the bin nearest their centre
    for b in np.nonzero(counts == 0)[0]:
        centre = (b + 0.5) * band_width
        m[int(np.argmin(np.abs(freqs - centre))), b] = 1.0
    return m / m.sum(axis=0, keepdims=True)


def frame_params(config, sample_rate):
    win = int(round(config.w_ms * sample_rate / 1000.0))
    hop = int(round(config.h_ms * sample_rate / 1000.0))
    n_fft = 1 << (win - 1).bit_length()
    return win, hop, n_fft


def stft_bands(clip, config):
    """Log-magnitude band matrix of shape (frames, 256) for the whole recording."""
    sr = clip.sample_rate_hz
    win, hop, n_fft = frame_params(config, sr)
    x = clip.samples
    if x.shape[0] < win:
        raise ClipTooShort(f"{x.shape[0]} samples cannot hold one {win}-sample window")
    n_frames = (x.shape[0] - win) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    mag = np.abs(np.fft.rfft(frames * window, n=n_fft, axis=1))
    f_max = min(config.f_max_hz, sr / 2.0)
    bands = mag @ _band_matrix(n_fft, sr, f_max, config.n_bins)
    return np.log1p(bands)


def standardize(values):
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean()
    std = values.std()
    if std < 1e-12:
        return np.zeros_like(values)
    return (values - mean) / std


def extract_patch(bands, start_frame, config, source_id="", speaker_id=""):
    w = config.width
    if start_frame < 0 or start_frame + w > bands.shape[0]:
        raise OutOfRange(
            f"patch of {w} frames at {start_frame} does not fit in {bands.shape[0]} frames"
        )
    values = standardize(bands[start_frame : start_frame + w])
    return SpectrogramPatch(
        values,
        config,
        start_ms=start_frame * config.h_ms,
        source_id=source_id,
        speaker_id=speaker_id,
    )


def sample_patches(bands, config, count, rng, source_id="", speaker_id=""):
    """Draw ``count`` patches at uniformly random start frames.

    Starts are distinct when enough positions exist, otherwise drawn with
    replacement.
    """
    positions = bands.shape[0] - config.width + 1
    if positions < 1:
        raise ClipTooShort(
            f"{bands.shape[0]} frames cannot hold a {config.width}-frame patch"
        )
    starts = rng.choice(positions, size=count, replace=positions < count)
    return [extract_patch(bands, int(s), config, source_id, speaker_id) for s in starts]


# Patch tensor dump: three little-endian uint32 (W, 256, count) then float32 data.

def write_patch_tensor(path, patches):
    arr = np.stack([np.asarray(p.values if hasattr(p, "values") else p) for p in patches])
    count, w, h = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", w, h, count))
        fh.write(arr.astype("<f4").tobytes())


def read_patch_tensor(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise ValueError(f"{path}: missing patch tensor header")
    w, h, count = struct.unpack_from("<III", data, 0)
    expected = 12 + 4 * w * h * count
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(count, w, h).copy()


def write_bands_csv(path, bands, config, sample_rate=16000):
    f_max = min(config.f_max_hz, sample_rate / 2.0)
    centres = (np.arange(config.n_bins) + 0.5) * f_max / config.n_bins
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps({**config.as_dict(), "sample_rate_hz": sample_rate}, sort_keys=True) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time_ms"] + [f"{c:.3f}" for c in centres])
        for i, row in enumerate(bands):
            writer.writerow([f"{i * config.h_ms:g}"] + [repr(float(v)) for v in row])
