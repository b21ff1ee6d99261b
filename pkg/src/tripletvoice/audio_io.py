"""RIFF/WAVE PCM reading and writing, resampling and pre-emphasis."""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import EmptyAudio, MalformedContainer, UnsupportedEncoding

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
# KSDATAFORMAT_SUBTYPE_PCM GUID, little-endian
_PCM_SUBFORMAT = b"\x01\x00\x00\x00\x00\x00\x10\x00\x80\x00\x00\xaa\x00\x38\x9b\x71"

DEFAULT_PRE_EMPHASIS = 0.97
RESAMPLE_TAPS = 64
KAISER_BETA = 8.6


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional (mono)")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self):
        return len(self) / self.sample_rate_hz

    def same_content(self, other):
        return (
            self.sample_rate_hz == other.sample_rate_hz
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
        )


def _iter_chunks(data, offset):
    end = len(data)
    while offset < end:
        if offset + 8 > end:
            raise MalformedContainer("truncated chunk header")
        chunk_id = data[offset : offset + 4]
        (size,) = struct.unpack_from("<I", data, offset + 4)
        body_start = offset + 8
        body_end = body_start + size
        if body_end > end:
            raise MalformedContainer(f"chunk {chunk_id!r} declares {size} bytes past end of file")
        yield chunk_id, data[body_start:body_end]
        offset = body_end + (size & 1)


def _decode_pcm(raw, bits, channels):
    width = bits // 8
    frame_bytes = width * channels
    n_frames = len(raw) // frame_bytes
    raw = raw[: n_frames * frame_bytes]
    if bits == 8:
        ints = np.frombuffer(raw, dtype=np.uint8).astype(np.int64) - 128
    elif bits == 16:
        ints = np.frombuffer(raw, dtype="<i2").astype(np.int64)
    elif bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int64)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
    elif bits == 32:
        ints = np.frombuffer(raw, dtype="<i4").astype(np.int64)
    else:
        raise UnsupportedEncoding(f"unsupported PCM bit depth {bits}")
    scaled = ints.astype(np.float64) / float(1 << (bits - 1))
    return scaled.reshape(n_frames, channels)


def parse_wav(data, source_id=""):
    """Decode a RIFF/WAVE byte string into a mono :class:`AudioClip`.

    Integer PCM of 8, 16, 24 or 32 bits is accepted; channels are averaged.
    """
    data = bytes(data)
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedContainer("missing RIFF/WAVE magic")
    (riff_size,) = struct.unpack_from("<I", data, 4)
    if riff_size + 8 > len(data) or riff_size < 4:
        raise MalformedContainer(f"RIFF size {riff_size} inconsistent with {len(data)} bytes")

    fmt = None
    payload = None
    for chunk_id, body in _iter_chunks(data[: riff_size + 8], 12):
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise MalformedContainer("fmt chunk shorter than 16 bytes")
            fmt = body
        elif chunk_id == b"data":
            payload = body
    if fmt is None:
        raise MalformedContainer("no fmt chunk")
    if payload is None:
        raise MalformedContainer("no data chunk")

    tag, channels, rate, _byte_rate, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 40 or fmt[24:40] != _PCM_SUBFORMAT:
            raise UnsupportedEncoding("WAVE_FORMAT_EXTENSIBLE with non-PCM subformat")
    elif tag != WAVE_FORMAT_PCM:
        raise UnsupportedEncoding(f"format tag 0x{tag:04x} is not integer PCM")
    if channels < 1 or rate == 0 or bits % 8 or bits == 0:
        raise MalformedContainer(f"invalid fmt fields: channels={channels} rate={rate} bits={bits}")
    if block_align != channels * bits // 8:
        raise MalformedContainer(f"block_align {block_align} does not match {channels}x{bits} bits")

    frames = _decode_pcm(payload, bits, channels)
    if frames.shape[0] == 0:
        raise EmptyAudio("data chunk holds zero frames")
    mono = frames[:, 0] if channels == 1 else frames.mean(axis=1)
    return AudioClip(mono, int(rate), source_id)


def read_wav(path, source_id=None):
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_wav(data, source_id=str(path) if source_id is None else source_id)


def encode_wav(clip):
    """Encode as 16-bit little-endian mono PCM; values are clipped to [-1, 1)."""
    ints = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    rate = int(clip.sample_rate_hz)
    fmt = struct.pack("<HHIIHH", WAVE_FORMAT_PCM, 1, rate, rate * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, clip):
    with open(path, "wb") as fh:
        fh.write(encode_wav(clip))


def _kaiser(x, half_width, beta):
    r = np.clip(x / half_width, -1.0, 1.0)
    return np.i0(beta * np.sqrt(1.0 - r * r)) / np.i0(beta)


def _polyphase_table(up, down, taps, beta):
    # one row of taps per fractional output phase p/up
    cutoff = min(1.0, up / down) * 0.94
    half = taps // 2
    offsets = np.arange(-half + 1, half + 1, dtype=np.float64)
    phases = np.arange(up, dtype=np.float64)[:, None] / up
    x = phases - offsets[None, :]  # distance from output instant to each input tap
    h = cutoff * np.sinc(cutoff * x) * _kaiser(x, half, beta)
    return h / h.sum(axis=1, keepdims=True)


def resample(clip, target_rate_hz, taps=RESAMPLE_TAPS, beta=KAISER_BETA, chunk=1 << 15):
    """Band-limited rate conversion with a Kaiser-windowed sinc polyphase filter."""
    if target_rate_hz <= 0:
        raise ValueError("target_rate_hz must be positive")
    source = int(clip.sample_rate_hz)
    target = int(target_rate_hz)
    if source == target:
        return AudioClip(clip.samples.copy(), source, clip.source_id)

    g = math.gcd(source, target)
    up, down = target // g, source // g
    n_in = len(clip)
    n_out = (2 * n_in * target + source) // (2 * source)
    table = _polyphase_table(up, down, taps, beta)
    half = taps // 2
    x = np.concatenate([np.zeros(half), clip.samples, np.zeros(half + 1)])
    offsets = np.arange(-half + 1, half + 1)

    out = np.empty(n_out, dtype=np.float64)
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(start + chunk, n_out), dtype=np.int64)
        pos = n * down
        base = pos // up
        phase = pos % up
        idx = base[:, None] + offsets[None, :] + half
        idx = np.clip(idx, 0, x.shape[0] - 1)
        out[start : start + n.shape[0]] = np.einsum("ij,ij->i", x[idx], table[phase])
    return AudioClip(out, target, clip.source_id)


def pre_emphasize(clip, alpha=DEFAULT_PRE_EMPHASIS):
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    x = clip.samples
    y = x.copy()
    y[1:] = x[1:] - alpha * x[:-1]
    return AudioClip(y, clip.sample_rate_hz, clip.source_id)


def condition(clip, sample_rate_hz=16000, alpha=DEFAULT_PRE_EMPHASIS):
    """Resample to the canonical rate and apply pre-emphasis."""
    return pre_emphasize(resample(clip, sample_rate_hz), alpha)
