import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tripletvoice.audio_io import (
    AudioClip,
    condition,
    encode_wav,
    parse_wav,
    pre_emphasize,
    read_wav,
    resample,
    write_wav,
)
from tripletvoice.errors import EmptyAudio, MalformedContainer, UnsupportedEncoding


def pcm16(frames, rate=16000, channels=1, fmt=1):
    """Hand-built RIFF file, independent of the toolkit writer."""
    data = np.asarray(frames, dtype="<i2").tobytes()
    fmt_chunk = struct.pack("<HHIIHH", fmt, channels, rate, rate * channels * 2, channels * 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt_chunk + b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


def sine(freq, seconds, rate, amp=0.5):
    n = int(round(seconds * rate))
    return AudioClip(amp * np.sin(2 * np.pi * freq * np.arange(n) / rate), rate)


def peak_hz(x, rate):
    spec = np.abs(np.fft.rfft(x * np.hanning(x.size)))
    return np.argmax(spec) * rate / x.size


def test_single_frame_value():
    clip = parse_wav(pcm16([16384]))
    assert clip.samples.tolist() == [0.5]
    assert clip.sample_rate_hz == 16000


def test_stereo_is_averaged():
    clip = parse_wav(pcm16([1000, 3000], channels=2))
    assert clip.samples.shape == (1,)
    assert clip.samples[0] == pytest.approx(2000 / 32768)
    assert clip.samples[0] == pytest.approx(0.06104, abs=1e-5)


def test_24_bit_and_extra_chunks():
    vals = np.array([-(1 << 23), 0, (1 << 22)], dtype=np.int64)
    raw = b"".join(int(v & 0xFFFFFF).to_bytes(3, "little") for v in vals)
    fmt_chunk = struct.pack("<HHIIHH", 1, 1, 8000, 8000 * 3, 3, 24)
    body = (b"WAVE" + b"LIST" + struct.pack("<I", 3) + b"abc\x00"
            + b"fmt " + struct.pack("<I", 16) + fmt_chunk
            + b"data" + struct.pack("<I", len(raw)) + raw + b"\x00")
    clip = parse_wav(b"RIFF" + struct.pack("<I", len(body)) + body)
    np.testing.assert_array_equal(clip.samples, [-1.0, 0.0, 0.5])


def test_errors():
    with pytest.raises(MalformedContainer):
        parse_wav(b"RIFX" + b"\x00" * 40)
    with pytest.raises(MalformedContainer):
        parse_wav(pcm16([1, 2, 3])[:30])
    with pytest.raises(UnsupportedEncoding):
        parse_wav(pcm16([1, 2], fmt=3))
    with pytest.raises(EmptyAudio):
        parse_wav(pcm16([]))


def test_sine_round_trip_bit_exact(tmp_path):
    clip = sine(440, 1.0, 16000)
    path = tmp_path / "a.wav"
    write_wav(path, clip)
    once = read_wav(path)
    np.testing.assert_array_equal(parse_wav(encode_wav(once)).samples, once.samples)
    # the first parse already lands on the 16-bit grid
    assert np.max(np.abs(once.samples - clip.samples)) <= 0.5 / 32768 + 1e-12


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.integers(-32768, 32767), min_size=1, max_size=300),
    st.sampled_from([8000, 11025, 16000, 22050, 44100, 48000]),
)
def test_round_trip_property(frames, rate):
    clip = parse_wav(pcm16(frames, rate))
    again = parse_wav(encode_wav(clip))
    assert again.sample_rate_hz == rate
    np.testing.assert_array_equal(again.samples, clip.samples)
    assert encode_wav(clip) == pcm16(frames, rate)


def test_resample_identity():
    clip = sine(440, 0.3, 16000)
    out = resample(clip, 16000)
    assert out.same_content(clip)


def test_resample_44100_peak():
    out = resample(sine(440, 1.0, 44100), 16000)
    assert out.sample_rate_hz == 16000
    assert out.samples.size == 16000
    assert abs(peak_hz(out.samples, 16000) - 440) <= 2


def test_resample_length():
    out = resample(sine(100, 0.5, 8000), 16000)
    assert out.samples.size == 8000


def test_resample_keeps_passband_amplitude():
    out = resample(sine(1000, 1.0, 48000), 16000)
    mid = out.samples[2000:-2000]
    assert np.max(np.abs(mid)) == pytest.approx(0.5, rel=0.01)


def test_pre_emphasis_closed_forms():
    x = AudioClip(np.array([0.5, -0.5]), 16000)
    np.testing.assert_allclose(pre_emphasize(x, 0.97).samples, [0.5, -0.985])
    ones = AudioClip(np.ones(5), 16000)
    np.testing.assert_allclose(pre_emphasize(ones, 0.97).samples, [1.0, 0.03, 0.03, 0.03, 0.03])
    assert pre_emphasize(x, 0.0).same_content(x)
    with pytest.raises(ValueError):
        pre_emphasize(x, 1.0)


def test_condition_resamples_then_emphasizes():
    clip = sine(300, 0.5, 8000)
    out = condition(clip, 16000, 0.97)
    ref = pre_emphasize(resample(clip, 16000), 0.97)
    assert out.same_content(ref)
