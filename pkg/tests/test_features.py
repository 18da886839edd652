import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrser.errors import FeatureError
from attrser.features import (
    LOG_FLOOR,
    AugmentSpec,
    FBankFeatures,
    Waveform,
    compute_fbanks,
    fix_length,
    frame_count,
    load_waveform,
    mel_center_frequencies,
    normalize_waveform,
    read_fbank_file,
    read_wav,
    resample,
    spec_augment,
    write_fbank_file,
    write_wav,
)

SR = 16000


def reference_fbanks(samples, sr=SR, num_bins=80, nfft=1024, win=400, hop=160):
    """Slow independent route: explicit DFT sums and per-filter scalar triangles."""

    def mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def inv(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    top = mel(sr / 2)
    pts = [inv(top * i / (num_bins + 1)) for i in range(num_bins + 2)]
    nbins = nfft // 2 + 1
    weights = np.zeros((num_bins, nbins))
    for m in range(num_bins):
        lo, c, hi = pts[m], pts[m + 1], pts[m + 2]
        for k in range(nbins):
            f = k * sr / nfft
            if lo < f <= c:
                weights[m, k] = (f - lo) / (c - lo)
            elif c < f < hi:
                weights[m, k] = (hi - f) / (hi - c)
    window = np.array([0.54 - 0.46 * math.cos(2 * math.pi * n / (win - 1)) for n in range(win)])
    n_frames = (len(samples) - win) // hop + 1
    k = np.arange(nbins)[:, None]
    n = np.arange(win)[None, :]
    basis = np.exp(-2j * np.pi * k * n / nfft)
    out = np.zeros((n_frames, num_bins))
    for t in range(n_frames):
        frame = samples[t * hop : t * hop + win] * window
        power = np.abs(basis @ frame) ** 2
        out[t] = np.log(weights @ power + 1e-10)
    return out


def sine(freq, seconds, sr=SR, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


def test_one_second_gives_98_frames():
    fb = compute_fbanks(Waveform(np.random.default_rng(0).standard_normal(SR)))
    assert fb.values.shape == (98, 80)


def test_silence_is_log_floor():
    fb = compute_fbanks(Waveform(np.zeros(SR // 2)))
    assert np.all(fb.values == np.log(LOG_FLOOR))


def test_matches_brute_force_reference():
    rng = np.random.default_rng(1)
    wav = Waveform(rng.uniform(-1, 1, 4000))
    ours = compute_fbanks(wav).values
    ref = reference_fbanks(wav.samples)
    np.testing.assert_allclose(ours, ref, rtol=1e-7, atol=1e-7)


def test_1khz_peak_bin():
    fb = compute_fbanks(sine(1000.0, 1.0))
    centers = mel_center_frequencies(80, SR)
    expected = int(np.argmin(np.abs(centers - 1000.0)))
    assert int(np.argmax(fb.values.mean(axis=0))) == expected
    ref = reference_fbanks(sine(1000.0, 0.2).samples)
    assert int(np.argmax(ref.mean(axis=0))) == expected


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 5000), win=st.integers(1, 600), hop=st.integers(1, 300))
def test_frame_count_formula(n, win, hop):
    expected = (n - win) // hop + 1 if n >= win else 0
    assert frame_count(n, win, hop) == expected
    starts = list(range(0, n - win + 1, hop)) if n >= win else []
    assert len(starts) == expected


@settings(max_examples=15, deadline=None)
@given(n=st.integers(400, 6000))
def test_frame_count_matches_extraction(n):
    fb = compute_fbanks(Waveform(np.random.default_rng(n).standard_normal(n)))
    assert fb.num_frames == (n - 400) // 160 + 1


def test_deterministic():
    wav = Waveform(np.random.default_rng(3).standard_normal(8000))
    assert np.array_equal(compute_fbanks(wav).values, compute_fbanks(wav).values)


@pytest.mark.parametrize("c", [0.25, 3.0])
def test_amplitude_scaling_shifts_log_energy(c):
    wav = Waveform(np.random.default_rng(4).standard_normal(6000))
    base = compute_fbanks(wav).values
    scaled = compute_fbanks(Waveform(wav.samples * c)).values
    # floor is additive, so restrict to cells well above it
    mask = np.exp(base) > 1e-3
    np.testing.assert_allclose(scaled[mask] - base[mask], 2 * math.log(c), atol=1e-6)


def test_errors():
    with pytest.raises(FeatureError) as e:
        compute_fbanks(Waveform(np.zeros(399)))
    assert e.value.code == "utterance_too_short"
    with pytest.raises(FeatureError) as e:
        compute_fbanks(Waveform(np.array([])))
    assert e.value.code == "utterance_too_short"
    bad = np.zeros(1000)
    bad[10] = np.nan
    with pytest.raises(FeatureError) as e:
        compute_fbanks(Waveform(bad))
    assert e.value.code == "invalid_waveform"


def test_normalization_range():
    wav = normalize_waveform(Waveform(np.array([0.1, -4.0, 2.0])))
    assert np.max(np.abs(wav.samples)) == 1.0
    silent = normalize_waveform(Waveform(np.zeros(5)))
    assert np.all(silent.samples == 0)


def test_wav_roundtrip_and_resample(tmp_path):
    src = sine(440.0, 0.5, sr=48000, amp=0.8)
    write_wav(tmp_path / "a.wav", src)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 48000
    np.testing.assert_allclose(back.samples, src.samples, atol=0.5 / 32768 + 1e-12)
    loaded = load_waveform(tmp_path / "a.wav")
    assert loaded.sample_rate == 16000
    assert loaded.num_samples == 8000
    assert np.max(np.abs(loaded.samples)) == pytest.approx(1.0)
    assert resample(loaded, 16000) is loaded


def _feat(frames=98, bins=80, seed=0):
    return FBankFeatures(np.random.default_rng(seed).normal(5, 1, (frames, bins)))


def test_spec_augment_noop():
    fb = _feat()
    out = spec_augment(fb, AugmentSpec(0, 0), np.random.default_rng(0))
    assert np.array_equal(out.values, fb.values)


def test_spec_augment_single_band():
    fb = _feat()
    for seed in range(20):
        out = spec_augment(fb, AugmentSpec(2, 0), np.random.default_rng(seed)).values
        zero_cols = np.where(np.all(out == 0, axis=0))[0]
        assert len(zero_cols) <= 2
        if len(zero_cols) == 2:
            assert zero_cols[1] - zero_cols[0] == 1
        untouched = np.setdiff1d(np.arange(80), zero_cols)
        assert np.array_equal(out[:, untouched], fb.values[:, untouched])


def test_spec_augment_clips_on_short_input():
    fb = _feat(frames=10)
    for seed in range(20):
        out = spec_augment(fb, AugmentSpec(0, 30), np.random.default_rng(seed)).values
        assert out.shape == (10, 80)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), fw=st.integers(0, 10), tw=st.integers(0, 50), frames=st.integers(1, 60))
def test_spec_augment_only_zeroes(seed, fw, tw, frames):
    fb = _feat(frames=frames, bins=16, seed=seed % 1000)
    out = spec_augment(fb, AugmentSpec(fw, tw), np.random.default_rng(seed)).values
    changed = out != fb.values
    assert np.all(out[changed] == 0)
    assert np.all(np.abs(out) <= np.abs(fb.values))


def test_spec_augment_seeded():
    fb = _feat()
    a = spec_augment(fb, AugmentSpec(), np.random.default_rng(7)).values
    b = spec_augment(fb, AugmentSpec(), np.random.default_rng(7)).values
    assert np.array_equal(a, b)


def test_fix_length_pad():
    out = fix_length(_feat(98), 300, "train", np.random.default_rng(0)).values
    assert out.shape == (300, 80)
    assert np.all(out[98:] == 0)


def test_fix_length_crop_is_slice():
    fb = _feat(500)
    out = fix_length(fb, 300, "train", np.random.default_rng(5)).values
    starts = [s for s in range(201) if np.array_equal(fb.values[s : s + 300], out)]
    assert len(starts) == 1


def test_fix_length_eval_identity():
    fb = _feat(123)
    assert fix_length(fb, 300, "eval") is fb


def test_fbank_file_roundtrip(tmp_path):
    fb = _feat(37, 80)
    write_fbank_file(tmp_path / "x.fbk", fb)
    raw = (tmp_path / "x.fbk").read_bytes()
    assert np.frombuffer(raw[:8], "<u4").tolist() == [37, 80]
    assert len(raw) == 8 + 37 * 80 * 4
    back = read_fbank_file(tmp_path / "x.fbk")
    np.testing.assert_array_equal(back.values, fb.values.astype(np.float32))
