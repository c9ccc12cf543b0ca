import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import get_window

from conftest import FS, harmonic_tone, sine
from fluematch.errors import BandAboveNyquistWarning, ToneTooShort
from fluematch.features import (FLOOR_DB, AnalysisConfig, FeatureLayout, compute_logmel, compute_snr,
                                extract_attack_sustain, extract_features, extract_harmonics,
                                features_from_csv, features_from_npz, features_to_csv, features_to_npz,
                                hilbert_envelope, mel_filterbank)
from fluematch.model import render_tone
from fluematch.params import N_PARAMS, ParamVector
from fluematch.tone import Tone

CFG = AnalysisConfig()
NOTE = 36


def test_config_validation():
    with pytest.raises(ValueError):
        AnalysisConfig(fft_size=3000)
    with pytest.raises(ValueError):
        AnalysisConfig(fft_size=1024)
    with pytest.raises(ValueError):
        AnalysisConfig(n_harmonics=9)
    with pytest.raises(ValueError):
        AnalysisConfig(n_mels=300)
    with pytest.raises(ValueError):
        AnalysisConfig(n_envelope_harmonics=13)
    c = AnalysisConfig.for_duration(1.0)
    assert c.steady_window == (0.375, 0.875)
    assert AnalysisConfig.from_dict(c.to_dict()) == c


def test_pure_sine_harmonics():
    tone = sine(Tone(np.zeros(1), FS, NOTE).f0_hz, 4.0, amp=0.5, note=NOTE)
    h = extract_harmonics(tone, CFG)
    assert h[0] == 0.0
    assert np.all(h[1:] <= -60.0)


def test_two_partials_level_difference():
    tone = harmonic_tone([20 * np.log10(2.0), 0.0], note=NOTE)
    h = extract_harmonics(tone, CFG)
    assert h[1] - h[0] == pytest.approx(-6.02, abs=0.1)


def test_silent_tone_floors():
    z = Tone(np.zeros(4 * FS), FS, NOTE)
    assert np.all(extract_harmonics(z, CFG) == FLOOR_DB)
    assert np.all(compute_logmel(z, CFG) == FLOOR_DB)
    a = extract_attack_sustain(z, CFG)
    P = CFG.n_envelope_harmonics
    assert np.all(a[:P] == 0.0) and np.all(a[P:] == FLOOR_DB)


def test_harmonics_above_nyquist_are_floor():
    tone = sine(Tone(np.zeros(1), FS, 60).f0_hz, 4.0, amp=0.5, note=60)
    h = extract_harmonics(tone, AnalysisConfig(n_harmonics=30))
    f0 = tone.f0_hz
    above = np.arange(1, 31) * f0 * 1.03 >= FS / 2
    assert np.all(h[above] == FLOOR_DB)


def test_snr_examples(rng):
    f0 = Tone(np.zeros(1), FS, NOTE).f0_hz
    assert compute_snr(sine(f0, 4.0, note=NOTE), CFG) >= 60.0
    noise = Tone(rng.normal(0, 0.3, 4 * FS), FS, NOTE)
    assert compute_snr(noise, CFG) <= -10.0
    s = sine(f0, 4.0, amp=1.0, note=NOTE)
    # white noise with the sine's power, so harmonic/residual is ~1 apart from the
    # small share of the noise that lands in the harmonic bins
    n = rng.normal(0, np.sqrt(0.5), s.samples.size)
    mix = Tone(s.samples + n, FS, NOTE)
    assert compute_snr(mix, CFG) == pytest.approx(0.0, abs=1.0)


def test_logmel_examples():
    f0 = Tone(np.zeros(1), FS, NOTE).f0_hz
    s = sine(f0, 4.0, amp=0.5, note=NOTE)
    lm = compute_logmel(s, CFG)
    fb, centres = mel_filterbank(CFG.n_mels, CFG.fft_size, FS)
    k = int(round(f0 * CFG.fft_size / FS))
    assert fb[np.argmax(lm), k] > 0
    assert fb[np.argmax(lm), k] == fb[:, k].max()
    half = compute_logmel(s.scaled(0.5), CFG)
    live = lm > FLOOR_DB + 20
    assert np.allclose((half - lm)[live], -6.0206, atol=0.01)


def test_attack_step_on_sine():
    f0 = Tone(np.zeros(1), FS, NOTE).f0_hz
    a = extract_attack_sustain(sine(f0, 4.0, note=NOTE), CFG)
    assert a[0] <= 2.0 / f0


def test_attack_linear_ramp():
    f0 = Tone(np.zeros(1), FS, NOTE).f0_hz
    t = np.arange(4 * FS) / FS
    x = np.minimum(t / 0.5, 1.0) * np.sin(2 * np.pi * f0 * t)
    a = extract_attack_sustain(Tone(x, FS, NOTE), CFG)
    assert a[0] == pytest.approx(0.45, abs=0.02)
    assert a[CFG.n_envelope_harmonics] == pytest.approx(20 * np.log10(1.0), abs=0.1)


def test_attack_band_above_nyquist_warns():
    # note 62: the tenth partial's band crosses Nyquist
    tone = sine(Tone(np.zeros(1), FS, 62).f0_hz, 4.0, note=62)
    with pytest.warns(BandAboveNyquistWarning):
        a = extract_attack_sustain(tone, CFG)
    assert a[-1] == FLOOR_DB


def test_hilbert_envelope_of_sine():
    t = np.arange(FS) / FS
    env = hilbert_envelope(0.7 * np.sin(2 * np.pi * 440 * t))
    assert np.allclose(env[FS // 10:-FS // 10], 0.7, atol=1e-3)


def test_too_short():
    with pytest.raises(ToneTooShort):
        extract_features(Tone(np.zeros(FS), FS, NOTE), CFG)


def test_feature_layout_and_determinism():
    th = ParamVector()
    tone = render_tone(th, NOTE, 4.0)
    fv = extract_features(tone, CFG)
    L, B, P = CFG.n_harmonics, CFG.n_mels, CFG.n_envelope_harmonics
    assert fv.values.size == L + 1 + B + 2 * P == fv.layout.size
    assert np.array_equal(fv.logmel, fv.values[:B])
    assert np.array_equal(fv.harmonic_amps_db, fv.values[B:B + L])
    assert fv.snr_db == fv.values[B + L]
    again = extract_features(render_tone(th, NOTE, 4.0), CFG)
    assert np.array_equal(fv.values, again.values)
    assert np.all(np.isfinite(fv.values))
    assert fv.harmonic_amps_db.max() == 0.0


def test_custom_layout():
    cfg = AnalysisConfig(n_harmonics=20, n_mels=64, n_envelope_harmonics=6)
    fv = extract_features(render_tone(ParamVector(), 30, 4.0), cfg)
    assert fv.layout == FeatureLayout(20, 64, 6)
    assert fv.values.size == 20 + 1 + 64 + 12


def test_persistence_roundtrip(tmp_path, rng):
    layout = FeatureLayout.from_config(CFG)
    m = rng.normal(size=(3, layout.size))
    features_to_csv(tmp_path / "f.csv", m, layout, ids=["a", "b", "c"])
    m2, lay2, ids = features_from_csv(tmp_path / "f.csv")
    assert np.array_equal(m, m2) and lay2 == layout and list(ids) == ["a", "b", "c"]
    features_to_npz(tmp_path / "f.npz", m, layout)
    m3, lay3, _ = features_from_npz(tmp_path / "f.npz")
    assert np.array_equal(m, m3) and lay3 == layout


@given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_scale_invariance(c, seed):
    z = np.random.default_rng(seed).uniform(-1, 1, N_PARAMS)
    tone = render_tone(ParamVector.from_normalized(z), 30, 4.0)
    h = extract_harmonics(tone, CFG)
    hs = extract_harmonics(tone.scaled(c), CFG)
    live = h > FLOOR_DB + 1
    assert np.max(np.abs(h - hs)[live], initial=0.0) < 1e-6
    assert compute_snr(tone.scaled(c), CFG) == pytest.approx(compute_snr(tone, CFG), abs=1e-6)


@given(st.integers(0, 10_000), st.integers(0, 60))
def test_features_total_on_finite_input(seed, note):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, rng.uniform(0, 2), 4 * FS) * (rng.uniform() < 0.9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BandAboveNyquistWarning)
        fv = extract_features(Tone(x, FS, note), CFG)
    assert np.all(np.isfinite(fv.values))


def oracle_harmonics(tone, cfg, n):
    """Max-bin peak picking on a power average of frames 4x the analysis FFT size."""
    a, b = cfg.steady_window
    x = tone.samples[int(a * FS):int(b * FS)]
    nfft = 4 * cfg.fft_size
    w = get_window("blackmanharris", nfft)
    starts = range(0, x.size - nfft + 1, nfft // 4)
    power = np.mean([np.abs(np.fft.rfft(x[s:s + nfft] * w)) ** 2 for s in starts], axis=0)
    mag = np.sqrt(power) / (w.sum() / 2)
    f = np.fft.rfftfreq(nfft, 1 / FS)
    half = max(cfg.half_width * tone.f0_hz, FS / nfft)
    out = np.zeros(n)
    for l in range(1, n + 1):
        band = np.abs(f - l * tone.f0_hz) <= half
        if (l + cfg.half_width) * tone.f0_hz < FS / 2:
            out[l - 1] = mag[band].max()
    return 20 * np.log10(np.maximum(out / out.max(), 1e-6))


@given(st.integers(0, 10_000), st.integers(0, 55))
def test_harmonics_match_long_fft_oracle(seed, note):
    z = np.random.default_rng(seed).uniform(-1, 1, N_PARAMS)
    th = ParamVector.from_normalized(z)
    # envelopes settled before the steady window, so both averages see the same levels
    settle = {f"h{i}_{k}": min(th[f"h{i}_{k}"], 0.25) for i in (1, 2) for k in ("attack_time_s", "decay_time_s")}
    tone = render_tone(th.replace(noise_gain=0.0, **settle), note, 4.0)
    h = extract_harmonics(tone, CFG)
    o = oracle_harmonics(tone, CFG, CFG.n_harmonics)
    live = (o > -60.0) & (h > -60.0)
    assert np.all(np.abs(h - o)[live] <= 1.0)
