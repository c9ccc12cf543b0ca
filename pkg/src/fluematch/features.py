"""Hand-crafted tone features: harmonic amplitudes, SNR, log-mel and attack/sustain.

All extractors share one steady-state spectrum estimate (frame-averaged power
spectrum over ``AnalysisConfig.steady_window``) and one band-envelope routine
(analytic signal from a zero-padded full-length FFT with a smooth spectral
window around the band centre).
"""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property, lru_cache

import numpy as np
from scipy import fft as sfft
from scipy.signal import get_window

from .errors import BandAboveNyquistWarning, ToneTooShort
from .tone import atomic_write_bytes, atomic_write_text

FLOOR_DB = -120.0
_TINY = 10.0 ** (FLOOR_DB / 20.0)

# main-lobe half-width in bins
_MAINLOBE = {"hann": 2.0, "hamming": 2.0, "blackman": 3.0, "blackmanharris": 4.0}


@dataclass(frozen=True)
class AnalysisConfig:
    fft_size: int = 8192
    hop_size: int = 2048
    window: str = "blackmanharris"
    steady_window: tuple = (1.5, 3.5)
    attack_window_end_s: float = 0.5
    half_width: float = 0.03
    envelope_half_width: float = 0.5
    n_harmonics: int = 12
    n_mels: int = 128
    n_envelope_harmonics: int = 10

    def __post_init__(self):
        n = self.fft_size
        if n < 2048 or n & (n - 1):
            raise ValueError("fft_size must be a power of two >= 2048")
        if not 0 < self.hop_size <= n:
            raise ValueError("hop_size must be in (0, fft_size]")
        a, b = self.steady_window
        if not 0 <= a < b:
            raise ValueError("steady_window must satisfy 0 <= start < end")
        if not 10 <= self.n_harmonics <= 100:
            raise ValueError("n_harmonics (L) must be in [10, 100]")
        if not 64 <= self.n_mels <= 256:
            raise ValueError("n_mels (B) must be in [64, 256]")
        if not 6 <= self.n_envelope_harmonics <= 12:
            raise ValueError("n_envelope_harmonics (P) must be in [6, 12]")
        if not 0 < self.half_width < 0.5:
            raise ValueError("half_width must be in (0, 0.5)")
        if not 0 < self.envelope_half_width <= 0.5:
            raise ValueError("envelope_half_width must be in (0, 0.5]")
        if window_name(self.window) not in _MAINLOBE:
            raise ValueError(f"unsupported window {self.window!r}")

    @classmethod
    def for_duration(cls, duration_s, **overrides):
        """Defaults scaled to a tone length: [1.5, 3.5] s of a 4 s tone, same proportions otherwise."""
        steady = (0.375 * duration_s, 0.875 * duration_s)
        kw = dict(steady_window=steady, attack_window_end_s=min(0.5, 0.5 * duration_s))
        kw.update(overrides)
        return cls(**kw)

    def replace(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        d = asdict(self)
        d["steady_window"] = list(self.steady_window)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "steady_window" in d:
            d["steady_window"] = tuple(d["steady_window"])
        return cls(**d)


def window_name(w):
    return {"blackman-harris": "blackmanharris", "hanning": "hann"}.get(w, w)


@lru_cache(maxsize=16)
def _window(name, n):
    w = get_window(window_name(name), n, fftbins=True)
    w.setflags(write=False)
    return w


def to_db(mag):
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(np.maximum(mag, 0.0))
    return np.maximum(db, FLOOR_DB)


# -- steady-state spectrum -------------------------------------------------

class SteadySpectrum:
    """Frame-averaged power spectrum over the steady window, amplitude-calibrated.

    ``power[k]`` is scaled so that a sine of amplitude A centred on bin k gives
    ``sqrt(power[k]) == A``.
    """

    def __init__(self, tone, cfg):
        fs = tone.sample_rate_hz
        a, b = cfg.steady_window
        i0, i1 = int(round(a * fs)), int(round(b * fs))
        n = cfg.fft_size
        if i1 > tone.samples.size or i1 - i0 < n:
            raise ToneTooShort(
                f"steady window {cfg.steady_window} s needs {max(i1, i0 + n)} samples, "
                f"tone has {tone.samples.size}"
            )
        w = _window(cfg.window, n)
        starts = np.arange(i0, i1 - n + 1, cfg.hop_size)
        frames = np.lib.stride_tricks.sliding_window_view(tone.samples[i0:i1], n)[starts - i0]
        spec = np.abs(sfft.rfft(frames * w, axis=-1)) ** 2
        self.power = spec.mean(axis=0) / (w.sum() / 2.0) ** 2
        self.mag = np.sqrt(self.power)
        self.bin_hz = fs / n
        self.fs = fs
        self.fft_size = n
        self.mainlobe = _MAINLOBE[window_name(cfg.window)]
        self.silent = not np.any(self.power > 0)


def _parabolic(y, k):
    """Vertex offset and value of the parabola through y[k-1], y[k], y[k+1]."""
    if k <= 0 or k >= y.size - 1:
        return 0.0, y[k]
    a, b, c = y[k - 1], y[k], y[k + 1]
    den = a - 2 * b + c
    if den >= 0:
        return 0.0, b
    off = min(0.5, max(-0.5, 0.5 * (a - c) / den))
    return off, b - 0.25 * (a - c) * off


def _peak_in(spec, center_hz, half_hz):
    """Interpolated (freq_hz, magnitude) of the strongest bin within center ± half."""
    half = max(half_hz, spec.bin_hz)
    lo = max(1, int(np.ceil((center_hz - half) / spec.bin_hz)))
    hi = min(spec.mag.size - 2, int(np.floor((center_hz + half) / spec.bin_hz)))
    if hi < lo:
        return center_hz, 0.0
    k = lo + int(np.argmax(spec.mag[lo:hi + 1]))
    if spec.mag[k] <= 0:
        return center_hz, 0.0
    nb = spec.mag[k - 1:k + 2]
    if nb.min() <= _TINY * 1e-3:
        return k * spec.bin_hz, spec.mag[k]
    off, val = _parabolic(20 * np.log10(nb), 1)
    return (k + off) * spec.bin_hz, 10.0 ** (val / 20.0)


def refine_f0(spec, f0, cfg):
    """Nominal f0 refined on the strongest of the first five partials, capped at ±1%."""
    if spec.silent:
        return f0
    best = None
    for l in range(1, 6):
        if (l * f0) * (1 + cfg.half_width) >= spec.fs / 2:
            break
        f, m = _peak_in(spec, l * f0, cfg.half_width * f0)
        if best is None or m > best[1]:
            best = (f / l, m)
    if best is None or best[1] <= 0:
        return f0
    return float(np.clip(best[0], 0.99 * f0, 1.01 * f0))


def harmonic_magnitudes(spec, f0, n, cfg):
    """Linear magnitudes of partials 1..n (0 above Nyquist)."""
    nyq = spec.fs / 2
    out = np.zeros(n)
    for l in range(1, n + 1):
        c = l * f0
        if c + cfg.half_width * f0 >= nyq:
            break
        out[l - 1] = _peak_in(spec, c, cfg.half_width * f0)[1]
    return out


def normalized_db(mags):
    peak = mags.max() if mags.size else 0.0
    if not peak > _TINY:
        return np.full(mags.shape, FLOOR_DB)
    return to_db(mags / peak)


def max_harmonic(f0, fs, cfg):
    """Index of the highest partial whose search band lies below Nyquist."""
    return max(1, int(np.floor((fs / 2) / (f0 * (1 + cfg.half_width)))))


# -- per-tone analysis cache -------------------------------------------------

class ToneAnalysis:
    """Lazily computed, read-only analysis products of one tone."""

    def __init__(self, tone, cfg):
        self.tone = tone
        self.cfg = cfg

    @cached_property
    def spectrum(self):
        return SteadySpectrum(self.tone, self.cfg)

    @cached_property
    def f0(self):
        return refine_f0(self.spectrum, self.tone.f0_hz, self.cfg)

    @cached_property
    def n_max(self):
        return max_harmonic(self.f0, self.tone.sample_rate_hz, self.cfg)

    @cached_property
    def all_harmonic_mags(self):
        return harmonic_magnitudes(self.spectrum, self.f0, self.n_max, self.cfg)

    def harmonics_db(self, n):
        """dB of partials 1..n, normalized to the strongest of those n partials."""
        mags = self.all_harmonic_mags
        if n <= mags.size:
            mags = mags[:n]
        else:
            mags = np.concatenate([mags, np.zeros(n - mags.size)])
        return normalized_db(mags)

    @cached_property
    def _levels_db(self):
        return normalized_db(self.all_harmonic_mags)

    def levels_db(self, n):
        """dB of partials 1..n relative to the strongest partial below Nyquist.

        Unlike harmonics_db the reference does not depend on n, so every
        prefix of the returned vector is the same fixed spectrum.
        """
        lv = self._levels_db
        if n <= lv.size:
            return lv[:n].copy()
        return np.concatenate([lv, np.full(n - lv.size, FLOOR_DB)])

    @cached_property
    def _attack_segment(self):
        fs = self.tone.sample_rate_hz
        ts = int(round(self.cfg.attack_window_end_s * fs)) + 1
        if ts > self.tone.samples.size:
            raise ToneTooShort(
                f"attack window end {self.cfg.attack_window_end_s} s beyond tone "
                f"({self.tone.duration_s:.3f} s)"
            )
        # filter context beyond T_s so the window edge is not a signal edge
        margin = int(round(0.1 * fs))
        return self.tone.samples[: min(self.tone.samples.size, ts + margin)], ts

    def attack_envelope(self, band):
        """Envelope over samples 0..T_s for band 0 (full) or harmonic number band."""
        cache = self.__dict__.setdefault("_env_cache", {})
        if band not in cache:
            seg, ts = self._attack_segment
            fs = self.tone.sample_rate_hz
            if band == 0:
                env = hilbert_envelope(seg)
            else:
                env = band_envelope(seg, fs, band * self.tone.f0_hz,
                                    self.cfg.envelope_half_width * self.tone.f0_hz)
            env.setflags(write=False)
            cache[band] = env[:ts]
        return cache[band]


_ANALYSIS_CACHE_KEY = "_fluematch_analysis"


def analyze(tone_or_analysis, cfg):
    """Return a ToneAnalysis for ``cfg``; passes through one already built for it."""
    if isinstance(tone_or_analysis, ToneAnalysis):
        if tone_or_analysis.cfg == cfg:
            return tone_or_analysis
        tone_or_analysis = tone_or_analysis.tone
    return ToneAnalysis(tone_or_analysis, cfg)


# -- envelopes -------------------------------------------------------------

def _analytic_spectrum(x):
    n = x.size
    nfft = sfft.next_fast_len(2 * n)
    return sfft.fft(x, nfft), nfft


def hilbert_envelope(x):
    """|analytic signal| of x, zero-padded to avoid circular wrap."""
    x = np.asarray(x, dtype=float)
    X, nfft = _analytic_spectrum(x)
    h = np.zeros(nfft)
    h[0] = 1.0
    if nfft % 2 == 0:
        h[nfft // 2] = 1.0
        h[1:nfft // 2] = 2.0
    else:
        h[1:(nfft + 1) // 2] = 2.0
    return np.abs(sfft.ifft(X * h))[: x.size]


def band_envelope(x, fs, center_hz, half_width_hz):
    """Envelope of x restricted to center ± half_width (zero-phase, raised-cosine band).

    The band shape is cos² in frequency, so a sinusoid at the centre keeps its
    amplitude and partials at centre ± half_width are fully rejected.
    """
    if center_hz + half_width_hz >= fs / 2:
        warnings.warn(f"band {center_hz:.1f} Hz above Nyquist", BandAboveNyquistWarning, stacklevel=2)
        return np.zeros(np.size(x))
    return band_envelopes(x, fs, [center_hz], half_width_hz)[0]


def band_envelopes(x, fs, centers_hz, half_width_hz):
    """band_envelope for several centres sharing one forward transform."""
    x = np.asarray(x, dtype=float)
    n = x.size
    # the band filter's impulse response decays within a few 1/half_width; pad past that
    pad = min(n, int(np.ceil(8.0 * fs / half_width_hz)))
    nfft = sfft.next_fast_len(n + pad)
    X = sfft.rfft(x, nfft)
    f = np.arange(X.size) * (fs / nfft)
    out = []
    for c in centers_hz:
        if c + half_width_hz >= fs / 2:
            out.append(np.zeros(n))
            continue
        lo = max(1, int(np.floor((c - half_width_hz) * nfft / fs)))
        hi = min(X.size, int(np.ceil((c + half_width_hz) * nfft / fs)) + 1)
        u = (f[lo:hi] - c) / half_width_hz
        gain = np.where(np.abs(u) < 1.0, 2.0 * np.cos(0.5 * np.pi * u) ** 2, 0.0)
        Y = np.zeros(nfft, dtype=complex)
        Y[lo:hi] = X[lo:hi] * gain
        out.append(np.abs(sfft.ifft(Y))[:n])
    return out


# -- the four extractors ---------------------------------------------------

def extract_harmonics(tone, cfg):
    """Partials 1..L in dB relative to the strongest partial, floored at -120 dB."""
    return analyze(tone, cfg).harmonics_db(cfg.n_harmonics).copy()


def compute_snr(tone, cfg):
    """Harmonic-to-residual power ratio (dB) of the steady spectrum, clamped to [-60, 80]."""
    an = analyze(tone, cfg)
    spec = an.spectrum
    if spec.silent:
        return -60.0
    f0 = an.f0
    k = np.arange(spec.power.size)
    half_bins = max(cfg.half_width * f0 / spec.bin_hz, spec.mainlobe + 0.5)
    mask = np.zeros(spec.power.size, dtype=bool)
    for l in range(1, cfg.n_harmonics + 1):
        c = l * f0 / spec.bin_hz
        if c >= k[-1]:
            break
        mask |= np.abs(k - c) <= half_bins
    p_h = spec.power[mask].sum()
    p_r = spec.power.sum() - p_h
    if p_h <= 0:
        return -60.0
    if p_r <= 0:
        return 80.0
    return float(np.clip(10.0 * np.log10(p_h / p_r), -60.0, 80.0))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels, fft_size, fs):
    """Triangular filters, equally spaced on the mel scale from 0 Hz to Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(fs / 2.0), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * fs / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb, edges[1:-1]


def compute_logmel(tone, cfg):
    """B log mel-band energies (dB) of the steady spectrum, floored at -120 dB."""
    return _logmel_from(analyze(tone, cfg), cfg)


def extract_attack_sustain(tone, cfg):
    """Per partial l <= P: (attack time s, sustain dB); returned as [attacks..., sustains...]."""
    if isinstance(tone, ToneAnalysis):
        tone = tone.tone
    fs = tone.sample_rate_hz
    a, b = cfg.steady_window
    i0, i1 = int(round(a * fs)), int(round(b * fs))
    if i1 > tone.samples.size or i1 <= i0:
        raise ToneTooShort(f"steady window {cfg.steady_window} s beyond tone ({tone.duration_s:.3f} s)")
    P = cfg.n_envelope_harmonics
    attacks = np.zeros(P)
    sustains = np.full(P, FLOOR_DB)
    hw = cfg.envelope_half_width * tone.f0_hz
    envs = band_envelopes(tone.samples, fs, [l * tone.f0_hz for l in range(1, P + 1)], hw)
    for l, env in enumerate(envs, 1):
        if l * tone.f0_hz + hw >= fs / 2:
            warnings.warn(f"harmonic {l} band above Nyquist; floor values reported",
                          BandAboveNyquistWarning, stacklevel=2)
            continue
        steady = env[i0:i1].mean()
        if steady <= _TINY:
            continue
        idx = np.flatnonzero(env >= 0.9 * steady)
        attacks[l - 1] = idx[0] / fs if idx.size else i0 / fs
        sustains[l - 1] = 20.0 * np.log10(steady)
    return np.concatenate([attacks, sustains])


# -- feature vector ----------------------------------------------------------

@dataclass(frozen=True)
class FeatureLayout:
    n_harmonics: int
    n_mels: int
    n_envelope_harmonics: int

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.n_harmonics, cfg.n_mels, cfg.n_envelope_harmonics)

    @property
    def size(self):
        return self.n_mels + self.n_harmonics + 1 + 2 * self.n_envelope_harmonics

    def column_names(self):
        return (
            [f"logmel_{i}" for i in range(self.n_mels)]
            + [f"harm_{l}" for l in range(1, self.n_harmonics + 1)]
            + ["snr_db"]
            + [f"attack_{l}" for l in range(1, self.n_envelope_harmonics + 1)]
            + [f"sustain_{l}" for l in range(1, self.n_envelope_harmonics + 1)]
        )

    def slices(self):
        B, L, P = self.n_mels, self.n_harmonics, self.n_envelope_harmonics
        return {
            "logmel": slice(0, B),
            "harmonic_amps_db": slice(B, B + L),
            "snr_db": slice(B + L, B + L + 1),
            "attack_sustain": slice(B + L + 1, B + L + 1 + 2 * P),
        }


@dataclass
class FeatureVector:
    values: np.ndarray
    layout: FeatureLayout = field(repr=False)

    def __len__(self):
        return self.values.size

    def part(self, name):
        return self.values[self.layout.slices()[name]]

    @property
    def harmonic_amps_db(self):
        return self.part("harmonic_amps_db")

    @property
    def logmel(self):
        return self.part("logmel")

    @property
    def snr_db(self):
        return float(self.part("snr_db")[0])

    @property
    def attack_sustain(self):
        return self.part("attack_sustain")


def extract_features(tone, cfg):
    """Concatenate logmel, harmonics, SNR and attack/sustain in that order."""
    an = analyze(tone, cfg)
    parts = [
        _logmel_from(an, cfg),
        an.harmonics_db(cfg.n_harmonics),
        [compute_snr(an, cfg)],
        extract_attack_sustain(an.tone, cfg),
    ]
    return FeatureVector(np.concatenate([np.asarray(p, dtype=float) for p in parts]),
                         FeatureLayout.from_config(cfg))


def _logmel_from(an, cfg):
    fb, _ = mel_filterbank(cfg.n_mels, cfg.fft_size, an.tone.sample_rate_hz)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(fb @ an.spectrum.power)
    return np.maximum(db, FLOOR_DB)


# -- persistence -------------------------------------------------------------

def features_to_csv(path, rows, layout, ids=None):
    """One row per tone; header from the layout, (L, B, P) in a leading comment."""
    buf = io.StringIO()
    buf.write(f"# layout L={layout.n_harmonics} B={layout.n_mels} P={layout.n_envelope_harmonics}\n")
    w = csv.writer(buf)
    w.writerow((["id"] if ids is not None else []) + layout.column_names())
    for i, row in enumerate(rows):
        vals = [repr(float(v)) for v in np.asarray(row)]
        w.writerow(([ids[i]] if ids is not None else []) + vals)
    atomic_write_text(path, buf.getvalue())


def features_from_csv(path):
    with open(path, newline="") as fh:
        first = fh.readline()
        meta = dict(kv.split("=") for kv in first.strip("# \n").split()[1:])
        layout = FeatureLayout(int(meta["L"]), int(meta["B"]), int(meta["P"]))
        reader = csv.reader(fh)
        header = next(reader)
        has_id = header[0] == "id"
        ids, rows = [], []
        for rec in reader:
            if has_id:
                ids.append(rec[0])
                rec = rec[1:]
            rows.append([float(v) for v in rec])
    return np.array(rows).reshape(-1, layout.size), layout, (ids if has_id else None)


def features_to_npz(path, matrix, layout, ids=None):
    buf = io.BytesIO()
    meta = json.dumps({"L": layout.n_harmonics, "B": layout.n_mels, "P": layout.n_envelope_harmonics})
    np.savez(buf, features=np.asarray(matrix, dtype=float), layout=np.frombuffer(meta.encode(), dtype=np.uint8),
             ids=np.array(ids if ids is not None else [], dtype=str))
    atomic_write_bytes(path, buf.getvalue())


def features_from_npz(path):
    with np.load(path) as z:
        meta = json.loads(z["layout"].tobytes().decode())
        ids = list(z["ids"]) or None
        return z["features"], FeatureLayout(meta["L"], meta["B"], meta["P"]), ids
