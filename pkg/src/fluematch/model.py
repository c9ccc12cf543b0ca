"""Flue-pipe synthesizer: harmonic generator, noise generator, passive resonator.

``render_tone`` is the black-box function every other module calls. It is a
pure function of its arguments; all randomness comes from ``seed``.

Signal flow::

    sine(f0, turbulent pitch) ──┬─ clip/thr1 · env1 · h1 ─┐
                                └─ 2·(sin²-½) ─ clip/thr2 · env2 · h2 ─┤
                                                          sum ─ comb ─ tanh ─ bandpass dry/wet
                                                                              │
                                                     lossy dispersive waveguide loop
                                                                              │
    pink noise ─ lowpass ─ FDN with granulating clip ─ · noise_gain ───────── + ─ DC block ─ tanh
"""
from __future__ import annotations

import functools
import math
from concurrent.futures import ThreadPoolExecutor

import numba
import numpy as np
from scipy.signal import ellip, ellipord

from . import params as P
from .errors import OutOfRangeParam, RenderError, UnrepresentablePitch
from .tone import Tone, note_to_f0

DEFAULT_SAMPLE_RATE = 32000
DATASET_DURATION_S = 4.0
SEARCH_DURATION_S = 1.0

MIN_HARMONICS = 10
# Longest bore decay time constant, reached at dwg_feedback = 0.9999.
BORE_TAU_MAX_S = 0.1
# Fixed FDN line lengths.
FDN_DELAYS_MS = (1.31, 1.77, 2.39, 3.03)
TURBULENCE_LP_HZ = 20.0
PINK_ROWS = 12
OUTPUT_DRIVE = 0.5
# The clip and sigmoid stages run oversampled, then pass an elliptic
# decimation lowpass. The factor is picked per note so the first partial that
# folds back has index >= ALIAS_FOLD_HARMONIC; the clipped partials there are
# far below audibility.
ALIAS_FOLD_HARMONIC = 256
MAX_OVERSAMPLE = 16
# Jet noise is highpassed at max(f0/2, this).
NOISE_HP_MIN_HZ = 100.0

_I = P.INDEX


def _check_render_args(params, note_number, duration_s, sample_rate_hz):
    if not isinstance(params, P.ParamVector):
        raise TypeError("params must be a ParamVector")
    params.validate()
    if not duration_s > 0:
        raise ValueError("duration_s must be positive")
    f0 = note_to_f0(note_number)
    if sample_rate_hz < 2 * MIN_HARMONICS * f0:
        raise UnrepresentablePitch(
            f"note {note_number} (f0={f0:.1f} Hz) needs sample rate >= "
            f"{2 * MIN_HARMONICS * f0:.0f} Hz for {MIN_HARMONICS} harmonics, got {sample_rate_hz}"
        )
    return f0


def bore_loop_gain(dwg_feedback, loop_seconds):
    """Per-round-trip loop gain of the bore.

    ``dwg_feedback`` sets the bore decay time constant on a square-root scale,
    tau = BORE_TAU_MAX_S * sqrt((1 - 0.9999) / (1 - dwg_feedback)), which keeps
    every value of the range audible and the free (dispersed) modes short
    compared with the steady-state analysis window.
    """
    tau = BORE_TAU_MAX_S * math.sqrt((1.0 - 0.9999) / (1.0 - dwg_feedback))
    return math.exp(-loop_seconds / tau)


def _allpass1_phase_delay(c, w):
    # H(z) = (c + z^-1) / (1 + c z^-1)
    num = c + np.exp(-1j * w)
    den = 1.0 + c * np.exp(-1j * w)
    phase = np.angle(num / den)
    return -phase / w


def _onepole_lp_phase_delay(a, w):
    # H(z) = (1 - a) / (1 - a z^-1)
    phase = -np.angle(1.0 - a * np.exp(-1j * w))
    return -phase / w


def _loop_layout(f0, fs, loss_a, disp_c):
    """Integer delay, fractional allpass coefficient and periods per loop.

    The loop is tuned so its lowest resonance lands on f0 (or f0/k when the
    filters alone exceed one period at very high pitch).
    """
    w = 2 * math.pi * f0 / fs
    filt_delay = _onepole_lp_phase_delay(loss_a, w) + _allpass1_phase_delay(disp_c, w)
    periods = 1
    while True:
        d = periods * fs / f0 - filt_delay
        if d >= 2.5:
            break
        periods += 1
    m = int(math.floor(d - 0.5))
    frac = d - m  # in [0.5, 1.5)
    eta = (1.0 - frac) / (1.0 + frac)
    # phase delay of the fractional allpass at f0 is not exactly frac off dc
    for _ in range(4):
        err = d - m - _allpass1_phase_delay(eta, w)
        frac = frac + err
        eta = (1.0 - frac) / (1.0 + frac)
    return m, eta, periods


@numba.njit(cache=True, nogil=True)
def _synth_kernel(n, fs, f0, p, turb, pink, comb_d, bp_b0, bp_a1, bp_a2,
                  loss_a, disp_c, loop_m, frac_eta, loop_g, noise_lp_a,
                  hp_a, fdn_len, os_factor, dec_sos, nhp):
    out = np.zeros(n)

    h1 = p[0]
    h2 = p[1]
    a1, d1, s1, o1 = p[2], p[3], p[4], p[5]
    a2, d2, s2, o2 = p[6], p[7], p[8], p[9]
    thr1, thr2 = p[10], p[11]
    comb_g = p[13]
    drive = p[14]
    wet = p[16]
    noise_gain = p[17]
    gran = p[19]
    fdn_fb = p[20]
    turb_depth = p[21]
    turb_time = p[22]
    dc_r = p[26]

    inv_tanh_drive = 1.0 / math.tanh(drive)
    inv_thr1 = 1.0 / thr1
    inv_thr2 = 1.0 / thr2
    comb_norm = 1.0 / (1.0 + abs(comb_g))

    # state
    phase = 0.0
    comb_len = comb_d * os_factor
    comb_buf = np.zeros(comb_len)
    comb_pos = 0
    n_sec = dec_sos.shape[0]
    dec_z = np.zeros((n_sec, 2))
    nhp_x1 = 0.0
    nhp_x2 = 0.0
    nhp_y1 = 0.0
    nhp_y2 = 0.0
    nho_x1 = 0.0
    nho_x2 = 0.0
    nho_y1 = 0.0
    nho_y2 = 0.0
    bx1 = 0.0
    bx2 = 0.0
    by1 = 0.0
    by2 = 0.0
    loop_buf = np.zeros(loop_m)
    loop_pos = 0
    lp_y = 0.0
    disp_x1 = 0.0
    disp_y1 = 0.0
    frac_x1 = 0.0
    frac_y1 = 0.0
    dc_x1 = 0.0
    dc_y1 = 0.0
    nlp_y = 0.0
    hp_x1 = 0.0
    hp_y1 = 0.0
    max_len = 0
    for k in range(4):
        if fdn_len[k] > max_len:
            max_len = fdn_len[k]
    fdn_buf = np.zeros((4, max_len))
    fdn_pos = np.zeros(4, dtype=np.int64)
    lim_a = 0.0
    lim_f = 0.0

    two_pi = 2.0 * math.pi
    turb_k = 3.0 / turb_time
    peak1 = s1 * o1
    peak2 = s2 * o2
    dk1 = 3.0 / d1
    dk2 = 3.0 / d2
    fs_os = fs * os_factor
    inv_os = 1.0 / os_factor
    e1_next = _envelope(0.0, a1, peak1, s1, dk1)
    e2_next = _envelope(0.0, a2, peak2, s2, dk2)
    for i in range(n):
        t = i / fs
        # harmonic generator, comb and static nonlinearity at the oversampled rate;
        # the phasor is rotated within a base sample and the envelopes interpolated
        cents = turb_depth * turb[i] * math.exp(-turb_k * t)
        freq = f0 * 2.0 ** (cents / 1200.0)
        step = two_pi * freq / fs_os
        rot_c = math.cos(step)
        rot_s = math.sin(step)
        ph_c = math.cos(phase)
        ph_s = math.sin(phase)
        sn = ph_s
        phase += os_factor * step
        while phase > two_pi:
            phase -= two_pi
        e1_0 = e1_next
        e2_0 = e2_next
        t_next = (i + 1) / fs
        e1_next = _envelope(t_next, a1, peak1, s1, dk1)
        e2_next = _envelope(t_next, a2, peak2, s2, dk2)
        de1 = (e1_next - e1_0) * inv_os
        de2 = (e2_next - e2_0) * inv_os
        nl = 0.0
        for j in range(os_factor):
            s_os = ph_s
            tmp = ph_c * rot_c - ph_s * rot_s
            ph_s = ph_s * rot_c + ph_c * rot_s
            ph_c = tmp
            sq = 2.0 * (s_os * s_os - 0.5)
            e1 = e1_0 + de1 * j
            e2 = e2_0 + de2 * j

            c1 = min(max(s_os, -thr1), thr1) * inv_thr1
            c2 = min(max(sq, -thr2), thr2) * inv_thr2
            x = h1 * e1 * c1 + h2 * e2 * c2

            delayed = comb_buf[comb_pos]
            comb_buf[comb_pos] = x
            comb_pos += 1
            if comb_pos >= comb_len:
                comb_pos = 0
            u = (x + comb_g * delayed) * comb_norm
            y = math.tanh(drive * u) * inv_tanh_drive
            # decimation lowpass, transposed direct form II sections
            for k in range(n_sec):
                b0 = dec_sos[k, 0]
                yk = b0 * y + dec_z[k, 0]
                dec_z[k, 0] = dec_sos[k, 1] * y - dec_sos[k, 4] * yk + dec_z[k, 1]
                dec_z[k, 1] = dec_sos[k, 2] * y - dec_sos[k, 5] * yk
                y = yk
            nl = y

        # bandpass dry/wet (0 dB peak gain)
        by = bp_b0 * nl - bp_b0 * bx2 - bp_a1 * by1 - bp_a2 * by2
        bx2 = bx1
        bx1 = nl
        by2 = by1
        by1 = by
        stim = (1.0 - wet) * nl + wet * by

        # waveguide loop: delay -> loss lowpass -> dispersion allpass -> fractional allpass
        tap = loop_buf[loop_pos]
        lp_y = (1.0 - loss_a) * tap + loss_a * lp_y
        dy = disp_c * lp_y + disp_x1 - disp_c * disp_y1
        disp_x1 = lp_y
        disp_y1 = dy
        fy = frac_eta * dy + frac_x1 - frac_eta * frac_y1
        frac_x1 = dy
        frac_y1 = fy
        v = stim + loop_g * fy
        loop_buf[loop_pos] = v
        loop_pos += 1
        if loop_pos >= loop_m:
            loop_pos = 0
        res = (1.0 - loop_g) * v

        # noise generator
        noise = 0.0
        if noise_gain > 0.0:
            pv = pink[i]
            hpv = nhp[0] * pv + nhp[1] * nhp_x1 + nhp[2] * nhp_x2 - nhp[3] * nhp_y1 - nhp[4] * nhp_y2
            nhp_x2 = nhp_x1
            nhp_x1 = pv
            nhp_y2 = nhp_y1
            nhp_y1 = hpv
            nlp_y = (1.0 - noise_lp_a) * hpv + noise_lp_a * nlp_y
            hp = hp_a * (hp_y1 + sn - hp_x1)
            hp_x1 = sn
            hp_y1 = hp
            rate = hp if hp > 0.0 else 0.0
            thr = (1.0 - gran) + gran * rate
            o0 = fdn_buf[0, fdn_pos[0]]
            o1_ = fdn_buf[1, fdn_pos[1]]
            o2_ = fdn_buf[2, fdn_pos[2]]
            o3 = fdn_buf[3, fdn_pos[3]]
            half_sum = 0.5 * (o0 + o1_ + o2_ + o3)
            fb0 = fdn_fb * (o0 - half_sum)
            fb1 = fdn_fb * (o1_ - half_sum)
            fb2 = fdn_fb * (o2_ - half_sum)
            fb3 = fdn_fb * (o3 - half_sum)
            w0 = min(max(nlp_y + fb0, -thr), thr)
            w1 = min(max(nlp_y + fb1, -thr), thr)
            w2 = min(max(nlp_y + fb2, -thr), thr)
            w3 = min(max(nlp_y + fb3, -thr), thr)
            fdn_buf[0, fdn_pos[0]] = w0
            fdn_buf[1, fdn_pos[1]] = w1
            fdn_buf[2, fdn_pos[2]] = w2
            fdn_buf[3, fdn_pos[3]] = w3
            for k in range(4):
                fdn_pos[k] += 1
                if fdn_pos[k] >= fdn_len[k]:
                    fdn_pos[k] = 0
            onset = t / a1 if t < a1 else 1.0
            # (1 - feedback) holds the resonance peaks near unit gain
            fo = (1.0 - fdn_fb) * 0.5 * (o0 + o1_ + o2_ + o3)
            # second pass of the highpass removes the low Householder mode
            ho = nhp[0] * fo + nhp[1] * nho_x1 + nhp[2] * nho_x2 - nhp[3] * nho_y1 - nhp[4] * nho_y2
            nho_x2 = nho_x1
            nho_x1 = fo
            nho_y2 = nho_y1
            nho_y1 = ho
            noise = noise_gain * onset * ho

        # DC blocker and soft limiter
        z = res + noise
        dc = z - dc_x1 + dc_r * dc_y1
        dc_x1 = z
        dc_y1 = dc
        # antiderivative form of tanh, which folds far less energy below Nyquist
        a = OUTPUT_DRIVE * dc
        fa = _log_cosh(a)
        if abs(a - lim_a) > 1e-6:
            out[i] = (fa - lim_f) / (a - lim_a)
        else:
            out[i] = math.tanh(0.5 * (a + lim_a))
        lim_a = a
        lim_f = fa
    return out


@numba.njit(cache=True, nogil=True)
def _envelope(t, a, peak, sustain, dk):
    """Linear rise to the overshoot peak, exponential settle to sustain."""
    if t < a:
        return peak * t / a
    return sustain + (peak - sustain) * math.exp(-(t - a) * dk)


@numba.njit(cache=True, nogil=True)
def _log_cosh(x):
    ax = abs(x)
    return ax + math.log1p(math.exp(-2.0 * ax)) - math.log(2.0)


def _pink_noise(rngs, n):
    """Voss-style pink noise: octave-rate held random rows plus a white row.

    One generator per row, so a shorter render is an exact prefix of a longer one.
    """
    total = rngs[0].uniform(-1.0, 1.0, size=n)
    for k in range(1, PINK_ROWS):
        hold = 1 << k
        offset = int(rngs[k].integers(0, hold))
        m = -(-(n + offset) // hold)
        rows = np.repeat(rngs[k].uniform(-1.0, 1.0, size=m), hold)
        total += rows[offset:offset + n]
    return total / math.sqrt(PINK_ROWS / 3.0)


def _turbulence(rng, n, fs):
    white = rng.standard_normal(n)
    a = math.exp(-2 * math.pi * TURBULENCE_LP_HZ / fs)
    from scipy.signal import lfilter

    y = lfilter([1.0 - a], [1.0, -a], white)
    return y / math.sqrt((1.0 - a) / (1.0 + a))


def oversample_factor(f0, fs):
    return int(min(MAX_OVERSAMPLE, max(1, math.ceil(ALIAS_FOLD_HARMONIC * f0 / fs))))


@functools.lru_cache(maxsize=None)
def _decimation_sos(factor):
    if factor == 1:
        return np.array([[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]])
    # passband to 0.45 of the output rate, 100 dB down from its Nyquist on
    order, wn = ellipord(0.9 / factor, 1.0 / factor, 0.05, 100.0)
    return ellip(order, 0.05, 100.0, wn, output="sos")


def _noise_highpass(fc, fs):
    """Second-order Butterworth highpass as [b0, b1, b2, a1, a2]."""
    w = 2 * math.pi * fc / fs
    alpha = math.sin(w) / math.sqrt(2.0)
    c = math.cos(w)
    a0 = 1 + alpha
    return np.array([(1 + c) / 2 / a0, -(1 + c) / a0, (1 + c) / 2 / a0, -2 * c / a0, (1 - alpha) / a0])


def render_tone(params, note_number, duration_s=SEARCH_DURATION_S,
                sample_rate_hz=DEFAULT_SAMPLE_RATE, seed=0):
    """Synthesize one pipe tone.

    Raises OutOfRangeParam if any field leaves its range and
    UnrepresentablePitch if fewer than ten harmonics fit below Nyquist.
    """
    f0 = _check_render_args(params, note_number, duration_s, sample_rate_hz)
    fs = float(sample_rate_hz)
    n = int(round(duration_s * sample_rate_hz))
    p = params.values

    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(1 + PINK_ROWS)]
    turb = _turbulence(streams[0], n, fs)
    pink = _pink_noise(streams[1:], n)

    comb_d = max(1, int(round(p[_I["comb_delay_samples"]])))
    w0 = 2 * math.pi * f0 / fs
    alpha = math.sin(w0) / (2 * p[_I["bandpass_q"]])
    a0 = 1 + alpha
    bp_b0 = alpha / a0
    bp_a1 = -2 * math.cos(w0) / a0
    bp_a2 = (1 - alpha) / a0

    loss_a = math.exp(-2 * math.pi * p[_I["dwg_loss_cutoff_hz"]] / fs)
    disp_c = p[_I["dispersion_coeff"]]
    loop_m, frac_eta, periods = _loop_layout(f0, fs, loss_a, disp_c)
    loop_g = bore_loop_gain(p[_I["dwg_feedback"]], periods / f0)

    noise_lp_a = math.exp(-2 * math.pi * min(p[_I["noise_lp_cutoff_hz"]], 0.45 * fs) / fs)
    hp_a = 1.0 / (1.0 + 2 * math.pi * (f0 / 2) / fs)
    factor = oversample_factor(f0, fs)
    fdn_len = np.array([max(2, int(round(ms * 1e-3 * fs))) for ms in FDN_DELAYS_MS], dtype=np.int64)

    samples = _synth_kernel(n, fs, f0, p, turb, pink, comb_d, bp_b0, bp_a1, bp_a2,
                            loss_a, disp_c, loop_m, frac_eta, loop_g, noise_lp_a,
                            hp_a, fdn_len, factor, _decimation_sos(factor),
                            _noise_highpass(max(0.5 * f0, NOISE_HP_MIN_HZ), fs))
    return Tone(samples, int(sample_rate_hz), int(note_number), f0)


def render_batch(params_list, note_number, duration_s=SEARCH_DURATION_S,
                 sample_rate_hz=DEFAULT_SAMPLE_RATE, seed=0, workers=1):
    """Render each ParamVector with the same note, duration, rate and seed."""
    params_list = list(params_list)
    if not params_list:
        raise ValueError("render_batch needs a nonempty list")

    def one(item):
        i, prm = item
        try:
            return render_tone(prm, note_number, duration_s, sample_rate_hz, seed)
        except (OutOfRangeParam, UnrepresentablePitch, ValueError, TypeError) as exc:
            raise RenderError(i, exc) from exc

    if workers <= 1:
        return [one(it) for it in enumerate(params_list)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, enumerate(params_list)))
