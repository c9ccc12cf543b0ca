"""Acoustic distances between a target tone and a candidate tone.

Harmonic distances compare per-partial dB levels of the steady spectrum, each
tone normalized to its own strongest partial below Nyquist (so H_L for any L is
a prefix mean of one fixed per-partial vector). Envelope distances sum squared
differences of Hilbert envelopes over the attack window.

Every function accepts either a :class:`~fluematch.tone.Tone` or a prepared
:class:`~fluematch.features.ToneAnalysis`; pass the latter to reuse a target's
analysis across many evaluations.
"""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass

import numpy as np

from .errors import FluematchError, MetricError, PitchMismatch, SampleRateMismatch
from .features import AnalysisConfig, ToneAnalysis, analyze
from .tone import atomic_write_text

NYQUIST = "H"
_BANDS = {"full": 0, "harmonic1": 1, "harmonic2": 2}


@dataclass(frozen=True)
class MetricId:
    kind: str  # "H", "HW" or "E"
    order: object = None  # harmonic count, NYQUIST, or envelope band number

    def __post_init__(self):
        if self.kind in ("H", "HW"):
            if self.order != NYQUIST and not (isinstance(self.order, int) and self.order >= 1):
                raise ValueError(f"harmonic metric needs L >= 1 or 'H', got {self.order!r}")
        elif self.kind == "E":
            if self.order not in (0, 1, 2):
                raise ValueError("envelope band must be 0 (full), 1 or 2")
        else:
            raise ValueError(f"unknown metric kind {self.kind!r}")

    @classmethod
    def parse(cls, text):
        """Parse ids like ``H_H``, ``H_10``, ``H_10_W``, ``H_10^W``, ``E_D``, ``E_D1``."""
        if isinstance(text, MetricId):
            return text
        t = text.strip().replace("^", "_").upper()
        m = re.fullmatch(r"H_(H|\d+)(_W)?", t)
        if m:
            order = NYQUIST if m.group(1) == "H" else int(m.group(1))
            return cls("HW" if m.group(2) else "H", order)
        m = re.fullmatch(r"E_D([12]?)", t)
        if m:
            return cls("E", int(m.group(1) or 0))
        raise ValueError(f"unrecognized metric id {text!r}")

    def __str__(self):
        if self.kind == "E":
            return "E_D" + (str(self.order) if self.order else "")
        suffix = "_W" if self.kind == "HW" else ""
        return f"H_{self.order}{suffix}"


@dataclass(frozen=True)
class WeightedCost:
    terms: tuple  # ((MetricId, weight), ...)

    def __post_init__(self):
        terms = tuple((MetricId.parse(m), float(w)) for m, w in self.terms)
        if not terms:
            raise ValueError("cost needs at least one metric")
        if any(w < 0 or not np.isfinite(w) for _, w in terms):
            raise ValueError("cost weights must be finite and >= 0")
        if not sum(w for _, w in terms) > 0:
            raise ValueError("cost needs a strictly positive total weight")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def of(cls, spec):
        """Build from a dict ``{"H_H": 1, ...}`` or a sequence of pairs."""
        if isinstance(spec, WeightedCost):
            return spec
        items = spec.items() if isinstance(spec, dict) else spec
        return cls(tuple(items))

    def scaled(self, c):
        return WeightedCost(tuple((m, w * c) for m, w in self.terms))

    def to_dict(self):
        return {str(m): w for m, w in self.terms}


HARMONIC_COST = WeightedCost.of({"H_H": 1.0, "H_10": 1.0, "H_10_W": 3.0})
ENVELOPE_COST = WeightedCost.of({"E_D": 1.0, "E_D1": 1.0, "E_D2": 1.0})
REPORT_METRICS = tuple(MetricId.parse(m) for m in ("H_H", "H_10", "H_10_W", "E_D2", "E_D1", "E_D"))


def _pair(target, candidate, cfg):
    a, b = analyze(target, cfg), analyze(candidate, cfg)
    return a, b


def _check_pitch(a, b):
    fa, fb = a.tone.f0_hz, b.tone.f0_hz
    if abs(fa / fb - 1.0) > 0.01:
        raise PitchMismatch(f"f0 {fa:.3f} Hz vs {fb:.3f} Hz differ by more than 1%")


def _harmonic_levels(a, b, L):
    _check_pitch(a, b)
    if L == NYQUIST or L is None:
        n = min(a.n_max, b.n_max)
    else:
        n = int(L)
        if n < 1:
            raise ValueError("L must be >= 1")
    return a.levels_db(n), b.levels_db(n)


def harmonic_distance(target, candidate, L, cfg):
    """Mean over partials 1..L of the squared dB difference (dB²). L='H' runs to Nyquist."""
    a, b = _pair(target, candidate, cfg)
    s1, s2 = _harmonic_levels(a, b, L)
    return float(np.mean((s1 - s2) ** 2))


def weighted_harmonic_distance(target, candidate, L, cfg, literal_db_weights=False):
    """Like harmonic_distance, each term weighted by the target partial's level.

    Weights are the target's linear partial magnitudes normalized to max 1.
    ``literal_db_weights=True`` multiplies by the target dB value instead.
    """
    a, b = _pair(target, candidate, cfg)
    s1, s2 = _harmonic_levels(a, b, L)
    w = s1 if literal_db_weights else 10.0 ** (s1 / 20.0)
    return float(np.mean((s1 - s2) ** 2 * w))


def harmonic_distance_from_levels(s1, s2, weights=None):
    """H_L (or H_L^W with ``weights``) of two given level vectors."""
    s1, s2 = np.asarray(s1, float), np.asarray(s2, float)
    d = (s1 - s2) ** 2
    if weights is not None:
        d = d * np.asarray(weights, float)
    return float(np.mean(d))


def envelope_distance(target, candidate, band, cfg):
    """Sum over n in [0, T_s] of squared Hilbert-envelope differences.

    ``band`` is "full", "harmonic1" or "harmonic2" (or 0/1/2).
    """
    band = _BANDS.get(band, band)
    a, b = _pair(target, candidate, cfg)
    if a.tone.sample_rate_hz != b.tone.sample_rate_hz:
        raise SampleRateMismatch(f"{a.tone.sample_rate_hz} Hz vs {b.tone.sample_rate_hz} Hz")
    if band:
        _check_pitch(a, b)
    e1, e2 = a.attack_envelope(band), b.attack_envelope(band)
    return float(np.sum((e1 - e2) ** 2))


def metric_value(metric, target, candidate, cfg):
    m = MetricId.parse(metric)
    if m.kind == "H":
        return harmonic_distance(target, candidate, m.order, cfg)
    if m.kind == "HW":
        return weighted_harmonic_distance(target, candidate, m.order, cfg)
    return envelope_distance(target, candidate, m.order, cfg)


def evaluate_cost(target, candidate, cost, cfg, breakdown=False):
    """Weighted sum of metrics; with ``breakdown`` also returns {metric id: raw value}."""
    cost = WeightedCost.of(cost)
    a, b = _pair(target, candidate, cfg)
    total = 0.0
    parts = {}
    for m, w in cost.terms:
        try:
            v = metric_value(m, a, b, cfg)
        except FluematchError as exc:
            raise MetricError(str(m), exc) from exc
        parts[str(m)] = v
        total += w * v
    return (total, parts) if breakdown else total


def metric_rows_to_csv(path, rows):
    """rows: iterable of (note, metric_id, value)."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["note", "metric_id", "value"])
    for note, mid, val in rows:
        w.writerow([note, str(mid), repr(float(val))])
    atomic_write_text(path, buf.getvalue())


__all__ = [
    "AnalysisConfig", "ToneAnalysis", "MetricId", "WeightedCost", "NYQUIST",
    "HARMONIC_COST", "ENVELOPE_COST", "REPORT_METRICS",
    "harmonic_distance", "weighted_harmonic_distance", "harmonic_distance_from_levels",
    "envelope_distance", "metric_value", "evaluate_cost", "metric_rows_to_csv",
]
