"""Contrived dataset generation, WAV ingestion, manifests and stop-level splits.

A dataset is a directory of WAV files plus one manifest: a JSON-lines file
whose first line is a header (schema version, seed, render settings) and
whose remaining lines describe one item each. Parameters live in the manifest,
never in WAV metadata.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import resample_poly

from . import params as P
from .errors import (EmptyDataset, FluematchError, PitchSanityWarning, TooFewStops,
                     UnreadableFile)
from .model import DATASET_DURATION_S, DEFAULT_SAMPLE_RATE, render_tone
from .params import ParamVector
from .tone import N_NOTES, Tone, atomic_write_text, note_to_f0, read_wav, write_wav

log = logging.getLogger(__name__)

SCHEMA = "fluematch-manifest"
SCHEMA_VERSION = 1
FAMILIES = ("principale", "bordone", "flauto", "unknown")
INGEST_PEAK_DBFS = -3.0
PITCH_TOLERANCE_CENTS = 50.0

# Physical sub-ranges applied on top of the uniform prior for each family.
FAMILY_RANGES = {
    "principale": {},
    # stopped pipes: almost only odd partials, so the even-partial branch is kept quiet
    "bordone": {"h2_gain": (0.0, 0.05), "bandpass_wet": (0.0, 0.2)},
    "flauto": {"noise_gain": (0.05, 0.3), "sigmoid_drive": (0.1, 2.0), "h2_gain": (0.0, 0.4)},
}


@dataclass(frozen=True)
class Prior:
    """Independent uniform prior, optionally narrowed by family and per-parameter ranges."""

    family: str = "principale"
    ranges: tuple = ()  # extra ((name, low, high), ...) overrides
    jitter: float = 0.0  # per-note Gaussian jitter, in normalized units

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        for name, lo, hi in self.bounds_items():
            spec = P.SCHEMA[P.INDEX[name]]
            if not spec.low <= lo <= hi <= spec.high:
                raise ValueError(f"prior range for {name} outside [{spec.low}, {spec.high}]")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    def bounds_items(self):
        merged = dict(FAMILY_RANGES.get(self.family, {}))
        merged.update({n: (lo, hi) for n, lo, hi in self.ranges})
        return [(n, float(lo), float(hi)) for n, (lo, hi) in merged.items()]

    def bounds(self):
        low, high = P.LOW.copy(), P.HIGH.copy()
        for name, lo, hi in self.bounds_items():
            low[P.INDEX[name]], high[P.INDEX[name]] = lo, hi
        return low, high

    def sample(self, rng):
        low, high = self.bounds()
        return ParamVector.from_array(rng.uniform(low, high))

    def jittered(self, theta, rng):
        if self.jitter == 0:
            return theta
        z = theta.normalized() + rng.normal(0.0, self.jitter, P.N_PARAMS)
        low, high = self.bounds()
        return ParamVector.from_array(np.clip(P.denormalize(np.clip(z, -1, 1)), low, high))

    def to_dict(self):
        return {"family": self.family, "ranges": [list(r) for r in self.ranges], "jitter": self.jitter}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("family", "principale"), tuple(tuple(r) for r in d.get("ranges", ())),
                   float(d.get("jitter", 0.0)))


@dataclass
class DatasetItem:
    stop: str
    note_number: int
    family: str = "unknown"
    footage: str = ""
    wav: str = ""  # path relative to the manifest directory
    params: ParamVector = None
    render_seed: int = None
    samples: np.ndarray = field(default=None, repr=False)  # inline, until saved
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if not 0 <= int(self.note_number) < N_NOTES:
            raise ValueError(f"note number {self.note_number} outside 0..{N_NOTES - 1}")
        self.note_number = int(self.note_number)
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")

    @property
    def key(self):
        return (self.stop, self.note_number)

    @property
    def contrived(self):
        return self.params is not None

    def tone(self, root="."):
        if self.samples is not None:
            return Tone(self.samples, self.sample_rate_hz, self.note_number)
        x, sr = read_wav(os.path.join(root, self.wav))
        return Tone(x, sr, self.note_number)

    def to_record(self):
        rec = {"stop": self.stop, "note": self.note_number, "family": self.family,
               "footage": self.footage, "wav": self.wav}
        if self.params is not None:
            rec["params"] = self.params.as_dict()
            rec["render_seed"] = self.render_seed
        return rec

    @classmethod
    def from_record(cls, rec, sample_rate_hz=DEFAULT_SAMPLE_RATE):
        params = ParamVector(**rec["params"]) if rec.get("params") is not None else None
        return cls(rec["stop"], rec["note"], rec.get("family", "unknown"), rec.get("footage", ""),
                   rec.get("wav", ""), params, rec.get("render_seed"), sample_rate_hz=sample_rate_hz)


@dataclass
class DatasetManifest:
    items: list
    seed: int = None
    duration_s: float = DATASET_DURATION_S
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    prior: dict = None
    root: str = "."

    def __post_init__(self):
        seen = set()
        for it in self.items:
            if it.key in seen:
                raise ValueError(f"duplicate (stop, note) pair {it.key}")
            seen.add(it.key)

    def __len__(self):
        return len(self.items)

    def __eq__(self, other):
        return (isinstance(other, DatasetManifest) and self.header() == other.header()
                and [i.to_record() for i in self.items] == [i.to_record() for i in other.items])

    def stops(self):
        return sorted({it.stop for it in self.items})

    def select_stops(self, stops):
        keep = set(stops)
        return replace(self, items=[it for it in self.items if it.stop in keep])

    def header(self):
        return {"schema": SCHEMA, "version": SCHEMA_VERSION, "seed": self.seed,
                "duration_s": self.duration_s, "sample_rate_hz": self.sample_rate_hz,
                "prior": self.prior}

    def to_jsonl(self):
        lines = [json.dumps(self.header())]
        lines += [json.dumps(it.to_record()) for it in self.items]
        return "\n".join(lines) + "\n"

    def save(self, path):
        """Write inline samples to WAV files next to the manifest, then the manifest itself."""
        root = os.path.dirname(os.path.abspath(path))
        for it in self.items:
            if it.samples is not None:
                if not it.wav:
                    it.wav = default_wav_name(it.stop, it.note_number)
                os.makedirs(os.path.dirname(os.path.join(root, it.wav)) or root, exist_ok=True)
                write_wav(os.path.join(root, it.wav), it.samples, it.sample_rate_hz)
                it.samples = None
        self.root = root
        atomic_write_text(path, self.to_jsonl())

    @classmethod
    def load(cls, path, check_files=True):
        try:
            with open(path, encoding="utf-8") as fh:
                lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        except OSError as exc:
            raise UnreadableFile(f"{path}: {exc}") from exc
        if not lines:
            raise UnreadableFile(f"{path}: empty manifest")
        head = json.loads(lines[0])
        if head.get("schema") != SCHEMA:
            raise UnreadableFile(f"{path}: not a {SCHEMA} file")
        if head.get("version") != SCHEMA_VERSION:
            raise UnreadableFile(f"{path}: unsupported manifest version {head.get('version')}")
        sr = int(head["sample_rate_hz"])
        items = [DatasetItem.from_record(json.loads(ln), sr) for ln in lines[1:]]
        root = os.path.dirname(os.path.abspath(path))
        if check_files:
            for it in items:
                if not os.path.isfile(os.path.join(root, it.wav)):
                    raise UnreadableFile(f"{path}: missing file {it.wav}")
        return cls(items, head.get("seed"), float(head["duration_s"]), sr, head.get("prior"), root)

    def param_table_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["stop", "note", "family", "footage", *P.NAMES])
        for it in self.items:
            if it.params is not None:
                w.writerow([it.stop, it.note_number, it.family, it.footage,
                            *(repr(float(v)) for v in it.params.values)])
        return buf.getvalue()

    def write_param_table(self, path):
        atomic_write_text(path, self.param_table_csv())

    def tone(self, item):
        return item.tone(self.root)


def default_wav_name(stop, note):
    return os.path.join(stop, f"{note:02d}.wav")


def _item_seeds(seed, n_stops, notes):
    """Per-stop prior seeds and per-(stop, note) render/jitter seeds, all from one root."""
    root = np.random.SeedSequence(seed)
    stop_seqs = root.spawn(n_stops)
    out = []
    for sq in stop_seqs:
        prior_seq, *note_seqs = sq.spawn(1 + len(notes))
        out.append((prior_seq, [int(ns.generate_state(1)[0]) for ns in note_seqs], note_seqs))
    return out


def generate_contrived(n_stops, notes, prior=Prior(), seed=0, duration_s=DATASET_DURATION_S,
                       sample_rate_hz=DEFAULT_SAMPLE_RATE, footage="8", stop_prefix=None,
                       workers=1):
    """Draw one base parameter vector per stop and render every requested note.

    Items hold samples inline; call ``manifest.save(path)`` to write WAVs and
    the manifest. Failed renders are logged and skipped.
    """
    if n_stops < 1:
        raise ValueError("n_stops must be >= 1")
    notes = sorted({int(n) for n in notes})
    prefix = stop_prefix or prior.family
    seeds = _item_seeds(seed, n_stops, notes)
    jobs = []
    for s, (prior_seq, render_seeds, note_seqs) in enumerate(seeds):
        base = prior.sample(np.random.default_rng(prior_seq))
        stop = f"{prefix}_{s:04d}"
        for note, rseed, nseq in zip(notes, render_seeds, note_seqs):
            theta = prior.jittered(base, np.random.default_rng(nseq))
            jobs.append((stop, note, theta, rseed))

    def run(job):
        stop, note, theta, rseed = job
        try:
            tone = render_tone(theta, note, duration_s, sample_rate_hz, rseed)
        except FluematchError as exc:
            log.warning("render failed for stop %s note %d: %s", stop, note, exc)
            return None
        return DatasetItem(stop, note, prior.family, footage, default_wav_name(stop, note), theta,
                           rseed, tone.samples, sample_rate_hz)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    items = [r for r in results if r is not None]
    if not items:
        raise EmptyDataset("every render failed")
    return DatasetManifest(items, seed, duration_s, sample_rate_hz, prior.to_dict())


def regenerate_item(item, manifest):
    """Re-render a contrived item from its manifest entry."""
    if item.params is None:
        raise ValueError(f"{item.key} is not contrived")
    return render_tone(item.params, item.note_number, manifest.duration_s,
                       manifest.sample_rate_hz, item.render_seed)


# -- presets mirroring the training subsets (stop counts only) ---------------------------

@dataclass(frozen=True)
class SubsetPreset:
    family: str
    footages: tuple
    n_stops: int


SUBSET_PRESETS = {
    "subset1": SubsetPreset("principale", ("8",), 132),
    "subset2": SubsetPreset("principale", ("4", "8", "16"), 256),
    "subset3": SubsetPreset("principale", ("2", "4", "8", "16"), 330),
    "subset4": SubsetPreset("principale", ("2", "4", "8", "16"), 90),
    "subset5": SubsetPreset("bordone", ("8",), 56),
    "subset6": SubsetPreset("bordone", ("4", "8", "16"), 150),
    "subset7": SubsetPreset("flauto", ("4", "8"), 21),
}


def generate_preset(name, notes, seed=0, scale=1.0, **kw):
    """Generate a preset subset; ``scale`` shrinks the stop count for desk-scale runs.

    Stops are spread round-robin over the preset's footage labels.
    """
    preset = SUBSET_PRESETS[name]
    n = max(1, int(math.ceil(preset.n_stops * scale)))
    per = [n // len(preset.footages) + (i < n % len(preset.footages)) for i in range(len(preset.footages))]
    items = []
    seeds = np.random.SeedSequence(seed).spawn(len(preset.footages))
    manifest = None
    for footage, count, sq in zip(preset.footages, per, seeds):
        if count == 0:
            continue
        sub = generate_contrived(count, notes, Prior(preset.family), int(sq.generate_state(1)[0]),
                                 footage=footage, stop_prefix=f"{name}_{preset.family}_{footage}", **kw)
        items += sub.items
        manifest = sub
    return replace(manifest, items=items, seed=seed)


# -- ingestion ---------------------------------------------------------------------------

def dominant_frequency(x, fs):
    w = np.hanning(x.size)
    mag = np.abs(np.fft.rfft(x * w))
    mag[0] = 0.0
    k = int(np.argmax(mag))
    if 0 < k < mag.size - 1:
        a, b, c = np.log(mag[k - 1:k + 2] + 1e-300)
        den = a - 2 * b + c
        if den < 0:
            k = k + 0.5 * (a - c) / den
    return k * fs / x.size


def pitch_deviation_cents(x, fs, note_number, max_partial=8):
    """Cents between the dominant peak and the nearest of the first harmonics of the note."""
    f = dominant_frequency(x, fs)
    if f <= 0:
        return math.inf
    f0 = note_to_f0(note_number)
    return min(abs(1200 * math.log2(f / (k * f0))) for k in range(1, max_partial + 1))


def resample(x, sr, target_sr):
    """Polyphase windowed-sinc resampling; a no-op at equal rates."""
    if int(sr) == int(target_sr):
        return np.asarray(x, float)
    g = math.gcd(int(sr), int(target_sr))
    return resample_poly(x, int(target_sr) // g, int(sr) // g)


def ingest_wav(path, note_number, stop="", family="unknown", footage="",
               sample_rate_hz=DEFAULT_SAMPLE_RATE, duration_s=DATASET_DURATION_S):
    """Load a recording as a non-contrived item (samples held inline)."""
    x, sr = read_wav(path)
    x = resample(x, sr, sample_rate_hz)
    n = int(round(duration_s * sample_rate_hz))
    x = x[:n] if x.size >= n else np.concatenate([x, np.zeros(n - x.size)])
    peak = float(np.max(np.abs(x)))
    if peak > 0:
        x = x * (10.0 ** (INGEST_PEAK_DBFS / 20.0) / peak)
    dev = pitch_deviation_cents(x, sample_rate_hz, note_number) if peak > 0 else math.inf
    if dev > PITCH_TOLERANCE_CENTS:
        warnings.warn(f"{path}: dominant peak is {dev:.0f} cents from note {note_number}",
                      PitchSanityWarning, stacklevel=2)
    stop = stop or os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return DatasetItem(stop, note_number, family, footage, "", None, None, x, sample_rate_hz)


# -- splitting -----------------------------------------------------------------------------

def _split_counts(n, fractions):
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (counts[i] - raw[i], i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    # every nonzero fraction gets at least one stop, taken from the largest share
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            j = max(range(len(counts)), key=lambda k: counts[k])
            counts[j] -= 1
            counts[i] += 1
    return counts


def split_dataset(manifest, fractions=(0.8, 0.1, 0.1), seed=0):
    """Partition by stop, never by note. Returns one manifest per fraction."""
    fractions = tuple(float(f) for f in fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be >= 0 and sum to 1")
    stops = manifest.stops()
    needed = sum(1 for f in fractions if f > 0)
    if len(stops) < needed:
        raise TooFewStops(f"{len(stops)} stop(s) cannot fill {needed} nonempty splits")
    order = np.random.default_rng(seed).permutation(len(stops))
    counts = _split_counts(len(stops), fractions)
    out, start = [], 0
    for c in counts:
        chosen = {stops[i] for i in order[start:start + c]}
        out.append(manifest.select_stops(chosen))
        start += c
    return tuple(out)


def training_arrays(manifest, feature_cfg, workers=1):
    """Feature matrix X and normalized parameter matrix Y for the contrived items."""
    from .features import extract_features

    items = [it for it in manifest.items if it.params is not None]
    if not items:
        raise EmptyDataset("manifest has no contrived items")

    def feats(it):
        return extract_features(manifest.tone(it), feature_cfg).values

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            X = list(pool.map(feats, items))
    else:
        X = [feats(it) for it in items]
    Y = [it.params.normalized() for it in items]
    return np.array(X), np.array(Y)
