"""Flue-pipe parameter schema and the ParamVector container.

Every parameter has a physical range. The optimizer and the networks work on
the normalized form, where each field is mapped affinely onto [-1, 1].
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import OutOfRangeParam


@dataclass(frozen=True)
class ParamSpec:
    name: str
    low: float
    high: float
    group: str
    unit: str = ""


def _env(prefix):
    return [
        ParamSpec(f"{prefix}_attack_time_s", 0.005, 1.0, "harmonic", "s"),
        ParamSpec(f"{prefix}_decay_time_s", 0.01, 2.0, "harmonic", "s"),
        ParamSpec(f"{prefix}_sustain_level", 0.0, 1.0, "harmonic"),
        ParamSpec(f"{prefix}_overshoot", 1.0, 3.0, "harmonic"),
    ]


SCHEMA: tuple[ParamSpec, ...] = tuple(
    [
        ParamSpec("h1_gain", 0.0, 1.0, "harmonic"),
        ParamSpec("h2_gain", 0.0, 1.0, "harmonic"),
        *_env("h1"),
        *_env("h2"),
        ParamSpec("clip_threshold_h1", 0.05, 1.0, "harmonic"),
        ParamSpec("clip_threshold_h2", 0.05, 1.0, "harmonic"),
        ParamSpec("comb_delay_samples", 1.0, 64.0, "harmonic", "samples"),
        ParamSpec("comb_gain", -1.0, 1.0, "harmonic"),
        ParamSpec("sigmoid_drive", 0.1, 10.0, "harmonic"),
        ParamSpec("bandpass_q", 0.5, 20.0, "harmonic"),
        ParamSpec("bandpass_wet", 0.0, 1.0, "harmonic"),
        ParamSpec("noise_gain", 0.0, 1.0, "noise"),
        ParamSpec("noise_lp_cutoff_hz", 200.0, 8000.0, "noise", "Hz"),
        ParamSpec("granulation_depth", 0.0, 1.0, "noise"),
        ParamSpec("fdn_feedback", 0.0, 0.98, "noise"),
        ParamSpec("turbulence_depth", 0.0, 50.0, "noise", "cents"),
        ParamSpec("turbulence_time_s", 0.005, 0.5, "noise", "s"),
        ParamSpec("dwg_loss_cutoff_hz", 500.0, 12000.0, "resonator", "Hz"),
        ParamSpec("dwg_feedback", 0.9, 0.9999, "resonator"),
        ParamSpec("dispersion_coeff", -0.9, 0.9, "resonator"),
        ParamSpec("dc_block_pole", 0.9, 0.9999, "resonator"),
    ]
)

NAMES: tuple[str, ...] = tuple(s.name for s in SCHEMA)
INDEX: dict[str, int] = {n: i for i, n in enumerate(NAMES)}
N_PARAMS = len(SCHEMA)
LOW = np.array([s.low for s in SCHEMA])
HIGH = np.array([s.high for s in SCHEMA])

# A mellow principal-like voice; used when a caller only sets a few fields.
DEFAULTS = {
    "h1_gain": 0.8,
    "h2_gain": 0.3,
    "h1_attack_time_s": 0.05,
    "h1_decay_time_s": 0.2,
    "h1_sustain_level": 0.7,
    "h1_overshoot": 1.3,
    "h2_attack_time_s": 0.03,
    "h2_decay_time_s": 0.15,
    "h2_sustain_level": 0.5,
    "h2_overshoot": 1.5,
    "clip_threshold_h1": 0.6,
    "clip_threshold_h2": 0.8,
    "comb_delay_samples": 8.0,
    "comb_gain": 0.3,
    "sigmoid_drive": 2.0,
    "bandpass_q": 2.0,
    "bandpass_wet": 0.3,
    "noise_gain": 0.05,
    "noise_lp_cutoff_hz": 3000.0,
    "granulation_depth": 0.5,
    "fdn_feedback": 0.5,
    "turbulence_depth": 10.0,
    "turbulence_time_s": 0.1,
    "dwg_loss_cutoff_hz": 5000.0,
    "dwg_feedback": 0.999,
    "dispersion_coeff": 0.1,
    "dc_block_pole": 0.995,
}


class ParamVector:
    """Physical parameter values in schema order.

    Construct with keyword arguments (missing fields take ``DEFAULTS``),
    from an array with :meth:`from_array`, or from the normalized form with
    :meth:`from_normalized`.
    """

    __slots__ = ("values",)

    def __init__(self, **fields):
        unknown = set(fields) - set(NAMES)
        if unknown:
            raise KeyError(f"unknown parameter(s): {sorted(unknown)}")
        merged = {**DEFAULTS, **fields}
        self.values = np.array([float(merged[n]) for n in NAMES])
        self.validate()

    @classmethod
    def from_array(cls, values, validate=True):
        obj = cls.__new__(cls)
        values = np.asarray(values, dtype=float)
        if values.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} values, got shape {values.shape}")
        obj.values = values.copy()
        if validate:
            obj.validate()
        return obj

    @classmethod
    def from_normalized(cls, z):
        return cls.from_array(denormalize(z))

    def validate(self):
        for spec, v in zip(SCHEMA, self.values):
            if not np.isfinite(v) or v < spec.low or v > spec.high:
                raise OutOfRangeParam(spec.name, float(v), spec.low, spec.high)
        return self

    def normalized(self):
        return normalize(self.values)

    def replace(self, **fields):
        out = self.from_array(self.values, validate=False)
        for k, v in fields.items():
            out.values[INDEX[k]] = float(v)
        return out.validate()

    def __getitem__(self, name):
        return float(self.values[INDEX[name]])

    def __getattr__(self, name):
        # only reached for names not found normally; "values" may be unset during unpickling
        if name.startswith("_") or name == "values":
            raise AttributeError(name)
        try:
            return float(self.values[INDEX[name]])
        except KeyError:
            raise AttributeError(name) from None

    def __eq__(self, other):
        return isinstance(other, ParamVector) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())

    def __repr__(self):
        return f"ParamVector({', '.join(f'{k}={v:.6g}' for k, v in self.as_dict().items())})"

    def as_dict(self):
        return {n: float(v) for n, v in zip(NAMES, self.values)}

    # -- text forms -------------------------------------------------------

    def to_text(self):
        """Flat ``name = value`` records, one per line. repr() keeps floats exact."""
        return "".join(f"{n} = {float(v)!r}\n" for n, v in zip(NAMES, self.values))

    @classmethod
    def from_text(cls, text):
        fields = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            fields[key.strip()] = float(val)
        missing = set(NAMES) - set(fields)
        if missing:
            raise KeyError(f"missing parameter(s): {sorted(missing)}")
        return cls(**fields)

    def to_json(self, indent=2):
        return json.dumps(self.as_dict(), indent=indent)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        if "physical" in data:
            data = data["physical"]
        return cls(**data)


def normalize(values):
    values = np.asarray(values, dtype=float)
    return 2.0 * (values - LOW) / (HIGH - LOW) - 1.0


def denormalize(z):
    z = np.asarray(z, dtype=float)
    # clip guards the last-ulp overshoot at z = +-1
    return np.clip(LOW + (z + 1.0) * 0.5 * (HIGH - LOW), LOW, HIGH)


def sample_uniform(rng, n=None):
    """Draw physical parameter arrays uniformly within the schema ranges."""
    shape = (N_PARAMS,) if n is None else (n, N_PARAMS)
    return denormalize(rng.uniform(-1.0, 1.0, size=shape))
