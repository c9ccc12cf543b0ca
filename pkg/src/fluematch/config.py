"""Run configuration: one TOML file plus ``section.key=value`` overrides.

The default config path comes from ``$FLUEMATCH_CONFIG`` when no ``--config``
is passed. Every section is optional.
"""
from __future__ import annotations

import ast
import os
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .corpus import Prior
from .features import AnalysisConfig
from .metrics import HARMONIC_COST, WeightedCost
from .model import DATASET_DURATION_S, DEFAULT_SAMPLE_RATE
from .neural import SearchSpace
from .search import MorisConfig, RenderSettings, SelectionConfig, envelope_run, harmonic_run

ENV_VAR = "FLUEMATCH_CONFIG"
DEFAULT_CHECKPOINTS = (0, 300, 1500, 4000)


@dataclass
class DatasetSettings:
    n_stops: int = 4
    notes: tuple = tuple(range(0, 61, 6))
    family: str = "principale"
    footage: str = "8"
    jitter: float = 0.0
    seed: int = 0
    duration_s: float = DATASET_DURATION_S
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    preset: str = ""
    scale: float = 1.0
    ranges: tuple = ()

    def prior(self):
        return Prior(self.family, tuple(tuple(r) for r in self.ranges), self.jitter)


@dataclass
class TrainSettings:
    n_trials: int = 8
    seed: int = 0
    top_k: int = 4
    datasets: dict = field(default_factory=dict)  # subset name -> manifest path
    space: SearchSpace = field(default_factory=SearchSpace)


@dataclass
class ReportSettings:
    checkpoints: tuple = DEFAULT_CHECKPOINTS
    figures: bool = True


@dataclass
class RunConfig:
    dataset_path: str = "data/manifest.jsonl"
    models_dir: str = "models"
    output_dir: str = "out"
    ensemble: tuple = ()
    workers: int = 1
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    analysis: AnalysisConfig = field(default_factory=lambda: AnalysisConfig.for_duration(DATASET_DURATION_S))
    render: RenderSettings = field(default_factory=RenderSettings)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    moris: tuple = field(default_factory=lambda: (harmonic_run(), envelope_run()))
    report: ReportSettings = field(default_factory=ReportSettings)


def _coerce(value):
    """Parse an override value: Python/TOML-ish literal if possible, else the raw string."""
    try:
        return ast.literal_eval(value)
    except (ValueError, SyntaxError):
        low = value.lower()
        if low in ("true", "false"):
            return low == "true"
        return value


def apply_overrides(data, overrides):
    """``["render.seed=3", "moris.0.max_iterations=500"]`` into the raw config dict."""
    for item in overrides or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        parts = key.strip().split(".")
        if parts[0] == "moris" and len(parts) > 1 and "moris" not in data:
            data["moris"] = [{"preset": "harmonic"}, {"preset": "envelope"}]
        node = data
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            else:
                node = node.setdefault(p, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = _coerce(val.strip())
        else:
            node[last] = _coerce(val.strip())
    return data


def _only(cls, d, section):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"[{section}] unknown key(s): {sorted(unknown)}")
    return d


def _notes(v):
    if isinstance(v, str):
        lo, _, hi = v.partition("-")
        return tuple(range(int(lo), int(hi or lo) + 1))
    return tuple(int(n) for n in v)


def _moris(d, i):
    d = dict(d)
    kind = d.pop("preset", None)
    if "cost" in d:
        d["cost"] = WeightedCost.of(d["cost"])
    if kind == "harmonic":
        return harmonic_run(**d)
    if kind == "envelope":
        return envelope_run(**d)
    if kind is not None:
        raise ValueError(f"[[moris]] #{i}: unknown preset {kind!r}")
    _only(MorisConfig, d, f"moris.{i}")
    return MorisConfig(**d)


def build_config(data):
    data = dict(data)
    paths = data.pop("paths", {})
    cfg = RunConfig(
        dataset_path=paths.get("dataset", "data/manifest.jsonl"),
        models_dir=paths.get("models", "models"),
        output_dir=paths.get("output", "out"),
    )
    cfg.workers = int(data.pop("workers", 1))
    cfg.ensemble = tuple(data.pop("ensemble", ()))

    ds = dict(data.pop("dataset", {}))
    if "notes" in ds:
        ds["notes"] = _notes(ds["notes"])
    if "ranges" in ds:
        ds["ranges"] = tuple(tuple(r) for r in ds["ranges"])
    cfg.dataset = DatasetSettings(**_only(DatasetSettings, ds, "dataset"))

    tr = dict(data.pop("train", {}))
    space = tr.pop("space", {})
    space = {k: tuple(v) if isinstance(v, list) else v for k, v in space.items()}
    cfg.train = TrainSettings(**_only(TrainSettings, tr, "train"),
                              space=SearchSpace(**_only(SearchSpace, space, "train.space")))

    cfg.render = RenderSettings(**_only(RenderSettings, data.pop("render", {}), "render"))
    an = data.pop("analysis", {})
    cfg.analysis = AnalysisConfig.for_duration(cfg.dataset.duration_s, **_only(AnalysisConfig, an, "analysis"))

    sel = data.pop("selection", {})
    cfg.selection = SelectionConfig(cost=WeightedCost.of(sel.get("cost", HARMONIC_COST.to_dict())))

    if "moris" in data:
        cfg.moris = tuple(_moris(m, i) for i, m in enumerate(data.pop("moris")))

    rep = dict(data.pop("report", {}))
    if "checkpoints" in rep:
        rep["checkpoints"] = tuple(int(k) for k in rep["checkpoints"])
    cfg.report = ReportSettings(**_only(ReportSettings, rep, "report"))

    if data:
        raise ValueError(f"unknown config section(s): {sorted(data)}")
    if cfg.workers < 1:
        raise ValueError("workers must be >= 1")
    return cfg


def load_config(path=None, overrides=()):
    path = path or os.environ.get(ENV_VAR)
    data = {}
    if path:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    return build_config(apply_overrides(data, overrides))
