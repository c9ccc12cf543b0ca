"""Selection stage and (multi-objective) random iterative search.

The local search keeps a best normalized parameter vector and repeatedly
perturbs a random sparse subset of its coordinates with Gaussian steps whose
size scales with the current best distance. A proposal is kept only if it is
strictly better. With a single-metric cost this is plain RIS.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import params as P
from .errors import AllCandidatesFailed, FluematchError, StageError
from .features import AnalysisConfig, analyze, extract_features
from .metrics import HARMONIC_COST, REPORT_METRICS, WeightedCost, evaluate_cost, metric_value
from .model import DEFAULT_SAMPLE_RATE, SEARCH_DURATION_S, render_tone
from .params import ParamVector
from .tone import Tone, atomic_write_text

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RenderSettings:
    duration_s: float = SEARCH_DURATION_S
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    seed: int = 0

    def render(self, theta, note):
        return render_tone(theta, note, self.duration_s, self.sample_rate_hz, self.seed)

    def analysis_config(self, **overrides):
        return AnalysisConfig.for_duration(self.duration_s, **overrides)


@dataclass(frozen=True)
class SelectionConfig:
    cost: WeightedCost = HARMONIC_COST
    analysis: AnalysisConfig = None


@dataclass(frozen=True)
class MorisConfig:
    cost: WeightedCost = HARMONIC_COST
    step_size: float = 0.2
    sparsity: float = 0.15
    gaussian_sigma: float = 1.0
    epsilon: float = 0.0
    patience: int = 1000
    max_iterations: int = 4000
    seed: int = 0
    perturbation_mode: str = "relative"
    name: str = "moris"

    def __post_init__(self):
        object.__setattr__(self, "cost", WeightedCost.of(self.cost))
        if not 0 < self.step_size < 1:
            raise ValueError("step_size must be in (0, 1)")
        if not 0 < self.sparsity <= 1:
            raise ValueError("sparsity must be in (0, 1]")
        if not self.gaussian_sigma > 0:
            raise ValueError("gaussian_sigma must be > 0")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.patience < 1 or self.max_iterations < 1:
            raise ValueError("patience and max_iterations must be >= 1")
        if self.perturbation_mode not in ("relative", "absolute"):
            raise ValueError("perturbation_mode must be 'relative' or 'absolute'")

    def replace(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["cost"] = self.cost.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def harmonic_run(**kw):
    """Harmonic-matching run: {H_H, H_10, H_10^W} weighted [1, 1, 3], 4000 iterations."""
    return MorisConfig(**{"cost": HARMONIC_COST, "max_iterations": 4000, "name": "moris_harmonic", **kw})


def envelope_run(**kw):
    """Envelope-matching run: {E_D, E_D1, E_D2}, 300 iterations."""
    from .metrics import ENVELOPE_COST

    return MorisConfig(**{"cost": ENVELOPE_COST, "max_iterations": 300, "name": "moris_envelope", **kw})


@dataclass
class SearchTrace:
    d0: float
    iteration: list = field(default_factory=list)
    d_proposed: list = field(default_factory=list)
    d_best: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    coords: list = field(default_factory=list)
    stop_reason: str = ""

    def append(self, i, d_prop, d_best, acc, idx):
        self.iteration.append(i)
        self.d_proposed.append(d_prop)
        self.d_best.append(d_best)
        self.accepted.append(acc)
        self.coords.append(tuple(int(j) for j in idx))

    def __len__(self):
        return len(self.iteration)

    @property
    def final(self):
        return self.d_best[-1] if self.d_best else self.d0

    def best_after(self, k):
        """Best distance after k iterations (k=0: the starting distance)."""
        if k <= 0 or not self.d_best:
            return self.d0
        return self.d_best[min(k, len(self.d_best)) - 1]

    def __eq__(self, other):
        return (
            isinstance(other, SearchTrace)
            and self.d0 == other.d0
            and self.iteration == other.iteration
            and self.d_proposed == other.d_proposed
            and self.d_best == other.d_best
            and self.accepted == other.accepted
            and self.coords == other.coords
        )

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["iteration", "d_proposed", "d_best", "accepted"])
        w.writerow([0, repr(self.d0), repr(self.d0), 1])
        for i, dp, db, a in zip(self.iteration, self.d_proposed, self.d_best, self.accepted):
            w.writerow([i, repr(float(dp)), repr(float(db)), int(a)])
        return buf.getvalue()

    def write_csv(self, path):
        atomic_write_text(path, self.to_csv())


# -- selection stage ---------------------------------------------------------

def select_best(candidates, target, cfg, note, render=RenderSettings(), workers=1):
    """Render every candidate and return (best ParamVector, index, distances).

    A candidate that fails to render gets +inf. Ties keep the earliest index.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("select_best needs at least one candidate")
    acfg = cfg.analysis or render.analysis_config()
    tgt = analyze(target, acfg)

    def score(theta):
        try:
            return evaluate_cost(tgt, render.render(theta, note), cfg.cost, acfg)
        except FluematchError as exc:
            log.warning("candidate failed: %s", exc)
            return math.inf

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            dists = list(pool.map(score, candidates))
    else:
        dists = [score(c) for c in candidates]
    best = 0
    for i, d in enumerate(dists):
        if d < dists[best]:
            best = i
    if not math.isfinite(dists[best]):
        raise AllCandidatesFailed(f"none of {len(candidates)} candidates rendered")
    return candidates[best], best, dists


# -- perturbation and local search -----------------------------------------

def n_perturbed(sparsity, n):
    return max(1, math.ceil(sparsity * n - 1e-9))


def perturb(theta_b, d_b, cfg, rng):
    """Sparse Gaussian perturbation of a normalized vector; returns (proposal, indices).

    ceil(sparsity*n) coordinates j are drawn without replacement and set to
    theta_b[j] + step_size * d_b * g_j * scale_j, g_j ~ N(0, sigma), with
    scale_j = |theta_b[j]| (relative) or 1 (absolute), then clamped to [-1, 1].
    """
    theta_b = np.asarray(theta_b, dtype=float)
    n = theta_b.size
    idx = rng.choice(n, size=n_perturbed(cfg.sparsity, n), replace=False)
    g = rng.normal(0.0, cfg.gaussian_sigma, size=idx.size)
    scale = np.abs(theta_b[idx]) if cfg.perturbation_mode == "relative" else 1.0
    out = theta_b.copy()
    out[idx] = np.clip(theta_b[idx] + cfg.step_size * d_b * g * scale, -1.0, 1.0)
    return out, idx


def _step_scale(d_b, d0):
    return d_b / d0 if d0 > 0 else 0.0


def moris_optimize(theta_0, target, cfg, note, render=RenderSettings(), analysis=None):
    """Accept-if-better random iterative search from theta_0 toward target.

    Returns (best ParamVector, SearchTrace). Stops when the best distance is
    <= epsilon, after ``patience`` iterations without improvement, or at
    ``max_iterations``. Step sizes use the best distance divided by the start
    distance. A proposal that fails to render counts as +inf.
    """
    acfg = analysis or render.analysis_config()
    tgt = analyze(target, acfg)
    cost = cfg.cost
    rng = np.random.default_rng(cfg.seed)

    def distance(theta):
        return evaluate_cost(tgt, render.render(theta, note), cost, acfg)

    try:
        d0 = distance(theta_0)
    except FluematchError as exc:
        raise StageError(cfg.name, f"initial parameters failed: {exc}") from exc

    trace = SearchTrace(d0=d0)
    z_b = theta_0.normalized()
    best = theta_0
    d_b = d0
    if d_b <= cfg.epsilon:
        trace.stop_reason = "threshold"
        return best, trace
    stale = 0
    trace.stop_reason = "max_iterations"
    for i in range(1, cfg.max_iterations + 1):
        z, idx = perturb(z_b, _step_scale(d_b, d0), cfg, rng)
        try:
            theta = ParamVector.from_normalized(z)
            d = distance(theta)
        except FluematchError as exc:
            log.debug("proposal %d failed: %s", i, exc)
            d = math.inf
        accepted = d < d_b
        if accepted:
            z_b, best, d_b = z, theta, d
            stale = 0
        else:
            stale += 1
        trace.append(i, d, d_b, accepted, idx)
        if d_b <= cfg.epsilon:
            trace.stop_reason = "threshold"
            break
        if stale >= cfg.patience:
            trace.stop_reason = "patience"
            break
    return best, trace


def ris_optimize(theta_0, target, metric, cfg, note, render=RenderSettings(), analysis=None):
    """Single-metric random iterative search, written without the weighted-cost machinery.

    Uses the stopping rules and random stream of ``cfg`` (its cost is ignored).
    """
    acfg = analysis or render.analysis_config()
    tgt = analyze(target, acfg)
    rng = np.random.default_rng(cfg.seed)
    n = P.N_PARAMS
    k = n_perturbed(cfg.sparsity, n)

    d0 = metric_value(metric, tgt, render.render(theta_0, note), acfg)
    trace = SearchTrace(d0=d0)
    best_z = theta_0.normalized()
    best_d = d0
    if best_d <= cfg.epsilon:
        trace.stop_reason = "threshold"
        return theta_0, trace
    best_theta = theta_0
    since = 0
    trace.stop_reason = "max_iterations"
    for it in range(1, cfg.max_iterations + 1):
        chosen = rng.choice(n, size=k, replace=False)
        steps = rng.normal(0.0, cfg.gaussian_sigma, size=k)
        weight = best_d / d0
        z = best_z.copy()
        if cfg.perturbation_mode == "relative":
            z[chosen] = np.clip(best_z[chosen] + cfg.step_size * weight * steps * np.abs(best_z[chosen]), -1.0, 1.0)
        else:
            z[chosen] = np.clip(best_z[chosen] + cfg.step_size * weight * steps * 1.0, -1.0, 1.0)
        try:
            theta = ParamVector.from_normalized(z)
            d = metric_value(metric, tgt, render.render(theta, note), acfg)
        except FluematchError:
            d = math.inf
        if d < best_d:
            best_z, best_theta, best_d = z, theta, d
            since = 0
            trace.append(it, d, best_d, True, chosen)
        else:
            since += 1
            trace.append(it, d, best_d, False, chosen)
        if best_d <= cfg.epsilon:
            trace.stop_reason = "threshold"
            break
        if since >= cfg.patience:
            trace.stop_reason = "patience"
            break
    return best_theta, trace


# -- full pipeline -------------------------------------------------------------

@dataclass
class PipelineResult:
    note: int
    thetas: dict  # stage -> ParamVector
    distances: dict  # stage -> {metric id: value}
    candidate_distances: list
    selected_index: int
    traces: dict  # run name -> SearchTrace
    stage_costs: dict  # stage -> {cost name: value}

    @property
    def final_theta(self):
        return self.thetas[list(self.thetas)[-1]]

    def stage_rows(self):
        """[(stage, {metric: value})] in pipeline order."""
        return [(s, self.distances[s]) for s in self.thetas]

    def to_json(self):
        return json.dumps(
            {
                "note": self.note,
                "selected_index": self.selected_index,
                "candidate_distances": [None if not math.isfinite(d) else d for d in self.candidate_distances],
                "stages": {
                    s: {
                        "distances": self.distances[s],
                        "costs": self.stage_costs.get(s, {}),
                        "theta_normalized": self.thetas[s].normalized().tolist(),
                        "theta_physical": self.thetas[s].as_dict(),
                    }
                    for s in self.thetas
                },
                "runs": {k: {"d0": t.d0, "final": t.final, "iterations": len(t), "stop": t.stop_reason}
                         for k, t in self.traces.items()},
            },
            indent=2,
        )


def ns_candidates(target, ensemble, feature_cfg):
    """Features of the target fed through each network; clipped to [-1, 1] and denormalized."""
    feats = extract_features(target, feature_cfg).values
    out = []
    for mlp in ensemble:
        z = np.clip(mlp.predict(feats[None, :])[0], -1.0, 1.0)
        out.append(ParamVector.from_normalized(z))
    return out


def _fit_to(target, render):
    n = int(round(render.duration_s * render.sample_rate_hz))
    if target.sample_rate_hz != render.sample_rate_hz:
        raise StageError("input", f"target rate {target.sample_rate_hz} != render rate {render.sample_rate_hz}")
    x = target.samples[:n]
    if x.size < n:
        x = np.concatenate([x, np.zeros(n - x.size)])
    return Tone(x, target.sample_rate_hz, target.note_number, target.f0_hz)


def run_pipeline(target, ensemble, selection_cfg=SelectionConfig(), moris_runs=(),
                 render=RenderSettings(), feature_cfg=None, report_metrics=REPORT_METRICS,
                 workers=1, candidates=None):
    """Neural stage -> selection stage -> each MORIS run in order.

    ``ensemble`` is ordered best-first; its first network is the NS row.
    ``candidates`` may be given instead of an ensemble (pre-computed NS output).
    """
    note = target.note_number
    search_cfg = selection_cfg.analysis or render.analysis_config()
    if candidates is None:
        if not ensemble:
            raise StageError("NS", "ensemble is empty")
        fcfg = feature_cfg or AnalysisConfig.for_duration(target.duration_s)
        try:
            candidates = ns_candidates(target, ensemble, fcfg)
        except FluematchError as exc:
            raise StageError("NS", exc) from exc
    search_target = analyze(_fit_to(target, render), search_cfg)

    def measure(theta):
        tone = analyze(render.render(theta, note), search_cfg)
        vals = {}
        for m in report_metrics:
            vals[str(m)] = metric_value(m, search_target, tone, search_cfg)
        costs = {"selection": evaluate_cost(search_target, tone, selection_cfg.cost, search_cfg)}
        for run in moris_runs:
            costs[run.name] = evaluate_cost(search_target, tone, run.cost, search_cfg)
        return vals, costs

    thetas, dists, costs, traces = {}, {}, {}, {}
    try:
        thetas["NS"] = candidates[0]
        dists["NS"], costs["NS"] = measure(candidates[0])
        best, idx, cand_d = select_best(candidates, search_target, replace(selection_cfg, analysis=search_cfg),
                                        note, render, workers=workers)
    except FluematchError as exc:
        raise StageError("SS", exc) from exc
    thetas["SS"] = best
    dists["SS"], costs["SS"] = measure(best)

    theta = best
    for run in moris_runs:
        try:
            theta, trace = moris_optimize(theta, search_target, run, note, render, search_cfg)
        except FluematchError as exc:
            raise StageError(run.name, exc) from exc
        thetas[run.name] = theta
        traces[run.name] = trace
        dists[run.name], costs[run.name] = measure(theta)
    return PipelineResult(note, thetas, dists, cand_d, idx, traces, costs)
