"""``fluematch`` command line: dataset -> training -> matching -> evaluation.

Every command reads the same TOML config (``--config`` or $FLUEMATCH_CONFIG)
and accepts ``--set section.key=value`` overrides. Outputs are written
atomically; the exit status is 0 only if every requested artifact was produced.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import corpus, neural
from .config import load_config
from .errors import FluematchError, StageError
from .features import AnalysisConfig, extract_features, features_to_csv
from .metrics import REPORT_METRICS, MetricId, evaluate_cost, metric_rows_to_csv, metric_value
from .model import render_tone
from .params import ParamVector
from .search import run_pipeline
from .tone import Tone, atomic_write_text, read_wav, write_wav

log = logging.getLogger("fluematch")


class CommandError(Exception):
    pass


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _mkdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create {path}: {exc}") from exc


def read_theta(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        return ParamVector.from_json(text)
    return ParamVector.from_text(text)


def load_tone(path, note, sample_rate_hz=None):
    x, sr = read_wav(path)
    if sample_rate_hz and sr != sample_rate_hz:
        x, sr = corpus.resample(x, sr, sample_rate_hz), sample_rate_hz
    return Tone(x, sr, note)


# -- gen-dataset ---------------------------------------------------------------------

def cmd_gen_dataset(cfg, args):
    ds = cfg.dataset
    kw = dict(duration_s=ds.duration_s, sample_rate_hz=ds.sample_rate_hz, workers=cfg.workers)
    if ds.preset:
        manifest = corpus.generate_preset(ds.preset, ds.notes, ds.seed, ds.scale, **kw)
    else:
        manifest = corpus.generate_contrived(ds.n_stops, ds.notes, ds.prior(), ds.seed,
                                             footage=ds.footage, **kw)
    path = cfg.dataset_path
    _mkdir(os.path.dirname(os.path.abspath(path)))
    try:
        manifest.save(path)
        manifest.write_param_table(os.path.splitext(path)[0] + "_params.csv")
    except OSError as exc:
        raise CommandError(f"cannot write dataset: {exc}") from exc
    print(f"wrote {len(manifest)} items from {len(manifest.stops())} stops to {path}")
    return 0


# -- train ---------------------------------------------------------------------------

def cmd_train(cfg, args):
    tr = cfg.train
    n_trials = args.n_trials or tr.n_trials
    datasets = tr.datasets or {"all": cfg.dataset_path}
    _mkdir(cfg.models_dir)
    roster = []
    for name, path in sorted(datasets.items()):
        manifest = corpus.DatasetManifest.load(path)
        X, Y = corpus.training_arrays(manifest, cfg.analysis, workers=cfg.workers)
        trials = neural.hyperparameter_search(tr.space, X, Y, n_trials, seed=tr.seed, workers=cfg.workers)
        out = os.path.join(cfg.models_dir, name)
        _mkdir(out)
        neural.write_ledger(os.path.join(out, "trials.csv"), trials)
        ok = [t for t in trials if t.model is not None]
        if not ok:
            raise CommandError(f"{name}: all {len(trials)} trials failed")
        for t in ok[: tr.top_k]:
            fname = os.path.join(out, f"rank{t.rank:02d}.npz")
            t.model.save(fname)
            atomic_write_text(os.path.join(out, f"rank{t.rank:02d}_history.csv"), t.model.history_csv())
            if cfg.report.figures:
                from .report import plot_training

                plot_training(t.model.history, os.path.join(out, f"rank{t.rank:02d}_history.png"))
            roster.append({"file": os.path.relpath(fname, cfg.models_dir), "subset": name,
                           "val_mae": t.val_mae})
        print(f"{name}: {len(ok)}/{len(trials)} trials ok, best validation MAE {ok[0].val_mae:.4g}")
    roster.sort(key=lambda r: (r["val_mae"], r["file"]))
    atomic_write_text(os.path.join(cfg.models_dir, "roster.json"), json.dumps(roster, indent=2))
    return 0


def load_ensemble(cfg):
    """Networks best-first: the configured list, else the models directory roster."""
    if cfg.ensemble:
        files = list(cfg.ensemble)
    else:
        roster_path = os.path.join(cfg.models_dir, "roster.json")
        if not os.path.isfile(roster_path):
            raise CommandError(f"no ensemble configured and no {roster_path}; run 'train' first")
        with open(roster_path, encoding="utf-8") as fh:
            files = [os.path.join(cfg.models_dir, r["file"]) for r in json.load(fh)]
    if not files:
        raise CommandError("ensemble is empty")
    return [neural.Mlp.load(f) for f in files]


# -- estimate ------------------------------------------------------------------------

def _feature_cfg(cfg, target):
    if abs(target.duration_s - cfg.dataset.duration_s) < 1e-9:
        return cfg.analysis
    base = cfg.analysis.to_dict()
    base.pop("steady_window")
    base.pop("attack_window_end_s")
    return AnalysisConfig.for_duration(target.duration_s, **base)


def estimate(cfg, target, out_dir, ensemble, runs=None, write_figures=None):
    """Run the pipeline on one target and write its report files into out_dir."""
    runs = cfg.moris if runs is None else runs
    _mkdir(out_dir)
    result = run_pipeline(target, ensemble, cfg.selection, runs, cfg.render,
                          feature_cfg=_feature_cfg(cfg, target), workers=cfg.workers)
    metrics = [str(m) for m in REPORT_METRICS]
    cost_names = ["selection", *(r.name for r in runs)]
    rows = []
    for stage, dists in result.stage_rows():
        costs = result.stage_costs[stage]
        rows.append([stage, *(_fmt(dists[m]) for m in metrics), *(_fmt(costs[c]) for c in cost_names)])
    atomic_write_text(os.path.join(out_dir, "stages.csv"),
                      _csv_text(["stage", *metrics, *(f"cost_{c}" for c in cost_names)], rows))
    for name, trace in result.traces.items():
        trace.write_csv(os.path.join(out_dir, f"trace_{name}.csv"))
    theta = result.final_theta
    write_wav(os.path.join(out_dir, "match.wav"), cfg.render.render(theta, target.note_number))
    atomic_write_text(os.path.join(out_dir, "theta.txt"), theta.to_text())
    atomic_write_text(os.path.join(out_dir, "theta.json"),
                      json.dumps({"normalized": theta.normalized().tolist(), "physical": theta.as_dict()},
                                 indent=2))
    atomic_write_text(os.path.join(out_dir, "report.json"), result.to_json())
    lines = [f"note {target.note_number}  selected candidate {result.selected_index}"]
    lines += ["  ".join(f"{h:>10}" for h in ["stage", *metrics])]
    for stage, dists in result.stage_rows():
        lines.append("  ".join([f"{stage:>10}", *(f"{dists[m]:10.4g}" for m in metrics)]))
    atomic_write_text(os.path.join(out_dir, "summary.txt"), "\n".join(lines) + "\n")
    figures = cfg.report.figures if write_figures is None else write_figures
    if figures and result.traces:
        from .report import plot_traces

        plot_traces(result.traces, os.path.join(out_dir, "convergence.png"), f"note {target.note_number}")
    return result, "\n".join(lines)


def cmd_estimate(cfg, args):
    if args.item:
        manifest = corpus.DatasetManifest.load(args.manifest or cfg.dataset_path)
        stop, _, note = args.item.rpartition(":")
        found = [it for it in manifest.items if it.stop == stop and it.note_number == int(note)]
        if not found:
            raise CommandError(f"item {args.item} not in manifest")
        target = manifest.tone(found[0])
    elif args.wav:
        if args.note is None:
            raise CommandError("--note is required with a WAV target")
        target = load_tone(args.wav, args.note, cfg.render.sample_rate_hz)
    else:
        raise CommandError("give a target WAV or --item STOP:NOTE")
    ensemble = load_ensemble(cfg)
    out = args.out or cfg.output_dir
    _, summary = estimate(cfg, target, out, ensemble)
    print(summary)
    return 0


# -- evaluate -------------------------------------------------------------------------

def cmd_evaluate(cfg, args):
    manifest = corpus.DatasetManifest.load(args.manifest or cfg.dataset_path)
    stop = args.stop or manifest.stops()[0]
    items = sorted((it for it in manifest.items if it.stop == stop), key=lambda it: it.note_number)
    if not items:
        raise CommandError(f"stop {stop!r} not in manifest")
    ensemble = load_ensemble(cfg)
    out = args.out or cfg.output_dir
    _mkdir(out)
    checkpoints = cfg.report.checkpoints
    inner = replace(cfg, workers=1) if cfg.workers > 1 else cfg

    def one(item):
        try:
            tgt = manifest.tone(item)
            res, _ = estimate(inner, tgt, os.path.join(out, f"note_{item.note_number:02d}"), ensemble)
            return item.note_number, res, None
        except (FluematchError, OSError) as exc:
            log.error("note %d failed: %s", item.note_number, exc)
            return item.note_number, None, str(exc)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]

    metrics = [str(m) for m in REPORT_METRICS]
    per_note, curves, failures = [], [], []
    sums = {}
    ok = [(n, r) for n, r, e in results if r is not None]
    for note, res, err in results:
        if err is not None:
            failures.append([note, err])
    for note, res in ok:
        for stage, dists in res.stage_rows():
            for m in metrics:
                per_note.append([note, stage, m, _fmt(dists[m])])
                sums.setdefault((stage, m), []).append(dists[m])
        for name, tr in res.traces.items():
            for k in checkpoints:
                curves.append([note, name, k, _fmt(tr.best_after(k))])
    atomic_write_text(os.path.join(out, "per_note.csv"), _csv_text(["note", "stage", "metric_id", "value"], per_note))
    agg = [[s, m, _fmt(float(np.mean(v))), len(v)] for (s, m), v in sums.items()]
    atomic_write_text(os.path.join(out, "aggregate.csv"), _csv_text(["stage", "metric_id", "mean", "n_notes"], agg))
    atomic_write_text(os.path.join(out, "checkpoints.csv"),
                      _csv_text(["note", "run", "iteration", "d_best"], curves))
    atomic_write_text(os.path.join(out, "failures.csv"), _csv_text(["note", "error"], failures))
    if cfg.report.figures and ok:
        from .report import plot_checkpoints

        for run in cfg.moris:
            rows = {n: [r.traces[run.name].best_after(k) for k in checkpoints] for n, r in ok if run.name in r.traces}
            if rows:
                plot_checkpoints(rows, checkpoints, os.path.join(out, f"checkpoints_{run.name}.png"),
                                 f"{stop}: {run.name}")
    print(f"{stop}: {len(ok)}/{len(items)} notes matched")
    for s, m, mean, n in agg:
        print(f"  {s:>16} {m:>8} {float(mean):10.4g}")
    return 0 if not failures else 1


# -- small utilities -------------------------------------------------------------------

def cmd_render(cfg, args):
    theta = read_theta(args.theta)
    r = cfg.render
    tone = render_tone(theta, args.note, args.duration or r.duration_s, args.sample_rate or r.sample_rate_hz,
                       r.seed if args.seed is None else args.seed)
    write_wav(args.out, tone)
    print(f"wrote {args.out} ({tone.duration_s:.3f} s, {tone.sample_rate_hz} Hz)")
    return 0


def cmd_features(cfg, args):
    rows, ids, layout = [], [], None
    for path in args.wav:
        tone = load_tone(path, args.note)
        fv = extract_features(tone, _feature_cfg(cfg, tone))
        rows.append(fv.values)
        ids.append(os.path.basename(path))
        layout = fv.layout
    features_to_csv(args.out, np.array(rows), layout, ids)
    print(f"wrote {len(rows)} feature row(s) of length {layout.size} to {args.out}")
    return 0


def cmd_metrics(cfg, args):
    a = load_tone(args.target, args.note)
    b = load_tone(args.candidate, args.note, a.sample_rate_hz)
    n = min(a.samples.size, b.samples.size)
    if a.samples.size != b.samples.size:
        a = Tone(a.samples[:n], a.sample_rate_hz, args.note)
        b = Tone(b.samples[:n], b.sample_rate_hz, args.note)
    acfg = _feature_cfg(cfg, a)
    ids = [MetricId.parse(m) for m in args.metric] if args.metric else list(REPORT_METRICS)
    rows = [(args.note, m, metric_value(m, a, b, acfg)) for m in ids]
    if args.cost:
        rows.append((args.note, "selection_cost", evaluate_cost(a, b, cfg.selection.cost, acfg)))
    metric_rows_to_csv(args.out, rows)
    for _, m, v in rows:
        print(f"{str(m):>16} {v:.6g}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="fluematch", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="TOML config (default: $FLUEMATCH_CONFIG)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. render.seed=3 or moris.0.max_iterations=500")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-dataset", help="render a contrived dataset")

    s = sub.add_parser("train", help="random hyperparameter search over networks")
    s.add_argument("--n-trials", type=int)

    s = sub.add_parser("estimate", help="match one target tone")
    s.add_argument("wav", nargs="?")
    s.add_argument("--note", type=int)
    s.add_argument("--item", help="STOP:NOTE from the dataset manifest")
    s.add_argument("--manifest")
    s.add_argument("--out")

    s = sub.add_parser("evaluate", help="match every note of one stop")
    s.add_argument("--manifest")
    s.add_argument("--stop")
    s.add_argument("--out")

    s = sub.add_parser("render", help="parameter file -> WAV")
    s.add_argument("theta")
    s.add_argument("--note", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--duration", type=float)
    s.add_argument("--sample-rate", type=int)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("features", help="WAV(s) -> feature CSV")
    s.add_argument("wav", nargs="+")
    s.add_argument("--note", type=int, required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("metrics", help="two WAVs -> distance CSV")
    s.add_argument("target")
    s.add_argument("candidate")
    s.add_argument("--note", type=int, required=True)
    s.add_argument("--metric", action="append", help="metric id (repeatable), e.g. H_10 or E_D1")
    s.add_argument("--cost", action="store_true", help="also report the selection cost")
    s.add_argument("--out", required=True)
    return p


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
    "features": cmd_features,
    "metrics": cmd_metrics,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
    except (CommandError, FluematchError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
