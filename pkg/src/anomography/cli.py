"""Command-line harness: simulate, fit, test, roc and ingest.

One experiment lives in one directory::

    manifest.json                 config, config hash, package version
    labels.csv                    trial,anomalous
    trials/trial_00000/           truth.csv baseline.csv traffic.csv flowmap.json
                                  meta.json obs_<fraction>.csv
    fits/<method>/<fraction>/trial_00000.json
    psi.json accuracy.csv summary.json
    fraction_<fraction>/roc_<method>.csv

Every stage skips work whose artifact already exists, so an interrupted batch
can be rerun with the same command.  Trial and fit files are written to a
temporary name and renamed, so a partial file is never taken as complete.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .anomtest import critical_value, edge_statistics, roc_curve, operating_point
from .errors import AnomographyError
from .experiments import (
    METHODS,
    ORACLE,
    ExperimentConfig,
    TrialRecord,
    accuracy_table,
    evaluate,
    observation_seed,
)
from .io import (
    ingest,
    observations_from_csv,
    observations_to_csv,
    rates_to_csv,
    read_json,
    read_rates,
)
from .netsim import FlowMap, Trial, simulate_trial

__all__ = ["main", "build_parser", "load_config", "ExperimentDir"]


def _frac_tag(frac):
    return f"{frac:.4f}"


def _write_text(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def traffic_to_csv(traffic):
    """Nonzero counts as edge records ``t,src,dst,count``."""
    lines = ["t,src,dst,count\n"]
    for t, i, j in zip(*np.nonzero(traffic)):
        lines.append(f"{t},{i},{j},{int(traffic[t, i, j])}\n")
    return "".join(lines)


def traffic_from_csv(text, T, N):
    out = np.zeros((T, N, N), dtype=np.int64)
    rows = text.splitlines()
    if not rows or rows[0] != "t,src,dst,count":
        raise ValueError("expected header t,src,dst,count")
    for line in rows[1:]:
        t, i, j, c = (int(x) for x in line.split(","))
        out[t, i, j] = c
    return out


class ExperimentDir:
    """Paths and readers/writers for one experiment directory."""

    def __init__(self, root):
        self.root = os.fspath(root)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    @property
    def manifest_path(self):
        return self.path("manifest.json")

    def trial_dir(self, index):
        return self.path("trials", f"trial_{index:05d}")

    def fit_path(self, method, frac, index):
        return self.path("fits", method, _frac_tag(frac), f"trial_{index:05d}.json")

    def trial_done(self, index):
        return os.path.exists(os.path.join(self.trial_dir(index), "meta.json"))

    def write_trial(self, trial, cfg):
        d = self.trial_dir(trial.index)
        T, N, _ = trial.traffic.shape
        _write_text(os.path.join(d, "truth.csv"), rates_to_csv(trial.truth))
        _write_text(os.path.join(d, "baseline.csv"), rates_to_csv(trial.baseline))
        _write_text(os.path.join(d, "traffic.csv"), traffic_to_csv(trial.traffic))
        _write_text(os.path.join(d, "flowmap.json"), _dump_json(trial.flowmap.to_json()))
        for frac in cfg.fractions:
            obs = trial.observe(frac, observation_seed(cfg.scenario.seed, trial.index, frac))
            _write_text(os.path.join(d, f"obs_{_frac_tag(frac)}.csv"), observations_to_csv(obs))
        meta = {"index": trial.index, "anomalous": trial.anomalous, "known": trial.known, "T": T, "N": N}
        # meta.json last: its presence marks the trial as complete
        _write_text(os.path.join(d, "meta.json"), _dump_json(meta))

    def read_trial(self, index):
        d = self.trial_dir(index)
        meta = read_json(os.path.join(d, "meta.json"))
        N, known, T = meta["N"], meta["known"], meta["T"]
        with open(os.path.join(d, "traffic.csv"), encoding="utf-8") as fh:
            traffic = traffic_from_csv(fh.read(), T, N)
        flowmap = FlowMap.from_json(read_json(os.path.join(d, "flowmap.json")))
        return Trial(
            index=index,
            anomalous=bool(meta["anomalous"]),
            truth=read_rates(os.path.join(d, "truth.csv"), N),
            baseline=read_rates(os.path.join(d, "baseline.csv"), known),
            traffic=traffic,
            flowmap=flowmap,
            known=known,
        )

    def read_observations(self, trial, frac):
        path = os.path.join(self.trial_dir(trial.index), f"obs_{_frac_tag(frac)}.csv")
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        est_map, _ = trial.flowmap.restrict(trial.known)
        return observations_from_csv(text, est_map, trial.known, trial.traffic.shape[0])

    def read_records(self, cfg):
        """All fit records present on disk, with the list of missing ones."""
        records, missing = [], []
        for method in cfg.methods:
            for frac in cfg.fractions:
                for i in range(cfg.trials):
                    p = self.fit_path(method, frac, i)
                    if not os.path.exists(p):
                        missing.append((method, frac, i))
                        continue
                    records.append(TrialRecord.from_dict(read_json(p)["record"]))
        return records, missing


def load_config(args):
    """Experiment config from ``--config`` or the directory manifest, plus CLI overrides."""
    ed = ExperimentDir(args.out)
    manifest = read_json(ed.manifest_path) if os.path.exists(ed.manifest_path) else None
    if args.config:
        cfg = ExperimentConfig.from_dict(read_json(args.config))
    elif manifest is not None:
        cfg = ExperimentConfig.from_dict(manifest["config"])
    else:
        cfg = ExperimentConfig()
    updates = {}
    if args.seed is not None:
        updates["scenario"] = cfg.scenario.with_seed(args.seed)
    if args.method:
        updates["methods"] = tuple(args.method)
    for key in ("trials", "T"):
        v = getattr(args, key, None)
        if v is not None:
            updates[key] = v
    if getattr(args, "fractions", None):
        updates["fractions"] = tuple(float(x) for x in args.fractions.split(","))
    if args.jobs is not None:
        updates["jobs"] = args.jobs
    if updates:
        d = cfg.to_dict()
        d.update({k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in updates.items()})
        cfg = ExperimentConfig.from_dict(d)
    cfg.output_dir = ed.root
    return cfg, manifest


def _check_manifest(cfg, manifest, ed, stage):
    """Later stages may narrow methods but must share the simulated data."""
    if manifest is None:
        if stage != "simulate":
            raise AnomographyError(f"{ed.manifest_path} not found; run simulate first")
        return
    sim_keys = ("scenario", "T", "anomaly_coin", "force_label")
    old = manifest["config"]
    new = cfg.to_dict()
    for k in sim_keys:
        if old.get(k) != new.get(k):
            raise AnomographyError(f"config key {k!r} differs from {ed.manifest_path}")
    if stage != "simulate":
        extra = set(cfg.fractions) - set(old["fractions"])
        if extra or cfg.trials > old["trials"]:
            raise AnomographyError("fractions or trials exceed the simulated set; rerun simulate")


def _log(msg):
    print(msg, file=sys.stderr)


# -- stages ------------------------------------------------------------------

def cmd_simulate(cfg, manifest):
    ed = ExperimentDir(cfg.output_dir)
    _check_manifest(cfg, manifest, ed, "simulate")
    os.makedirs(ed.root, exist_ok=True)
    if manifest is not None and set(cfg.fractions) - set(manifest["config"]["fractions"]):
        # new fractions need observation files for existing trials as well
        redo = True
    else:
        redo = False
    _write_text(ed.manifest_path, _dump_json(cfg.manifest()))
    labels = []
    made = 0
    for i in range(cfg.trials):
        if ed.trial_done(i) and not redo:
            meta = read_json(os.path.join(ed.trial_dir(i), "meta.json"))
            labels.append((i, bool(meta["anomalous"])))
            continue
        trial = simulate_trial(cfg.scenario, i, cfg.T, cfg.anomaly_coin, anomalous=cfg.force_label)
        ed.write_trial(trial, cfg)
        labels.append((i, trial.anomalous))
        made += 1
    _write_text(ed.path("labels.csv"), "trial,anomalous\n" + "".join(f"{i},{int(a)}\n" for i, a in labels))
    _log(f"simulate: {made} new, {cfg.trials - made} existing trials in {ed.root}")
    return 0


def _fit_job(job):
    cfg, index, todo = job
    ed = ExperimentDir(cfg.output_dir)
    errors = []
    try:
        trial = ed.read_trial(index)
    except (OSError, ValueError, KeyError) as exc:
        return [(index, f"trial {index}: cannot read artifacts: {exc}")]
    oracle_fit = None
    for frac in sorted({f for f, _ in todo}):
        try:
            obs = ed.read_observations(trial, frac)
        except (OSError, ValueError) as exc:
            errors.append((index, f"trial {index} fraction {frac}: cannot read observations: {exc}"))
            continue
        for f, method in todo:
            if f != frac:
                continue
            try:
                rec, fit = evaluate(cfg, index, trial, frac, obs, method,
                                    fit=oracle_fit if method == ORACLE else None)
            except AnomographyError as exc:
                errors.append((index, f"trial {index} fraction {frac} {method}: {exc}"))
                continue
            if method == ORACLE:
                oracle_fit = fit
            payload = {"record": rec.to_dict()}
            if fit is not None:
                stats = edge_statistics(fit, trial.baseline, scale=cfg.scale)
                payload["lambda_hat"] = fit.lambda_hat.tolist()
                payload["edge_statistics"] = [[_enc(v) for v in row] for row in stats]
            _write_text(ed.fit_path(method, frac, index), _dump_json(payload))
    return errors


def _enc(v):
    return "inf" if np.isinf(v) else float(v)


def cmd_fit(cfg, manifest):
    ed = ExperimentDir(cfg.output_dir)
    _check_manifest(cfg, manifest, ed, "fit")
    jobs = []
    for i in range(cfg.trials):
        todo = [(f, m) for f in cfg.fractions for m in cfg.methods if not os.path.exists(ed.fit_path(m, f, i))]
        if todo:
            jobs.append((cfg, i, todo))
    errors = []
    if cfg.jobs > 1 and len(jobs) > 1:
        from multiprocessing import Pool

        with Pool(cfg.jobs) as pool:
            for errs in pool.imap_unordered(_fit_job, jobs):
                errors.extend(errs)
    else:
        for job in jobs:
            errors.extend(_fit_job(job))
    for _, msg in sorted(errors):
        _log(f"fit: {msg}")
    _log(f"fit: {len(jobs)} trials processed, {len(errors)} errors")
    return 1 if errors else 0


def _records_or_fail(cfg, ed, stage):
    records, missing = ed.read_records(cfg)
    for method, frac, i in missing:
        _log(f"{stage}: missing fit for trial {i} fraction {frac} {method}")
    return records, missing


def cmd_test(cfg, manifest):
    ed = ExperimentDir(cfg.output_dir)
    _check_manifest(cfg, manifest, ed, "test")
    records, missing = _records_or_fail(cfg, ed, "test")
    P = cfg.scenario.P
    c = critical_value(P, cfg.alpha)
    rows = accuracy_table(records, alpha=cfg.alpha, P=P)
    lines = ["method,fraction,accuracy,tp,tn,fp,fn\n"]
    lines += [f"{m},{f!r},{a!r},{tp},{tn},{fp},{fn}\n" for m, f, a, tp, tn, fp, fn in rows]
    _write_text(ed.path("accuracy.csv"), "".join(lines))
    psi = [
        {
            "trial": r.trial,
            "fraction": r.fraction,
            "method": r.method,
            "label": r.label,
            "psi": _enc(r.psi),
            "reject": bool(r.psi > c),
            "mismatch": r.mismatch,
        }
        for r in records
    ]
    _write_text(ed.path("psi.json"), _dump_json({"critical_value": c, "alpha": cfg.alpha, "trials": psi}))
    _update_summary(ed, {"accuracy": [dict(zip(("method", "fraction", "accuracy", "tp", "tn", "fp", "fn"), r))
                                      for r in rows],
                         "fit": _fit_summary(records)})
    _log(f"test: {len(records)} records, critical value {c:.4f}")
    return 1 if missing else 0


def _fit_summary(records):
    out = []
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.fraction), []).append(r)
    for (m, f), recs in sorted(groups.items()):
        mse = [r.mse for r in recs if np.isfinite(r.mse)]
        out.append({
            "method": m,
            "fraction": f,
            "n": len(recs),
            "mse_mean": float(np.mean(mse)) if mse else None,
            "iterations_median": float(np.median([r.iterations for r in recs])),
            "mismatch_rate": float(np.mean([r.mismatch for r in recs])),
        })
    return out


def _update_summary(ed, entries):
    path = ed.path("summary.json")
    data = read_json(path) if os.path.exists(path) else {}
    data.update(entries)
    _write_text(path, _dump_json(data))


def cmd_roc(cfg, manifest):
    ed = ExperimentDir(cfg.output_dir)
    _check_manifest(cfg, manifest, ed, "roc")
    records, missing = _records_or_fail(cfg, ed, "roc")
    c = critical_value(cfg.scenario.P, cfg.alpha)
    summary = []
    status = 1 if missing else 0
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.fraction), []).append(r)
    for (method, frac), recs in sorted(groups.items()):
        labels = [r.label for r in recs]
        stats = [r.psi for r in recs]
        entry = {"method": method, "fraction": frac, "n": len(recs), "positives": int(sum(labels))}
        if all(labels) or not any(labels):
            _log(f"roc: {method} fraction {frac}: labels are all {bool(labels[0])}; no curve")
            entry["error"] = "degenerate labels"
            status = 1
        else:
            curve = roc_curve(stats, labels)
            fpr, tpr = operating_point(stats, labels, c)
            _write_text(ed.path(f"fraction_{_frac_tag(frac)}", f"roc_{method}.csv"), curve.to_csv())
            entry.update({"auc": curve.auc, "operating_point": {"fpr": fpr, "tpr": tpr, "threshold": c}})
        summary.append(entry)
    _update_summary(ed, {"roc": summary})
    return status


def cmd_ingest(args):
    windows = None
    if args.baseline_windows:
        a, b = args.baseline_windows.split(":")
        windows = (int(a), int(b))
    res = ingest(
        args.edges,
        args.window_length,
        baseline_csv=args.baseline,
        flowmap_file=args.flowmap,
        observed_file=args.observed,
        baseline_windows=windows,
        strict=args.strict,
        origin=args.origin,
    )
    ed = ExperimentDir(args.out)
    _write_text(ed.path("observations.csv"), observations_to_csv(res.obs))
    _write_text(ed.path("baseline.csv"), rates_to_csv(res.baseline))
    _write_text(ed.path("flowmap.json"), _dump_json(res.obs.flowmap.to_json()))
    info = {
        "nodes": [str(n) for n in res.nodes],
        "P": res.obs.P,
        "T": res.obs.T,
        "H": res.obs.H,
        "observed_edges": [list(e) for e in res.obs.observed_edges],
        "window_length": args.window_length,
        "window_starts": res.window_starts,
        "skipped": [{"line": line, "reason": why} for line, why in res.skipped],
    }
    _write_text(ed.path("ingest.json"), _dump_json(info))
    for line, why in res.skipped:
        _log(f"ingest: skipped line {line}: {why}")
    _log(f"ingest: P={res.obs.P} T={res.obs.T} H={res.obs.H}, {len(res.skipped)} rows skipped")
    return 0


# -- argument parsing -------------------------------------------------------

def _common(p):
    p.add_argument("--config", metavar="PATH", help="experiment config (JSON)")
    p.add_argument("--out", metavar="DIR", required=True, help="experiment directory")
    p.add_argument("--seed", type=int, metavar="N", help="master seed (overrides the config)")
    p.add_argument("--jobs", type=int, metavar="N", help="worker processes")
    p.add_argument("--method", action="append", choices=METHODS, metavar="NAME",
                   help=f"method to run, repeatable; one of {', '.join(METHODS)}")
    p.add_argument("--trials", type=int, metavar="N")
    p.add_argument("--T", type=int, metavar="N", help="windows per trial")
    p.add_argument("--fractions", metavar="LIST", help="comma-separated observed-edge fractions")


def build_parser():
    parser = argparse.ArgumentParser(prog="anomography", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("simulate", "generate trial artifacts"),
        ("fit", "fit every method to every trial and fraction"),
        ("test", "decisions, psi values and accuracy table"),
        ("roc", "ROC curves and AUC per method and fraction"),
        ("run", "simulate, fit, test and roc in sequence"),
    ]:
        _common(sub.add_parser(name, help=text))
    p = sub.add_parser("ingest", help="aggregate an edge list into observations and a baseline")
    p.add_argument("edges", help="edge CSV with header t,src,dst,count")
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("--baseline", metavar="PATH", help="baseline CSV src,dst,rate")
    p.add_argument("--baseline-windows", metavar="A:B",
                   help="estimate the baseline as the mean over windows [A, B)")
    p.add_argument("--flowmap", metavar="PATH", help="JSON list of edge sets")
    p.add_argument("--observed", metavar="PATH", help="CSV src,dst of directly observed edges")
    p.add_argument("--window-length", type=float, default=1.0)
    p.add_argument("--origin", type=float, help="time of window 0 (default: earliest record)")
    p.add_argument("--strict", action="store_true", help="abort on the first malformed row")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "ingest":
            return cmd_ingest(args)
        cfg, manifest = load_config(args)
        if args.command == "run":
            status = cmd_simulate(cfg, manifest)
            manifest = read_json(ExperimentDir(cfg.output_dir).manifest_path)
            for stage in (cmd_fit, cmd_test, cmd_roc):
                status = max(status, stage(cfg, manifest))
            return status
        stage = {"simulate": cmd_simulate, "fit": cmd_fit, "test": cmd_test, "roc": cmd_roc}[args.command]
        return stage(cfg, manifest)
    except (AnomographyError, OSError, ValueError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
