"""Monte Carlo study harness: simulate, fit, test and score many trials.

Methods
-------
``MRE-HP``   hierarchical EM warm-started at the L1 projection
``Rand-HP``  hierarchical EM from a random start
``MLEM``     Poisson EM from a random start
``ORACLE``   sample mean of the complete traffic (every edge observed)

Each (trial, fraction) pair uses its own observation seed derived from the
master seed, so results do not depend on scheduling or worker count.
"""

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .anomtest import REPLICA_MEAN, anomaly_test, critical_value, operating_point, roc_curve
from .errors import InconsistentObservationError
from .hpem import HIER, MLEM, EmConfig, run_em
from .netsim import (
    STREAM_INIT,
    STREAM_OBSERVE,
    FlowMap,
    ScenarioSpec,
    _trial_seed,
    observe,
    simulate_trial,
)

__all__ = [
    "METHODS",
    "ExperimentConfig",
    "TrialRecord",
    "fit_method",
    "evaluate",
    "run_trial",
    "run_experiment",
    "accuracy_table",
    "roc_by_method",
    "observation_seed",
]

MRE_HP = "MRE-HP"
RAND_HP = "Rand-HP"
MLEM_METHOD = "MLEM"
ORACLE = "ORACLE"
METHODS = (MRE_HP, RAND_HP, MLEM_METHOD, ORACLE)


@dataclass
class ExperimentConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    trials: int = 200
    T: int = 100
    fractions: tuple = (0.2,)
    alpha: float = 0.05
    em: EmConfig = field(default_factory=EmConfig)
    methods: tuple = (MRE_HP,)
    output_dir: str = "results"
    jobs: int = 1
    anomaly_coin: float = 0.5
    force_label: object = None  # None, True or False
    scale: str = REPLICA_MEAN

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        self.fractions = tuple(float(f) for f in self.fractions)
        if not self.fractions or any(not 0.0 <= f <= 1.0 for f in self.fractions):
            raise ValueError("fractions must be a nonempty subset of [0, 1]")
        self.methods = tuple(self.methods)
        if not self.methods:
            raise ValueError("methods must be nonempty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["scenario"] = self.scenario.to_dict()
        d["em"] = self.em.to_dict()
        d["fractions"] = list(self.fractions)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "scenario" in data:
            data["scenario"] = ScenarioSpec.from_dict(data["scenario"])
        if "em" in data:
            data["em"] = EmConfig.from_dict(data["em"])
        for key in ("fractions", "methods"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def portable_dict(self):
        """``to_dict`` without the output location and worker count, which do not affect results."""
        d = self.to_dict()
        for key in ("output_dir", "jobs"):
            d.pop(key, None)
        return d

    def config_hash(self):
        blob = json.dumps(self.portable_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def manifest(self):
        return {"config": self.portable_dict(), "config_hash": self.config_hash(), "version": __version__}


@dataclass
class TrialRecord:
    trial: int
    fraction: float
    method: str
    label: bool
    psi: float
    reject: bool
    mismatch: bool
    mse: float
    iterations: int
    converged: bool
    seconds: float
    eps_summary: dict = field(default_factory=dict)
    error: str = ""

    def to_dict(self):
        d = asdict(self)
        d["psi"] = "inf" if np.isinf(self.psi) else float(self.psi)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["psi"] = float(d["psi"])
        return cls(**d)


def observation_seed(master, index, fraction):
    return (_trial_seed(master, index), STREAM_OBSERVE, int(round(fraction * 1_000_000)))


def fit_method(method, trial, obs, em_cfg, init_seed):
    """Fit one method; returns a :class:`~anomography.hpem.ModelFit`."""
    base = trial.baseline
    if method == MRE_HP:
        return run_em(obs, base, variant=HIER, init="mre", cfg=em_cfg)
    if method == RAND_HP:
        cfg = EmConfig(**{**em_cfg.to_dict(), "init_seed": init_seed})
        return run_em(obs, base, variant=HIER, init="random", cfg=cfg)
    if method == MLEM_METHOD:
        cfg = EmConfig(**{**em_cfg.to_dict(), "init_seed": init_seed})
        return run_em(obs, base, variant=MLEM, init="random", cfg=cfg)
    if method == ORACLE:
        # complete traffic of the known nodes; with every edge pinned one EM
        # step returns the sample mean
        k = trial.known
        full = observe(trial.traffic[:, :k, :k], FlowMap(()), 1.0, 0)
        cfg = EmConfig(**{**em_cfg.to_dict(), "max_iter": 1})
        return run_em(full, base, variant=MLEM, init="baseline", cfg=cfg)
    raise ValueError(f"unknown method {method!r}")


def evaluate(cfg, index, trial, frac, obs, method, fit=None):
    """Fit (unless ``fit`` is given) and test one method; returns ``(record, fit)``.

    ``fit`` is ``None`` in the result when the observations were inconsistent
    with the model; the record then counts as a rejection.
    """
    init_seed = (_trial_seed(cfg.scenario.seed, index), STREAM_INIT)
    t0 = time.perf_counter()
    if fit is None:
        try:
            fit = fit_method(method, trial, obs, cfg.em, init_seed)
        except InconsistentObservationError as exc:
            # aggregates the P-node model cannot produce: reject the baseline
            rec = _failed_record(index, frac, method, trial, str(exc), time.perf_counter() - t0)
            return rec, None
    res = anomaly_test(fit, trial.baseline, cfg.alpha, scale=cfg.scale)
    rec = TrialRecord(
        trial=index,
        fraction=frac,
        method=method,
        label=bool(trial.anomalous),
        psi=res.psi_hat,
        reject=res.reject,
        mismatch=res.structural_mismatch,
        mse=float(np.sum((fit.lambda_hat - trial.truth_known) ** 2)),
        iterations=int(fit.iterations),
        converged=bool(fit.converged),
        seconds=time.perf_counter() - t0,
        eps_summary=fit.summary(),
    )
    return rec, fit


def run_trial(cfg, index, trial=None):
    """All (fraction, method) records of one trial."""
    if trial is None:
        trial = simulate_trial(cfg.scenario, index, cfg.T, cfg.anomaly_coin, anomalous=cfg.force_label)
    out = []
    oracle_fit = None
    for frac in cfg.fractions:
        obs = trial.observe(frac, observation_seed(cfg.scenario.seed, index, frac))
        for method in cfg.methods:
            # the oracle ignores the observation set, so fit it once
            reuse = oracle_fit if method == ORACLE else None
            rec, fit = evaluate(cfg, index, trial, frac, obs, method, fit=reuse)
            if method == ORACLE:
                oracle_fit = fit
            out.append(rec)
    return out


def _failed_record(index, frac, method, trial, message, seconds):
    return TrialRecord(
        trial=index,
        fraction=frac,
        method=method,
        label=bool(trial.anomalous),
        psi=float("inf"),
        reject=True,
        mismatch=True,
        mse=float("nan"),
        iterations=0,
        converged=False,
        seconds=seconds,
        error=message,
    )


def _worker(args):
    cfg, index = args
    return run_trial(cfg, index)


def run_experiment(cfg, indices=None, progress=None):
    """Records for every trial; ``cfg.jobs > 1`` uses a process pool."""
    indices = list(range(cfg.trials)) if indices is None else list(indices)
    records = []
    if cfg.jobs > 1 and len(indices) > 1:
        from multiprocessing import Pool

        with Pool(cfg.jobs) as pool:
            for recs in pool.imap(_worker, [(cfg, i) for i in indices]):
                records.extend(recs)
                if progress:
                    progress(recs)
    else:
        for i in indices:
            recs = run_trial(cfg, i)
            records.extend(recs)
            if progress:
                progress(recs)
    records.sort(key=lambda r: (r.method, r.fraction, r.trial))
    return records


def _group(records):
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.fraction), []).append(r)
    return groups


def accuracy_table(records, alpha=None, P=None):
    """Rows ``(method, fraction, accuracy, tp, tn, fp, fn)``.

    With ``alpha`` (and ``P``) decisions are recomputed from the stored
    statistics; otherwise the stored decisions are used.
    """
    c = critical_value(P, alpha) if alpha is not None else None
    rows = []
    for (method, frac), recs in sorted(_group(records).items()):
        tp = tn = fp = fn = 0
        for r in recs:
            rej = (r.psi > c) if c is not None else r.reject
            if r.label and rej:
                tp += 1
            elif r.label:
                fn += 1
            elif rej:
                fp += 1
            else:
                tn += 1
        rows.append((method, frac, (tp + tn) / len(recs), tp, tn, fp, fn))
    return rows


def roc_by_method(records, alpha=0.05, P=10):
    """``{(method, fraction): (RocCurve, (fpr, tpr) at the critical value)}``."""
    c = critical_value(P, alpha)
    out = {}
    for key, recs in sorted(_group(records).items()):
        stats = [r.psi for r in recs]
        labels = [r.label for r in recs]
        if all(labels) or not any(labels):
            continue
        out[key] = (roc_curve(stats, labels), operating_point(stats, labels, c))
    return out
