import numpy as np
import pytest

from anomography.experiments import (
    METHODS,
    ExperimentConfig,
    TrialRecord,
    accuracy_table,
    evaluate,
    fit_method,
    observation_seed,
    roc_by_method,
    run_experiment,
    run_trial,
)
from anomography.hpem import EmConfig
from anomography.netsim import HIDDEN_NODE, ScenarioSpec, oracle_mle, simulate_trial


def _rec(trial, label, psi, method="MRE-HP", frac=0.2):
    return TrialRecord(trial, frac, method, label, psi, psi > 113.145, False, 0.0, 1, True, 0.0)


def test_config_round_trip_and_hash():
    cfg = ExperimentConfig(
        scenario=ScenarioSpec(kind=HIDDEN_NODE, seed=9), trials=7, T=20, fractions=(0, 0.5),
        em=EmConfig(tol=1e-7), methods=("MRE-HP", "ORACLE"), jobs=3,
    )
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()
    # worker count and output location do not change the hash
    assert ExperimentConfig.from_dict({**cfg.to_dict(), "jobs": 1, "output_dir": "x"}).config_hash() == cfg.config_hash()
    assert ExperimentConfig.from_dict({**cfg.to_dict(), "T": 21}).config_hash() != cfg.config_hash()


@pytest.mark.parametrize(
    "kwargs", [{"trials": 0}, {"fractions": ()}, {"fractions": (1.5,)}, {"methods": ()}, {"methods": ("EM",)}, {"T": 0}]
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ExperimentConfig(**kwargs)


def test_record_round_trip():
    rec = _rec(3, True, float("inf"))
    d = rec.to_dict()
    assert d["psi"] == "inf"
    assert TrialRecord.from_dict(d) == rec


def test_accuracy_formula():
    recs = [_rec(0, True, 200.0), _rec(1, True, 5.0), _rec(2, False, 1.0), _rec(3, False, 150.0), _rec(4, False, 2.0)]
    (row,) = accuracy_table(recs)
    assert row == ("MRE-HP", 0.2, (1 + 2) / 5, 1, 2, 1, 1)
    # recomputing decisions at a tiny alpha raises the threshold above 150 but not above 200
    (row,) = accuracy_table(recs, alpha=1e-6, P=10)
    assert row[3:] == (1, 3, 0, 1)


def test_roc_by_method_skips_degenerate_groups():
    recs = [_rec(i, i % 2 == 0, float(i)) for i in range(6)] + [_rec(i, True, 1.0, "MLEM") for i in range(3)]
    out = roc_by_method(recs)
    assert list(out) == [("MRE-HP", 0.2)]
    curve, (fpr, tpr) = out[("MRE-HP", 0.2)]
    assert curve.auc == pytest.approx(1 / 3)
    assert fpr == tpr == 0.0


def test_oracle_is_complete_data_mean():
    cfg = ExperimentConfig(T=40, methods=("ORACLE",))
    trial = simulate_trial(cfg.scenario, 2, cfg.T)
    fit = fit_method("ORACLE", trial, trial.observe(0.0, 0), cfg.em, 0)
    np.testing.assert_allclose(fit.lambda_hat, oracle_mle(trial.traffic), rtol=0, atol=1e-12)


def test_mlem_at_full_observation_matches_oracle():
    cfg = ExperimentConfig(T=40, fractions=(1.0,), methods=("MLEM", "ORACLE"))
    for index in range(3):
        trial = simulate_trial(cfg.scenario, index, cfg.T)
        obs = trial.observe(1.0, observation_seed(0, index, 1.0))
        a = fit_method("MLEM", trial, obs, cfg.em, 1)
        b = fit_method("ORACLE", trial, obs, cfg.em, 1)
        np.testing.assert_allclose(a.lambda_hat, b.lambda_hat, atol=1e-6)


def test_run_trial_records_and_determinism():
    cfg = ExperimentConfig(trials=2, T=30, fractions=(0.0, 1.0), methods=METHODS)
    recs = run_trial(cfg, 1)
    assert [(r.fraction, r.method) for r in recs] == [(f, m) for f in cfg.fractions for m in METHODS]
    oracle = [r for r in recs if r.method == "ORACLE"]
    assert oracle[0].mse == oracle[1].mse
    again = run_trial(cfg, 1)
    assert [(r.psi, r.mse, r.iterations) for r in again] == [(r.psi, r.mse, r.iterations) for r in recs]


def test_run_experiment_independent_of_workers():
    cfg = ExperimentConfig(trials=3, T=20, fractions=(0.2,), methods=("MRE-HP", "MLEM"))
    serial = run_experiment(cfg)
    cfg.jobs = 2
    pooled = run_experiment(cfg)
    key = lambda r: (r.method, r.fraction, r.trial, r.psi, r.mse, r.iterations, r.label)
    assert [key(r) for r in serial] == [key(r) for r in pooled]


def test_zero_baseline_row_is_structural_rejection():
    cfg = ExperimentConfig(T=10)
    for method in METHODS:
        trial = simulate_trial(cfg.scenario, 0, cfg.T)
        # a baseline that forbids all traffic out of node 0
        trial.baseline[0, :] = 0.0
        obs = trial.observe(0.0, 0)
        assert obs.row_sums[:, 0].sum() > 0
        rec, fit = evaluate(cfg, 0, trial, 0.0, obs, method)
        assert fit is not None and rec.reject and rec.mismatch and rec.psi == np.inf


def test_inconsistent_observations_count_as_rejection(monkeypatch):
    import anomography.experiments as ex
    from anomography.errors import InconsistentObservationError

    def boom(*args):
        raise InconsistentObservationError("row 0 has traffic but no rate")

    monkeypatch.setattr(ex, "fit_method", boom)
    cfg = ExperimentConfig(T=10)
    trial = simulate_trial(cfg.scenario, 0, cfg.T)
    rec, fit = evaluate(cfg, 0, trial, 0.0, trial.observe(0.0, 0), "MLEM")
    assert fit is None
    assert rec.reject and rec.mismatch and rec.psi == np.inf and "row 0" in rec.error
    assert TrialRecord.from_dict(rec.to_dict()).error == rec.error
