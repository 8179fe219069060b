import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from messpy import mc_harness as mc
from messpy.mc_harness import (Cell, McAbort, McDesign, McTable, compare_to_reference, preset,
                               reference_cells, run_design)


def _table(cells):
    return McTable({k: Cell(*v, n=10, se_bias=0.0) for k, v in cells.items()}, {}, {})


def test_compare_exact_match_passes():
    ref = reference_cells("table1", "W1", -2.0, -1.0)
    t = _table({k: (v["bias"], v["rmse"], v["coverage"]) for k, v in ref.items()})
    rep = compare_to_reference(t, ref, {"bias": {"abs": 0.0}, "rmse": {"rel": 0.0},
                                        "coverage": {"abs": 0.0}})
    assert rep.passed and len(rep.verdicts) == 3 * len(ref)


def test_compare_single_cell_off():
    ref = reference_cells("table1", "W1", -2.0, -1.0)
    vals = {k: (v["bias"], v["rmse"], v["coverage"]) for k, v in ref.items()}
    b, r, c = vals[("lambda", "qmle")]
    vals[("lambda", "qmle")] = (b, r * 1.5, c)
    rep = compare_to_reference(_table(vals), ref, {"rmse": {"rel": 0.2}})
    assert [(v.key, v.metric) for v in rep.failures] == [(("lambda", "qmle"), "rmse")]


def test_compare_errors():
    ref = {("lambda", "qmle"): {"bias": 0.0, "rmse": 0.1, "coverage": 0.95}}
    t = _table({("lambda", "qmle"): (0.0, 0.1, 0.95)})
    with pytest.raises(ValueError):
        compare_to_reference(t, ref, {})
    with pytest.raises(KeyError):
        compare_to_reference(t, {("rho", "qmle"): ref[("lambda", "qmle")]}, {"bias": {"abs": 1}})
    with pytest.raises(KeyError):
        reference_cells("table1", "W1", 9.0, 9.0)


def test_interval_rule():
    ref = {("lambda", "qmle"): {"bias": 0.0, "rmse": 0.1, "coverage": 0.5}}
    t = _table({("lambda", "qmle"): (0.0, 0.1, 0.95)})
    assert compare_to_reference(t, ref, {"coverage": {"interval": [0.92, 0.97]}}).passed


def test_reference_shape():
    data = mc.load_reference()["tables"]
    assert set(data) == {"table1", "table2", "table3", "table4"}
    assert all(len(t["cells"]) == 160 for t in data.values())


def test_summary_arithmetic():
    d = McDesign(estimators=("qmle",), n_reps=4)
    truth = d.truth()
    errs = np.array([0.1, -0.3, 0.2, 0.4])
    results = {}
    for r, e in enumerate(errs):
        est = truth + e
        results[r] = {"qmle": (est, est - 0.25, est + 0.25, True, None)}
    cells, fails, att = mc._summarize(d, results)
    c = cells[("lambda", "qmle")]
    assert c.bias == pytest.approx(errs.mean())
    assert c.rmse == pytest.approx(math.sqrt(np.mean(errs**2)))
    assert c.coverage == pytest.approx(0.5)
    assert c.se_bias == pytest.approx(errs.std(ddof=1) / 2)
    assert fails == {"qmle": 0} and att == {"qmle": 4}


def test_abort_on_failures(monkeypatch):
    d = McDesign(estimators=("qmle",), n_reps=10, grid=(1, 3))

    def fake(design, rep, shared=None):
        ok = rep != 3
        est = design.truth()
        return {"qmle": (est, est - 1, est + 1, ok, None)}

    monkeypatch.setattr(mc, "run_replication", fake)
    with pytest.raises(McAbort) as info:
        run_design(d)
    assert info.value.failures == {"qmle": 1}
    monkeypatch.setattr(mc, "MAX_FAILURE_RATE", 0.1)
    assert run_design(d).failures == {"qmle": 1}


def test_noise_free_recovers_truth():
    d = McDesign(grid=(1, 3), estimators=("qmle",), n_reps=2, scale=0.0, lam0=0.5, rho0=1.0)
    t = run_design(d)
    for p in ("beta1", "beta2", "lambda"):
        assert abs(t.get(p, "qmle").bias) < 1e-6 and t.get(p, "qmle").rmse < 1e-6


def test_worker_count_does_not_change_results():
    d = McDesign(grid=(1, 3), estimators=("qmle", "igmme", "be"), n_reps=4, n_reps_bayes=2,
                 n_draws=200, burn=50, seed=7)
    assert run_design(d).to_dict() == run_design(d, workers=2).to_dict()


def test_design_validation_and_presets():
    with pytest.raises(ValueError):
        McDesign(estimators=("ols",))
    with pytest.raises(ValueError):
        McDesign(scheme="cauchy")
    p = preset("table3", "W2", 0.5, 1.0)
    assert p.scheme == "hetero_neighbors" and p.grid == (14, 20)
    assert p.estimators == ("qmle", "igmme", "rgmme", "me", "rbe")
    f = McDesign().fast()
    assert (f.n_reps, f.n_reps_bayes) == (200, 20)
