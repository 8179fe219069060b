import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from messpy import __version__
from messpy.cli import config_hash, dumps, main, resolve_config, run


def _invoke(*args):
    return CliRunner().invoke(main, list(args))


def test_fit_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _invoke("fit", "--method", "qmle", "--out", str(a)).exit_code == 0
    assert _invoke("fit", "--method", "qmle", "--out", str(b), "--workers", "2").exit_code == 0
    assert (a / "results.json").read_bytes() == (b / "results.json").read_bytes()


def test_meta_fields(tmp_path):
    assert run("fit", None, {"method": "be", "out": str(tmp_path), "seed": 3,
                             "n_draws": 300, "burn": 100}) == 0
    res = json.loads((tmp_path / "results.json").read_text())
    assert res["meta"]["seed"] == 3 and res["meta"]["version"] == __version__
    head = (tmp_path / "draws.csv").read_text().splitlines()[0]
    assert head == f"# config_hash={res['meta']['config_hash']} seed=3 version={__version__}"


def test_exit_codes(tmp_path):
    assert _invoke("fit", "--method", "ols", "--out", str(tmp_path)).exit_code == 2
    assert _invoke("fit", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)).exit_code == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("fit:\n  colour: red\n")
    assert _invoke("fit", "--config", str(bad), "--out", str(tmp_path)).exit_code == 2


def test_flags_exit_numeric(tmp_path, monkeypatch):
    from messpy import cli

    monkeypatch.setitem(cli.COMMANDS, "fit", lambda cfg: {"flags": ["boundary"]})
    assert run("fit", None, {"out": str(tmp_path)}) == 4
    assert run("fit", None, {"out": str(tmp_path), "allow_flags": True}) == 0


def test_numerical_failure_exit(tmp_path, monkeypatch):
    from messpy import cli

    def boom(cfg):
        raise np.linalg.LinAlgError("singular")

    monkeypatch.setitem(cli.COMMANDS, "fit", boom)
    assert run("fit", None, {"out": str(tmp_path)}) == 4


def test_config_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"seed": 5, "fit": {"method": "me", "seed": 6}}))
    assert resolve_config("fit", p, {})["seed"] == 6
    assert resolve_config("fit", p, {})["method"] == "me"
    assert resolve_config("fit", p, {"seed": 9})["seed"] == 9
    assert resolve_config("fit", None, {})["method"] == "qmle"


def test_hash_ignores_output_settings():
    a = resolve_config("fit", None, {"out": "x", "workers": 1})
    b = resolve_config("fit", None, {"out": "y", "workers": 3})
    c = resolve_config("fit", None, {"seed": 1})
    assert config_hash(a) == config_hash(b) != config_hash(c)


def test_dumps_format():
    s = dumps({"b": 0.1, "a": [float("nan"), 1]})
    assert s.index('"a"') < s.index('"b"')
    assert "0.10000000000000001" in s and "null" in s


def test_simulate_then_fit(tmp_path):
    d = tmp_path / "d"
    assert run("simulate", None, {"out": str(d), "grid": [1, 3]}) == 0
    assert {"data.csv", "W.mtx", "M.mtx"} <= {f.name for f in d.iterdir()}
    assert run("fit", None, {"data": str(d), "out": str(tmp_path / "f")}) == 0


def test_other_commands(tmp_path):
    assert run("impacts", None, {"out": str(tmp_path / "i")}) == 0
    assert run("select", None, {"method": "ic", "out": str(tmp_path / "s")}) == 0
    assert run("jtest", None, {"reps": 9, "out": str(tmp_path / "j")}) == 0
    res = json.loads((tmp_path / "i" / "results.json").read_text())
    assert res["meta"]["command"] == "impacts"


def test_mc_fast_small(tmp_path):
    code = run("mc", None, {"out": str(tmp_path), "fast": True, "reps": 10,
                            "estimators": ["qmle"], "allow_flags": True})
    assert code == 0
    res = json.loads((tmp_path / "results.json").read_text())
    assert res["table"]["attempted"] == {"qmle": 2}
    assert (tmp_path / "table.txt").exists()
