"""
Command-line interface.

Settings resolve in three layers: built-in defaults, then the YAML file given
by --config, then command-line flags.  Every command writes ``results.json``
into the output directory; numbers carry 17 significant digits and each
artifact records the config hash, seed and library version.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure or a flagged degeneracy (unless --allow-flags).
"""

from __future__ import annotations

import hashlib
import math
import sys
from importlib import resources
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
FIT_METHODS = ("qmle", "me", "igmme", "bgmme", "rgmme", "be", "rbe")

DEFAULTS = {
    "common": {"seed": 0, "workers": 1, "fast": False, "allow_flags": False, "out": None},
    "simulate": {"grid": [5, 15], "knn": 5, "beta0": [1.0, 1.0], "lam0": -2.0, "rho0": -1.0,
                 "scheme": "iid_normal", "rep": 0},
    "fit": {"data": "sample", "method": "qmle", "vcov": "homo", "n_draws": 1500, "burn": 500},
    "impacts": {"data": "sample", "method": "qmle", "vcov": "homo", "n_draws": 1500, "burn": 500},
    "select": {"data": "sample", "method": "vuong", "candidates": [], "bic": "double",
               "vcov": "homo"},
    "jtest": {"data": "sample", "method": "sarar", "reps": 99, "hetero": False, "depth": 2},
    "mc": {"preset": "table1-W1", "lam0": -2.0, "rho0": -1.0, "estimators": None, "reps": None,
           "reps_bayes": None, "knn": 5, "n_draws": 1500, "burn": 500},
}
# keys that do not change results and so stay out of the config hash
UNHASHED = ("workers", "out", "allow_flags")


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- config

def resolve_config(command: str, path, overrides: dict) -> dict:
    """Defaults, then the file's top-level keys and its ``command`` section, then flags."""
    cfg = {**DEFAULTS["common"], **DEFAULTS[command]}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
        section = raw.get(command, {}) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"section {command!r} must be a mapping")
        top = {k: v for k, v in raw.items() if k not in DEFAULTS}
        for layer in (top, section):
            unknown = set(layer) - set(cfg)
            if unknown:
                raise ConfigError(f"unknown keys for {command}: {sorted(unknown)}")
            cfg.update(layer)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    cfg["command"] = command
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    cmd = cfg["command"]
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("workers must be a positive integer")
    if cmd in ("fit", "impacts") and cfg["method"] not in FIT_METHODS:
        raise ConfigError(f"method must be one of {FIT_METHODS}")
    if cmd in ("fit", "impacts", "select") and cfg["vcov"] not in ("homo", "hetero"):
        raise ConfigError("vcov must be homo or hetero")
    if cmd == "select" and cfg["method"] not in ("vuong", "ic", "cp"):
        raise ConfigError("select method must be vuong, ic or cp")
    if cmd == "select" and cfg["method"] == "cp" and len(cfg["candidates"]) < 2:
        raise ConfigError("cp needs at least two candidates, each with W and M paths")
    if cmd == "jtest":
        if cfg["method"] not in ("sarar", "mess"):
            raise ConfigError("jtest method must be sarar or mess")
        if not isinstance(cfg["reps"], int) or cfg["reps"] < 1:
            raise ConfigError("reps must be a positive integer")
    if cmd == "mc":
        parts = str(cfg["preset"]).split("-")
        if len(parts) != 2 or parts[0] not in ("table1", "table2", "table3", "table4") \
                or parts[1] not in ("W1", "W2"):
            raise ConfigError("preset must look like table1-W1 (tables 1-4, W1 or W2)")
        if (cfg["lam0"], cfg["rho0"]) not in [(-2, -1), (-2, 1), (0.5, -1), (0.5, 1)]:
            raise ConfigError("(lam0, rho0) must be one of the tabulated truths")
    if cmd == "simulate" and (not isinstance(cfg["grid"], list) or len(cfg["grid"]) != 2):
        raise ConfigError("grid must be a pair [c_low, c_high]")


def config_hash(cfg: dict) -> str:
    core = {k: v for k, v in cfg.items() if k not in UNHASHED}
    return hashlib.sha256(dumps(core).encode()).hexdigest()


# ---------------------------------------------------------------- output

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if x is None:
        return "null"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return f"{x:.17g}" if math.isfinite(x) else "null"
    if isinstance(x, str):
        return _json_str(x)
    if isinstance(x, dict):
        items = sorted((str(k), v) for k, v in x.items())
        return "{" + ", ".join(f"{_json_str(k)}: {_fmt(v)}" for k, v in items) + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _json_str(s: str) -> str:
    import json

    return json.dumps(s)


def dumps(obj) -> str:
    """Deterministic JSON with sorted keys and 17 significant digits."""
    return _fmt(obj)


def _meta(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg["seed"], "version": __version__,
            "command": cfg["command"],
            "config": {k: v for k, v in cfg.items() if k not in UNHASHED}}


def _out_dir(cfg: dict) -> Path:
    d = Path(cfg["out"] or f"messpy_{cfg['command']}")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_results(cfg: dict, payload: dict) -> Path:
    d = _out_dir(cfg)
    path = d / "results.json"
    path.write_text(dumps({"meta": _meta(cfg), **payload}) + "\n")
    return path


def _write_draws(cfg: dict, chain, name="draws.csv") -> None:
    d = _out_dir(cfg)
    m = _meta(cfg)
    lines = [f"# config_hash={m['config_hash']} seed={m['seed']} version={m['version']}",
             ",".join(chain.names)]
    lines += [",".join(f"{v:.17g}" for v in row) for row in chain.draws]
    (d / name).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- data

def _data_dir(spec) -> Path:
    if spec == "sample":
        return Path(str(resources.files("messpy").joinpath("data/sample")))
    return Path(spec)


def _load(cfg):
    from .model_core import read_data

    return read_data(_data_dir(cfg["data"]))


def _fit(cfg, data):
    from . import bayes, gmm, m_est, qmle

    method = cfg["method"]
    if method in ("be", "rbe"):
        sampler = bayes.gibbs_hetero if method == "rbe" else bayes.gibbs_homo
        return sampler(data, bayes.Priors.default(data.k), n_draws=cfg["n_draws"], burn=cfg["burn"],
                       seed=cfg["seed"])
    if method == "qmle":
        return qmle.fit_qmle(data, vcov=cfg["vcov"])
    if method == "me":
        return m_est.fit_m(data)
    if method == "igmme":
        return gmm.fit_igmme(data)
    if method == "bgmme":
        return gmm.fit_bgmme(data)
    return gmm.fit_rgmme(data)


def _chain_summary(chain) -> dict:
    iv = chain.interval(0.95)
    return {"method": "rbe" if chain.info.get("hetero") else "be", "names": chain.names,
            "posterior_mean": chain.mean(), "posterior_sd": chain.sd(),
            "interval_lower": iv[:, 0], "interval_upper": iv[:, 1],
            "acceptance_lambda": chain.acceptance_lam, "acceptance_rho": chain.acceptance_rho,
            "flags": []}


# ---------------------------------------------------------------- commands

def _cmd_simulate(cfg):
    from .model_core import DisturbanceScheme, make_design, simulate, write_data
    from .weights import GridSpec, build_grid_contiguity, build_knn, grid_coordinates

    try:
        spec = GridSpec(*cfg["grid"])
        scheme = DisturbanceScheme(cfg["scheme"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    W = build_grid_contiguity(spec)
    M = build_knn(grid_coordinates(spec)[0], cfg["knn"])
    X = make_design(W.n, cfg["seed"])
    if len(cfg["beta0"]) != X.shape[1]:
        raise ConfigError("beta0 needs two entries")
    data = simulate(W, M, X, cfg["beta0"], cfg["lam0"], cfg["rho0"], scheme, cfg["seed"], cfg["rep"])
    write_data(data, _out_dir(cfg))
    return {"n": data.n, "files": ["data.csv", "W.mtx", "M.mtx"], "flags": []}


def _cmd_fit(cfg):
    data = _load(cfg)
    res = _fit(cfg, data)
    if cfg["method"] in ("be", "rbe"):
        _write_draws(cfg, res)
        return _chain_summary(res)
    out = res.to_dict()
    if not res.converged and "no_convergence" not in out["flags"]:
        out["flags"].append("not_converged")
    return out


def _cmd_impacts(cfg):
    from .impacts import impact_posterior, impact_summary

    data = _load(cfg)
    res = _fit(cfg, data)
    if cfg["method"] in ("be", "rbe"):
        summ = impact_posterior(res, data.W, X=data.X)
        flags = []
    else:
        if res.vcov is None:
            raise NumericalFailure("fit returned no covariance matrix")
        summ = impact_summary(res, data.W, X=data.X)
        flags = list(res.flags)
    d = summ.to_dict()
    d["flags"] = flags + d["flags"]
    return d


def _cmd_select(cfg):
    from . import selection as sel
    from .model_core import DataError
    from .weights import read_mtx

    data = _load(cfg)
    m = cfg["method"]
    if m == "vuong":
        r = sel.vuong_test(data, seed=cfg["seed"])
        return {"statistic": r.statistic, "decision": r.decision, "pvalue": r.pvalue,
                "omega2": r.omega2, "sigma_hat": r.sigma_hat, "flags": list(r.flags)}
    if m == "ic":
        from .qmle import fit_qmle

        fit = fit_qmle(data, vcov=cfg["vcov"])
        r = sel.info_criteria(data, fit=fit, bic=cfg["bic"])
        return {"aic": r.aic, "bic": r.bic, "n_params": r.n_params, "bic_convention": r.bic_convention,
                "flags": list(fit.flags)}
    try:
        cands = [(read_mtx(c["W"]), read_mtx(c["M"])) for c in cfg["candidates"]]
    except (KeyError, TypeError) as exc:
        raise ConfigError("each candidate needs W and M paths") from exc
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read candidate weights: {exc}") from exc
    r = sel.mallows_cp(data.Y, data.X, cands)
    return {"values": r.values, "selected": r.selected, "weights": r.weights,
            "penalties": r.penalties, "dropped": list(r.dropped), "flags": list(r.flags)}


def _cmd_jtest(cfg):
    from . import selection as sel

    data = _load(cfg)
    fn = sel.jtest_sarar_null if cfg["method"] == "sarar" else sel.jtest_mess_null
    r = fn(data.Y, data.X, data.W, B_boot=cfg["reps"], seed=cfg["seed"], depth=cfg["depth"],
           hetero=cfg["hetero"], workers=cfg["workers"])
    return r.to_dict()


def _cmd_mc(cfg):
    from . import mc_harness as mc

    table_id, wname = cfg["preset"].split("-")
    kw = dict(seed=cfg["seed"], knn=cfg["knn"], n_draws=cfg["n_draws"], burn=cfg["burn"])
    if cfg["estimators"]:
        kw["estimators"] = tuple(cfg["estimators"])
    if cfg["reps"]:
        kw["n_reps"] = cfg["reps"]
    if cfg["reps_bayes"] is not None:
        kw["n_reps_bayes"] = cfg["reps_bayes"]
    try:
        design = mc.preset(table_id, wname, float(cfg["lam0"]), float(cfg["rho0"]), **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["fast"]:
        design = design.fast()
    table = mc.run_design(design, workers=cfg["workers"])
    ref = mc.reference_cells(table_id, wname, float(cfg["lam0"]), float(cfg["rho0"]))
    ref = {k: v for k, v in ref.items() if k in table.cells}
    tol = {"bias": {"abs": 0.01}, "rmse": {"rel": 0.35 if cfg["fast"] else 0.2},
           "coverage": {"interval": [0.92, 0.97]}}
    report = mc.compare_to_reference(table, ref, tol)
    d = _out_dir(cfg)
    (d / "table.txt").write_text(table.to_text() + "\n\n" + report.to_text() + "\n")
    flags = [f"failed_replications:{e}={f}" for e, f in sorted(table.failures.items()) if f]
    return {"table": table.to_dict(), "comparison": [
        {"param": v.key[0], "estimator": v.key[1], "metric": v.metric, "value": v.value,
         "reference": v.reference, "lower": v.lower, "upper": v.upper, "pass": v.passed}
        for v in report.verdicts], "flags": flags}


COMMANDS = {"simulate": _cmd_simulate, "fit": _cmd_fit, "impacts": _cmd_impacts,
            "select": _cmd_select, "jtest": _cmd_jtest, "mc": _cmd_mc}


def run(command: str, config_path=None, overrides=None) -> int:
    """Resolve the config, execute ``command`` and return the exit status."""
    from .mc_harness import McAbort
    from .model_core import DataError

    try:
        cfg = resolve_config(command, config_path, overrides or {})
        payload = COMMANDS[command](cfg)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except (NumericalFailure, McAbort, np.linalg.LinAlgError, FloatingPointError,
            ArithmeticError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERIC
    path = _write_results(cfg, payload)
    click.echo(str(path))
    flags = payload.get("flags", [])
    if flags and not cfg["allow_flags"]:
        click.echo(f"flagged: {', '.join(map(str, flags))} (use --allow-flags to accept)", err=True)
        return EXIT_NUMERIC
    return 0


def _options(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(), default=None,
                     help="YAML config; flags override its keys."),
        click.option("--method", default=None, help="Estimator, criterion or null model."),
        click.option("--reps", type=int, default=None, help="Replications or bootstrap draws."),
        click.option("--seed", type=int, default=None),
        click.option("--workers", type=int, default=None),
        click.option("--fast", is_flag=True, default=None, help="Scale replications down five-fold."),
        click.option("--allow-flags", "allow_flags", is_flag=True, default=None,
                     help="Exit 0 even when results carry degeneracy flags."),
        click.option("--data", default=None, help="Directory with data.csv, W.mtx, M.mtx, or 'sample'."),
        click.option("--out", default=None, help="Output directory."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


@click.group()
@click.version_option(__version__)
def main():
    """Matrix exponential spatial model toolkit."""


HELP = {
    "simulate": "Simulate one data set on a grid design.",
    "fit": "Estimate the model on a data directory.",
    "impacts": "Direct, indirect and total impacts with standard errors.",
    "select": "Vuong test, information criteria or Mallows-type selection.",
    "jtest": "Bootstrap J-test between SAR and MESS specifications.",
    "mc": "Run a Monte Carlo design and compare it with the reference tables.",
}


def _register(name: str):
    @main.command(name, help=HELP[name])
    @_options
    def cmd(config_path, **flags):
        overrides = {k: v for k, v in flags.items() if v is not None}
        if name in ("simulate", "mc"):
            overrides.pop("data", None)
        if name in ("fit", "impacts", "select", "simulate"):
            reps = overrides.pop("reps", None)
            if reps is not None:
                raise click.UsageError(f"--reps does not apply to {name}")
        if name == "simulate" and "method" in overrides:
            raise click.UsageError("--method does not apply to simulate")
        if name == "mc" and "method" in overrides:
            overrides["estimators"] = overrides.pop("method").split(",")
        sys.exit(run(name, config_path, overrides))

    return cmd


for _name in COMMANDS:
    _register(_name)


if __name__ == "__main__":
    main()
