"""Config-driven experiment runner and the ``decay`` command line.

A config (TOML, or JSON by suffix) names a catalog model, test functions,
shared sampling settings and a list of checks. Each check may have an options
table of its own name, for example::

    seed = 1
    n_paths = 100000
    dt = 0.001
    times = [1.5, 2.0, 3.0, 4.0]
    checks = ["envelope", "dissipativity"]
    output_dir = "out"

    model = { name = "ou", M1 = 1.0, sigma = 1.0 }

    [[test_functions]]
    name = "identity"

    [tolerances]
    envelope = 0.1

    [dissipativity]
    t_range = [0.0, 5.0]

``decay run`` writes ``report.json`` and one CSV per check into ``output_dir``
and exits 0 iff every applicable check passes.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import math
import os
import platform
import subprocess
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from . import lyapunov as lyap
from . import measures as meas
from . import mckean as mk
from . import models as mdl
from . import sensitivity as sens
from ._jit import set_workers
from .errors import ConfigError
from .simulate import TimeGrid
from .tables import CheckTable, jsonable

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

__all__ = ["ExperimentConfig", "load_config", "run_experiment", "CheckOutcome", "main",
           "CHECK_NAMES", "report_schema"]

log = logging.getLogger("sdedecay")

CHECK_NAMES = ("envelope", "dissipativity", "monotonicity", "coupling", "moments", "invariant",
               "convergence", "ck", "limiting", "mckean")
DEFAULT_TOLERANCES = {"envelope": 0.1, "coupling": 0.05, "moments": 0.05, "limiting": 0.05,
                      "convergence": 0.02}
_TOP_KEYS = {"model", "test_functions", "times", "x_grid", "n_paths", "dt", "seed", "checks",
             "tolerances", "output_dir", "workers", *CHECK_NAMES}


# ---------------------------------------------------------------------------
# Option tables
# ---------------------------------------------------------------------------
def _as_float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _as_int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return int(v)


def _as_str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _as_pair(v):
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise TypeError("expected a two-element list")
    return [_as_float(v[0]), _as_float(v[1])]


def _as_floats(v):
    if not isinstance(v, (list, tuple)) or not v:
        raise TypeError("expected a non-empty list of numbers")
    return [_as_float(x) for x in v]


def _as_point(v):
    if isinstance(v, (list, tuple)):
        return [_as_float(x) for x in v]
    return _as_float(v)


def _as_table(v):
    if not isinstance(v, dict):
        raise TypeError("expected a table")
    return dict(v)


# option name -> (converter, default); None defaults are filled from the model
OPTION_SPECS: dict[str, dict[str, tuple[Callable, Any]]] = {
    "envelope": {"order": (_as_int, 1), "method": (_as_str, "auto"),
                 "h": (_as_table, {"form": "poly", "C": 1.0, "p": 2.0, "m": 2.0}),
                 "rate": (_as_float, None)},
    "dissipativity": {"W": (_as_str, None), "t_range": (_as_pair, [0.0, 5.0]),
                      "x_range": (_as_pair, [-5.0, 5.0]), "n_samples": (_as_int, 10_000),
                      "M1": (_as_float, None)},
    "monotonicity": {"m": (_as_float, 2.0), "t_range": (_as_pair, [0.0, 5.0]),
                     "x_range": (_as_pair, [-5.0, 5.0]), "n_samples": (_as_int, 10_000),
                     "M1": (_as_float, None)},
    "coupling": {"W": (_as_str, None), "x": (_as_point, 0.0), "y": (_as_point, 1.0),
                 "times": (_as_floats, None), "t0": (_as_float, 1.0), "M1": (_as_float, None),
                 "n_paths": (_as_int, None), "dt": (_as_float, None)},
    "moments": {"W": (_as_str, None), "x": (_as_point, 1.0), "times": (_as_floats, None),
                "tau": (_as_float, 0.0), "M1": (_as_float, None), "n_paths": (_as_int, None),
                "dt": (_as_float, None), "t_range": (_as_pair, [0.0, 5.0]),
                "x_range": (_as_pair, [-5.0, 5.0])},
    "invariant": {"burn_in": (_as_float, 10.0), "n_samples": (_as_int, 10_000),
                  "thinning": (_as_float, 0.5), "x0": (_as_point, 0.0), "dt": (_as_float, None),
                  "n_sigma": (_as_float, 4.0)},
    "convergence": {"x": (_as_point, 0.0), "metric": (_as_str, "w2"), "W": (_as_str, None),
                    "times": (_as_floats, None), "t0": (_as_float, 1.0), "rate": (_as_float, None),
                    "burn_in": (_as_float, 10.0), "n_samples": (_as_int, 10_000),
                    "thinning": (_as_float, 0.5), "n_paths": (_as_int, None),
                    "dt": (_as_float, None)},
    "ck": {"taus": (_as_floats, [0.0, 0.5]), "ss": (_as_floats, [1.0, 2.0]), "x": (_as_point, 1.0),
           "repeats": (_as_int, 1), "min_pass_fraction": (_as_float, 1.0),
           "n_paths": (_as_int, None), "dt": (_as_float, None)},
    "limiting": {"W": (_as_str, None), "x": (_as_point, 1.0), "times": (_as_floats, None),
                 "t0": (_as_float, 1.0), "M1": (_as_float, None), "n_paths": (_as_int, None),
                 "dt": (_as_float, None)},
    "mckean": {"a": (_as_float, 2.0), "c": (_as_float, 0.5), "sigma": (_as_float, 1.0),
               "x": (_as_point, 1.0), "s": (_as_float, 1.0), "N": (_as_int, 10_000),
               "n_paths": (_as_int, None), "dt": (_as_float, None), "n_sigma": (_as_float, 4.0)},
}


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------
@dataclass
class ExperimentConfig:
    """Validated experiment description.

    ``options`` maps each requested check to its resolved option table.
    """

    model: dict
    seed: int
    n_paths: int = 100_000
    dt: float = 1e-3
    times: list[float] = field(default_factory=lambda: [1.5, 2.0, 3.0, 4.0])
    x_grid: list | None = None
    test_functions: list[dict] = field(default_factory=lambda: [{"name": "identity"}])
    checks: list[str] = field(default_factory=list)
    tolerances: dict[str, float] = field(default_factory=dict)
    options: dict[str, dict] = field(default_factory=dict)
    output_dir: str = "decay-output"
    workers: int | None = None

    @classmethod
    def from_mapping(cls, doc: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        """Validate a parsed config; errors carry the offending field path."""
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a table")
        unknown = sorted(set(doc) - _TOP_KEYS)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        model = _validate_model(doc.get("model"))
        entry = mdl.get_model(model["name"], **model["params"])
        if "seed" not in doc:
            raise ConfigError("seed", "required (no wall-clock seeding)")
        seed = _field("seed", doc["seed"], _as_int)
        if not 0 <= seed < 2**64:
            raise ConfigError("seed", "must lie in [0, 2**64)")
        n_paths = _field("n_paths", doc.get("n_paths", 100_000), _as_int)
        if n_paths < 2:
            raise ConfigError("n_paths", "must be >= 2")
        dt = _field("dt", doc.get("dt", 1e-3), _as_float)
        if not dt > 0:
            raise ConfigError("dt", "must be positive")
        times = _field("times", doc.get("times", [1.5, 2.0, 3.0, 4.0]), _as_floats)
        checks = doc.get("checks", [])
        if not isinstance(checks, list):
            raise ConfigError("checks", "expected a list")
        for i, c in enumerate(checks):
            if c not in CHECK_NAMES:
                raise ConfigError(f"checks[{i}]", f"unknown check {c!r}; known: {', '.join(CHECK_NAMES)}")
        if "envelope" in checks and any(t <= 1 for t in times):
            raise ConfigError("times", "envelope times must all exceed 1")
        dim = entry.coefficients.dim
        x_grid = _validate_grid(doc.get("x_grid"), dim)
        tfs = _validate_test_functions(doc.get("test_functions", [{"name": "identity"}]), dim)
        tolerances = dict(DEFAULT_TOLERANCES)
        for k, v in _field("tolerances", doc.get("tolerances", {}), _as_table).items():
            if k not in CHECK_NAMES:
                raise ConfigError(f"tolerances.{k}", "unknown check")
            tolerances[k] = _field(f"tolerances.{k}", v, _as_float)
        options = {}
        for name in CHECK_NAMES:
            raw = doc.get(name, {})
            table = _field(name, raw, _as_table)
            if table and name not in checks:
                log.debug("options for %s given but the check is not requested", name)
            options[name] = _resolve_options(name, table)
        out = _field("output_dir", doc.get("output_dir", "decay-output"), _as_str)
        if base_dir is not None and not Path(out).is_absolute():
            out = str(Path(base_dir) / out)
        workers = doc.get("workers")
        if workers is not None:
            workers = _field("workers", workers, _as_int)
            if workers < 1:
                raise ConfigError("workers", "must be >= 1")
        return cls(model=model, seed=seed, n_paths=n_paths, dt=dt, times=times, x_grid=x_grid,
                   test_functions=tfs, checks=list(checks), tolerances=tolerances,
                   options={c: options[c] for c in checks}, output_dir=out, workers=workers)

    def to_dict(self) -> dict:
        return jsonable(dataclasses.asdict(self))


def _field(path: str, value, conv):
    try:
        return conv(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def _validate_model(raw) -> dict:
    if raw is None:
        raise ConfigError("model", "required")
    if isinstance(raw, str):
        raw = {"name": raw}
    if not isinstance(raw, dict):
        raise ConfigError("model", "expected a table with name and params")
    raw = dict(raw)
    name = raw.pop("name", None)
    nested = raw.pop("params", {})
    if not isinstance(name, str):
        raise ConfigError("model.name", "required string")
    if name not in mdl.model_names():
        raise ConfigError("model.name", f"unknown model {name!r}; known: {', '.join(mdl.model_names())}")
    if not isinstance(nested, dict):
        raise ConfigError("model.params", "expected a table")
    params = {**nested, **raw}  # parameters may sit inline or under params
    try:
        mdl.get_model(name, **params)
    except (ValueError, TypeError) as exc:
        raise ConfigError("model.params", str(exc)) from None
    return {"name": name, "params": dict(params)}


def _validate_grid(raw, dim: int):
    if raw is None:
        return None
    if not isinstance(raw, list) or not raw:
        raise ConfigError("x_grid", "expected a non-empty list")
    pts = []
    for i, p in enumerate(raw):
        try:
            v = np.asarray(p, dtype=np.float64).reshape(-1)
        except (TypeError, ValueError):
            raise ConfigError(f"x_grid[{i}]", "expected a number or a list of numbers") from None
        if v.size != dim or not np.all(np.isfinite(v)):
            raise ConfigError(f"x_grid[{i}]", f"expected {dim} finite coordinate(s)")
        pts.append(v.tolist() if dim > 1 else float(v[0]))
    return pts


def _validate_test_functions(raw, dim: int) -> list[dict]:
    if not isinstance(raw, list):
        raise ConfigError("test_functions", "expected a list of tables")
    out = []
    for i, spec in enumerate(raw):
        path = f"test_functions[{i}]"
        if isinstance(spec, str):
            spec = {"name": spec}
        if not isinstance(spec, dict) or not isinstance(spec.get("name"), str):
            raise ConfigError(f"{path}.name", "required string")
        spec = dict(spec)
        try:
            _build_phi(spec, dim)
        except KeyError as exc:
            raise ConfigError(f"{path}.name", str(exc.args[0])) from None
        except (ValueError, TypeError) as exc:
            raise ConfigError(path, str(exc)) from None
        out.append(spec)
    return out


def _build_phi(spec: dict, dim: int) -> sens.TestFunction:
    spec = dict(spec)
    name = spec.pop("name")
    W = spec.pop("W", None)
    if isinstance(W, str):
        W = lyap.get_lyapunov(W, dim=dim)
    return sens.build_test_function(name, dim=dim, W=W, **spec)


def _resolve_options(name: str, table: dict) -> dict:
    specs = OPTION_SPECS[name]
    unknown = sorted(set(table) - set(specs))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", "unknown option")
    out = {}
    for key, (conv, default) in specs.items():
        out[key] = _field(f"{name}.{key}", table[key], conv) if key in table else default
    return out


def load_config(path) -> ExperimentConfig:
    """Read a TOML (or ``.json``) config; relative output dirs resolve against its folder."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError("<file>", f"parse error: {exc}") from None
    return ExperimentConfig.from_mapping(doc, base_dir=path.parent)


# ---------------------------------------------------------------------------
# Running checks
# ---------------------------------------------------------------------------
@dataclass
class CheckOutcome:
    """One executed check: its verdict, CSV body and JSON summary."""

    name: str
    verdict: str  # pass | fail | not_applicable | error
    csv_name: str | None
    csv_text: str | None
    summary: dict

    @property
    def counts(self) -> bool:
        return self.verdict in ("pass", "fail", "error")


class _Context:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.entry = mdl.get_model(cfg.model["name"], **cfg.model["params"])
        self.model = self.entry.coefficients
        self.dim = self.model.dim

    def W(self, name: str | None) -> lyap.LyapunovFunction:
        name = name or self.entry.claimed_W or "quadratic"
        return lyap.get_lyapunov(name, dim=self.dim)

    def rate_for(self, W: lyap.LyapunovFunction, given: float | None, check: str) -> float:
        """Claimed ``L W <= -rate W`` constant; defaults to ``2 M1`` for ``W = |x|^2``."""
        if given is not None:
            return given
        if W.name == "quadratic" and self.entry.claimed_M1 is not None:
            return 2.0 * self.entry.claimed_M1
        raise ConfigError(f"{check}.M1", "required for this Lyapunov function")

    def point(self, v):
        return np.broadcast_to(np.asarray(v, dtype=np.float64), (self.dim,)).copy()

    def common(self, opts, key, default):
        v = opts.get(key)
        return default if v is None else v


def _verdict(ok: bool) -> str:
    return "pass" if ok else "fail"


def _assumption_table(check: lyap.AssumptionCheck, claimed: float | None, name: str) -> CheckTable:
    ok = None if claimed is None else check.holds(claimed)
    row = (check.region["t_range"][0], check.region["t_range"][1], check.M1_est, check.M1_p99,
           claimed, ok)
    verdict = "not_applicable" if claimed is None else _verdict(ok)
    return CheckTable(name, ("t_lo", "t_hi", "M1_est", "M1_p99", "claimed", "pass"), [row], verdict,
                      {"check": check.to_dict(), "claimed": claimed})


def _run_envelope(ctx: _Context, opts: dict) -> list[CheckOutcome]:
    cfg = ctx.cfg
    outs = []
    xs = None if cfg.x_grid is None else np.asarray(cfg.x_grid, dtype=np.float64).reshape(-1, ctx.dim)
    for spec in cfg.test_functions:
        phi = _build_phi(spec, ctx.dim)
        rate = opts["rate"]
        convention = None
        if rate is None:
            if ctx.entry.claimed_M1 is None:
                raise ConfigError("envelope.rate", "model claims no M1; give a rate")
            rate, convention = sens.theoretical_rate(ctx.entry.claimed_M1, phi.family)
            if rate is None:
                raise ConfigError("envelope.rate", f"no theoretical rate for family {phi.family.kind}")
        h = dict(opts["h"])
        form = h.pop("form", "poly")
        env = (sens.DecayEnvelope.poly(rate=rate, convention=convention, **h) if form == "poly"
               else sens.DecayEnvelope.gauss(rate=rate, convention=convention, **h))
        rep = sens.envelope_check(ctx.model, phi, env, x_grid=xs, times=cfg.times, order=opts["order"],
                                  n_paths=cfg.n_paths, seed=cfg.seed, dt=cfg.dt,
                                  tolerance=cfg.tolerances["envelope"], method=opts["method"])
        verdict = "not_applicable" if bool(np.all(rep.censored)) else _verdict(rep.verdict)
        summary = rep.to_dict()
        outs.append(CheckOutcome(f"envelope:{phi.name}", verdict, None, rep.to_csv(), summary))
    return outs


def _run_table(name: str, ctx: _Context, opts: dict) -> CheckTable:
    cfg, model = ctx.cfg, ctx.model
    n_paths = ctx.common(opts, "n_paths", cfg.n_paths)
    dt = ctx.common(opts, "dt", cfg.dt)
    if name == "dissipativity":
        W = ctx.W(opts["W"])
        chk = lyap.check_dissipativity(model, W, opts["t_range"], opts["x_range"], opts["n_samples"], cfg.seed)
        claimed = opts["M1"]
        if claimed is None and W.name == "quadratic" and ctx.entry.claimed_M1 is not None:
            claimed = 2.0 * ctx.entry.claimed_M1
        return _assumption_table(chk, claimed, name)
    if name == "monotonicity":
        chk = lyap.check_monotonicity(model, opts["m"], opts["t_range"], opts["x_range"],
                                      opts["n_samples"], cfg.seed)
        claimed = opts["M1"] if opts["M1"] is not None else ctx.entry.claimed_M1
        return _assumption_table(chk, claimed, name)
    if name == "coupling":
        W = ctx.W(opts["W"])
        times = opts["times"] or cfg.times
        return lyap.coupling_contraction(model, W, ctx.point(opts["x"]), ctx.point(opts["y"]), times,
                                         n_paths, cfg.seed, dt, M1=opts["M1"], t0=opts["t0"],
                                         tolerance=cfg.tolerances["coupling"])
    if name == "moments":
        W = ctx.W(opts["W"])
        return lyap.moment_decay(model, W, ctx.point(opts["x"]), opts["times"] or cfg.times, n_paths,
                                 cfg.seed, dt, M1=ctx.rate_for(W, opts["M1"], name), tau=opts["tau"],
                                 tolerance=cfg.tolerances["moments"], t_range=opts["t_range"],
                                 x_range=opts["x_range"])
    if name == "invariant":
        est = meas.estimate_invariant(mdl.limiting_model(model), opts["burn_in"], opts["n_samples"],
                                      opts["thinning"], cfg.seed, dt, ctx.point(opts["x0"]))
        mc = est.moment_check(opts["n_sigma"])
        rows = []
        for i in range(ctx.dim):
            cm = cv = None
            ok = None
            if mc["available"]:
                cm = float(est.closed_form["mean"][i])
                cv = float(np.asarray(est.closed_form["cov"], dtype=np.float64).reshape(ctx.dim, ctx.dim)[i, i])
                ok = mc["z_mean"][i] <= opts["n_sigma"] and mc["z_var"][i] <= opts["n_sigma"]
            rows.append((i, est.mean[i], est.mean_stderr[i], est.var[i], est.var_stderr[i], cm, cv, ok))
        verdict = "not_applicable" if not mc["available"] else _verdict(mc["pass"])
        return CheckTable(name, ("coordinate", "mean", "mean_stderr", "var", "var_stderr",
                                 "closed_mean", "closed_var", "pass"), rows, verdict, est.to_dict())
    if name == "convergence":
        lim = mdl.limiting_model(model)
        q = meas.estimate_invariant(lim, opts["burn_in"], opts["n_samples"], opts["thinning"], cfg.seed,
                                    dt, ctx.point(0.0))
        W = ctx.W(opts["W"]) if opts["metric"] == "wtv" else None
        rate = opts["rate"]
        return meas.convergence_profile(model, ctx.point(opts["x"]), q, opts["times"] or cfg.times,
                                        n_paths, cfg.seed, dt, opts["metric"], W, t0=opts["t0"],
                                        tolerance=cfg.tolerances["convergence"], rate=rate)
    if name == "ck":
        rows, n_pass, total = [], 0, 0
        for tau in opts["taus"]:
            for s in opts["ss"]:
                for rep in range(opts["repeats"]):
                    res = meas.ck_consistency(model, tau, s, ctx.point(opts["x"]), n_paths, cfg.seed + rep, dt)
                    rows.append(res.to_row())
                    n_pass += res.passed
                    total += 1
        frac = n_pass / total
        return CheckTable(name, ("tau", "s", "seed", "ks", "threshold", "pass"), rows,
                          _verdict(frac >= opts["min_pass_fraction"]),
                          {"pass_fraction": frac, "min_pass_fraction": opts["min_pass_fraction"],
                           "n_paths": n_paths, "dt": dt})
    if name == "limiting":
        W = ctx.W(opts["W"])
        return meas.limiting_comparison(model, W, ctx.point(opts["x"]), opts["times"] or cfg.times,
                                        n_paths, cfg.seed, dt, M1=ctx.rate_for(W, opts["M1"], name),
                                        t0=opts["t0"], tolerance=cfg.tolerances["limiting"])
    if name == "mckean":
        mv = mk.mean_field_linear(opts["a"], opts["c"], opts["sigma"], dim=ctx.dim)
        res = mk.mv_consistency(mv, ctx.point(opts["x"]), opts["s"], opts["N"], n_paths, cfg.seed, dt,
                                n_sigma=opts["n_sigma"])
        rows = []
        for i in range(ctx.dim):
            rows.append(("mean", i, res.particle_mean[i], res.frozen_mean[i], res.mean_gap[i],
                         res.mean_tol[i], abs(res.mean_gap[i]) <= res.mean_tol[i]))
            rows.append(("second_moment", i, None, None, res.second_gap[i], res.second_tol[i],
                         abs(res.second_gap[i]) <= res.second_tol[i]))
        rows.append(("ks", -1, None, None, res.ks, res.ks_threshold + res.allowance,
                     res.ks < res.ks_threshold + res.allowance))
        return CheckTable(name, ("quantity", "coordinate", "particle", "frozen", "gap", "tolerance", "pass"),
                          rows, _verdict(res.passed), res.to_dict())
    raise ValueError(f"unknown check {name!r}")  # pragma: no cover - validated earlier


def run_checks(cfg: ExperimentConfig) -> list[CheckOutcome]:
    """Execute the configured checks in order; a raising check is recorded as ``error``."""
    ctx = _Context(cfg)
    outs: list[CheckOutcome] = []
    for i, name in enumerate(cfg.checks):
        log.info("[%d/%d] %s on %s", i + 1, len(cfg.checks), name, ctx.model.name)
        opts = cfg.options[name]
        try:
            if name == "envelope":
                got = _run_envelope(ctx, opts)
            else:
                tab = _run_table(name, ctx, opts)
                got = [CheckOutcome(name, tab.verdict, None, tab.to_csv(), tab.to_dict())]
        except ConfigError:
            raise
        except Exception as exc:  # recorded, not thrown
            log.warning("%s raised %s: %s", name, type(exc).__name__, exc)
            got = [CheckOutcome(name, "error", None, None, {"error": f"{type(exc).__name__}: {exc}"})]
        for k, o in enumerate(got):
            if o.csv_text is not None:
                o.csv_name = f"{i:02d}_{_slug(o.name)}.csv"
            log.info("    %s -> %s", o.name, o.verdict)
        outs.extend(got)
    return outs


def _slug(name: str) -> str:
    keep = [c if c.isalnum() else "_" for c in name]
    return "".join(keep).strip("_")


def git_describe() -> str:
    """``git describe`` of the source checkout, or the package version outside one."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=10, check=False)
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else f"v{__version__}"


def report_schema() -> dict:
    """The JSON schema that every ``report.json`` validates against."""
    text = resources.files("sdedecay").joinpath("schemas/report.schema.json").read_text()
    return json.loads(text)


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run ``cfg``, write ``report.json`` plus the CSVs, and return the exit status."""
    import numba

    workers = set_workers(cfg.workers) if cfg.workers is not None else numba.get_num_threads()
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    outs = run_checks(cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for o in outs:
        if o.csv_name is not None:
            (out_dir / o.csv_name).write_text(o.csv_text, newline="")
    failed = [o.name for o in outs if o.verdict in ("fail", "error")]
    status = 1 if failed else 0
    report = {
        "tool": {"name": "sdedecay", "version": __version__, "git_describe": git_describe()},
        "config": cfg.to_dict(),
        "checks": [{"name": o.name, "verdict": o.verdict, "csv": o.csv_name, "summary": jsonable(o.summary)}
                   for o in outs],
        "summary": {"n_checks": len(outs),
                    "n_pass": sum(o.verdict == "pass" for o in outs),
                    "n_fail": sum(o.verdict == "fail" for o in outs),
                    "n_error": sum(o.verdict == "error" for o in outs),
                    "n_not_applicable": sum(o.verdict == "not_applicable" for o in outs),
                    "failed": failed, "exit_status": status},
        "metadata": {"started": started,
                     "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                     "workers": workers, "python": platform.python_version(),
                     "numpy": np.__version__, "numba": numba.__version__},
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=False) + "\n")
    log.info("wrote %s (%d checks, exit %d)", out_dir / "report.json", len(outs), status)
    return status


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------
def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _extra_params(tokens: list[str]) -> dict:
    """Turn ``--key value`` / ``--key=value`` leftovers into model parameters."""
    params, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError("model.params", f"unexpected argument {tok!r}")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"model.params.{tok[2:]}", "missing value")
            key, val = tok[2:], tokens[i + 1]
            i += 2
        params[key.replace("-", "_")] = _parse_value(val)
    return params


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decay", description="Monte Carlo checks of derivative decay for SDEs.")
    p.add_argument("--workers", type=int, default=None,
                   help="cap on worker threads (default: DECAY_WORKERS or all); results do not depend on it")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config (TOML or JSON)")
    r.add_argument("config")
    r.add_argument("--output-dir", default=None, help="override output_dir")

    m = sub.add_parser("models", help="list catalog models")
    m.add_argument("--json", action="store_true", help="machine-readable JSON array")

    c = sub.add_parser("check-assumptions",
                       help="sample the structural assumptions of a model; extra --name value pairs are model parameters")
    c.add_argument("--model", required=True)
    c.add_argument("--W", default=None, help="Lyapunov function (default: the model's claimed W)")
    c.add_argument("--m", type=float, default=2.0, help="monotonicity exponent")
    c.add_argument("--n-samples", type=int, default=10_000)
    c.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("envelope", help="derivative-decay envelope check from flags")
    e.add_argument("--model", required=True)
    e.add_argument("--phi", required=True, help="test function, e.g. identity or poly_local_lipschitz(3)")
    e.add_argument("--family", default="S'_m")
    e.add_argument("--fm", type=float, default=None, help="family exponent m")
    e.add_argument("--times", type=float, nargs="+", default=[1.5, 2.0, 3.0, 4.0])
    e.add_argument("--x-grid", type=float, nargs="+", default=None)
    e.add_argument("--order", type=int, default=1)
    e.add_argument("--n-paths", type=int, default=100_000)
    e.add_argument("--dt", type=float, default=1e-3)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--rate", type=float, default=None)
    e.add_argument("--output-dir", default="decay-output")
    return p


def _check_assumptions(args, params: dict) -> dict:
    try:
        entry = mdl.get_model(args.model, **params)
    except KeyError as exc:
        raise ConfigError("model.name", str(exc.args[0])) from None
    except (ValueError, TypeError) as exc:
        raise ConfigError("model.params", str(exc)) from None
    model = entry.coefficients
    W = lyap.get_lyapunov(args.W or entry.claimed_W or "quadratic", dim=model.dim)
    claimed = entry.claimed_M1
    diss_claim = 2.0 * claimed if (claimed is not None and W.name == "quadratic") else None
    regions = [(0.0, 5.0), (1.0, 5.0)]
    items = []
    for t_range in regions:
        t_range = (t_range[0], min(t_range[1], model.horizon))
        d = lyap.check_dissipativity(model, W, t_range, n_samples=args.n_samples, seed=args.seed)
        mo = lyap.check_monotonicity(model, args.m, t_range, n_samples=args.n_samples, seed=args.seed)
        items.append({"assumption": "dissipativity", "W": W.name, "region": d.region,
                      "M1_est": d.M1_est, "M1_p99": d.M1_p99, "worst": d.worst, "claimed": diss_claim,
                      "verdict": None if diss_claim is None else ("holds on sampled region" if d.holds(diss_claim)
                                                                   else "violated")})
        items.append({"assumption": "monotonicity", "m": args.m, "region": mo.region,
                      "M1_est": mo.M1_est, "M1_p99": mo.M1_p99, "worst": mo.worst, "claimed": claimed,
                      "verdict": None if claimed is None else ("holds on sampled region" if mo.holds(claimed)
                                                               else "violated")})
    return jsonable({"model": args.model, "params": dict(entry.params), "claimed_M1": claimed,
                     "claimed_W": entry.claimed_W, "notes": entry.notes,
                     "catalog_assumptions": dict(entry.assumptions), "checks": items,
                     "statement": "sampled checks can refute but never prove an assumption"})


def _configure_logging(verbose: bool):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    _configure_logging(args.verbose)
    if extra and args.command != "check-assumptions":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    workers = args.workers
    if workers is None and os.environ.get("DECAY_WORKERS"):
        try:
            workers = int(os.environ["DECAY_WORKERS"])
        except ValueError:
            parser.error("DECAY_WORKERS must be an integer")
    try:
        if workers is not None:
            set_workers(workers)
        if args.command == "models":
            rows = mdl.list_models()
            if args.json:
                sys.stdout.write(json.dumps(jsonable(rows), indent=2) + "\n")
            else:
                for row in rows:
                    params = ", ".join(f"{k}={v}" for k, v in row["parameters"].items())
                    sys.stdout.write(f"{row['name']:<12} dim={row['dim']}  M1={row['claimed_M1']}  "
                                     f"W={row['claimed_W']}  ({params})\n")
                    for k, v in row["assumptions"].items():
                        sys.stdout.write(f"    {k}: {v}\n")
            return 0
        if args.command == "check-assumptions":
            doc = _check_assumptions(args, _extra_params(extra))
            sys.stdout.write(json.dumps(doc, indent=2) + "\n")
            return 0
        if args.command == "run":
            cfg = load_config(args.config)
            if args.output_dir is not None:
                cfg.output_dir = args.output_dir
        else:
            doc = {"model": {"name": args.model}, "seed": args.seed, "n_paths": args.n_paths, "dt": args.dt,
                   "times": args.times, "checks": ["envelope"], "output_dir": args.output_dir,
                   "test_functions": [{"name": args.phi, "family": args.family,
                                       **({} if args.fm is None else {"m": args.fm})}],
                   "envelope": {"order": args.order, **({} if args.rate is None else {"rate": args.rate})}}
            if args.x_grid is not None:
                doc["x_grid"] = args.x_grid
            cfg = ExperimentConfig.from_mapping(doc)
        if workers is not None:
            cfg.workers = workers
        status = run_experiment(cfg)
        sys.stdout.write(str(Path(cfg.output_dir) / "report.json") + "\n")
        return status
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
