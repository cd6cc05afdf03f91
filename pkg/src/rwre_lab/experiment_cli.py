"""Configuration, orchestration and output for all experiments.

A run directory holds ``data.csv`` (one row per report and N), ``summary.json`` (one entry
per verdict) and ``manifest.json`` (config hash, code version, seeds, timestamps, files).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .env_models import (
    EnvironmentSpec,
    ModelError,
    nearest_neighbor,
    random_landscape,
    simple_random_walk,
    symmetric_lazy,
)
from .seeding import replica_seeds

KINDS = (
    "density-field",
    "qvf",
    "erdos-taylor",
    "geometric-d3",
    "local-time-d1",
    "invariance",
    "anti-concentration",
    "expectation-limit",
    "backward-propagation",
    "invariant-measure",
    "coefficients",
)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class EnvironmentSection:
    model: str = "nearest_neighbor"
    d: int = 1
    weight_law: str = "uniform"
    alpha: float = 1.0
    composite_steps: int | None = None
    lo: float = 0.0
    hi: float = 1.0
    levels: tuple = (-0.5, 0.5)
    independent: bool = False

    def build(self) -> EnvironmentSpec:
        if self.model == "simple_random_walk":
            return simple_random_walk(self.d, self.composite_steps or 1)
        if self.model == "nearest_neighbor":
            return nearest_neighbor(self.d, self.weight_law, self.alpha,
                                    2 if self.composite_steps is None else self.composite_steps)
        if self.model == "symmetric_lazy":
            return symmetric_lazy(self.d, self.lo, self.hi)
        if self.model == "random_landscape":
            return random_landscape(self.d, self.levels)
        raise ConfigError(f"environment.model: unknown model {self.model!r}")


@dataclass(frozen=True)
class ScalingSection:
    regime: str = "B"
    p: int | None = None
    n_grid: tuple = (10000,)
    v: tuple = (1.0,)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    environment: EnvironmentSection = field(default_factory=EnvironmentSection)
    scaling: ScalingSection = field(default_factory=ScalingSection)
    replicas: int = 1000
    seed: int = 0
    out: str = "runs"
    tolerances: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def canonical(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        # seed and output location are run inputs, not part of the experiment identity
        body = {k: v for k, v in self.canonical().items() if k not in ("seed", "out")}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _section(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{where}.{k}: unknown key")
    kw = {}
    for k, v in data.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a mapping")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{k}: unknown key")
    if "kind" not in data:
        raise ConfigError("kind: missing required key")
    kind = data["kind"]
    if kind not in KINDS:
        raise ConfigError(f"kind: unknown experiment kind {kind!r}")
    kw = dict(data)
    kw["environment"] = _section(EnvironmentSection, data.get("environment"), "environment")
    kw["scaling"] = _section(ScalingSection, data.get("scaling"), "scaling")
    for k in ("tolerances", "options"):
        if k in kw and not isinstance(kw[k], dict):
            raise ConfigError(f"{k}: expected a mapping")
    for k in kw.get("options", {}):
        if k not in _KIND_OPTIONS[kind]:
            raise ConfigError(f"options.{k}: unknown key for kind {kind!r}")
    for k in kw.get("tolerances", {}):
        if k not in _KIND_TOLERANCES[kind]:
            raise ConfigError(f"tolerances.{k}: unknown key for kind {kind!r}")
    cfg = ExperimentConfig(**kw)
    if cfg.replicas < 1:
        raise ConfigError("replicas: must be positive")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed: must be an unsigned 64-bit integer")
    _validate_scaling(cfg)
    return cfg


def _validate_scaling(cfg: ExperimentConfig) -> None:
    if cfg.kind not in ("density-field", "qvf"):
        return
    from .density_fields import scaling_schedule

    spec = cfg.environment.build()
    p = cfg.scaling.p or _symmetry(spec)
    v = list(cfg.scaling.v) + [0.0] * (spec.d - len(cfg.scaling.v))
    for N in cfg.scaling.n_grid:
        try:
            scaling_schedule(p, spec.d, cfg.scaling.regime, int(N), v[: spec.d], spec)
        except ModelError as e:
            raise ConfigError(f"scaling (regime={cfg.scaling.regime}, d={spec.d}, N={N}): {e}") from e


def _symmetry(spec: EnvironmentSpec) -> int:
    from .env_models import symmetry_order

    return symmetry_order(spec)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such file")
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.canonical(), sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# dispatch

_KIND_OPTIONS = {
    "density-field": {"phi_width"},
    "qvf": {"sep_scale"},
    "erdos-taylor": {"start"},
    "geometric-d3": {"horizon"},
    "local-time-d1": {"t_grid"},
    "invariance": {"t_grid"},
    "anti-concentration": {"r_grid"},
    "expectation-limit": {"variant", "t", "phi", "separation"},
    "backward-propagation": {"phi_width"},
    "invariant-measure": {"radius", "y_far", "horizon", "target"},
    "coefficients": {"which", "target", "v_small", "v_mid", "horizon"},
}
_KIND_TOLERANCES = {
    "density-field": {"relative", "level"},
    "qvf": {"relative"},
    "erdos-taylor": {"relative", "level"},
    "geometric-d3": {"level", "tail"},
    "local-time-d1": {"relative", "slope"},
    "invariance": {"n_se"},
    "anti-concentration": {"level"},
    "expectation-limit": {"relative"},
    "backward-propagation": {"floor_ratio"},
    "invariant-measure": {"relative", "unit", "window"},
    "coefficients": {"relative", "margin", "n_se"},
}


def _chain(cfg: ExperimentConfig):
    from .limit_estimators import SRIChainHandle

    spec = cfg.environment.build()
    return SRIChainHandle.independent(spec) if cfg.environment.independent else SRIChainHandle.environment(spec)


def _tol(cfg, key, default):
    return cfg.tolerances.get(key, default)


def _run_kind(cfg: ExperimentConfig) -> list:
    from . import limit_estimators as L
    from .reference_quadrature import TestFunction

    spec = cfg.environment.build()
    d = spec.d
    o = cfg.options
    Ns = [int(n) for n in cfg.scaling.n_grid]
    k = cfg.kind
    if k == "density-field":
        w = float(o.get("phi_width", 1.0))
        return [L.field_gaussianity_test(spec, N, cfg.replicas, cfg.seed, TestFunction.gaussian([0.0] * d, w),
                                         tuple(cfg.scaling.v), cfg.scaling.regime, _tol(cfg, "relative", 0.15),
                                         _tol(cfg, "level", 0.05)) for N in Ns]
    if k == "qvf":
        if cfg.scaling.regime != "C":
            raise ConfigError("qvf: only regime C is wired to a test")
        v = [abs(float(x)) for x in cfg.scaling.v]
        return [L.regime_c_ratio_test(spec, N, v, cfg.replicas, cfg.seed, _tol(cfg, "relative", 0.25),
                                      float(o.get("sep_scale", 1.0))) for N in Ns]
    if k == "erdos-taylor":
        y0 = o.get("start", [0] * d)
        return [L.erdos_taylor_test(_chain(cfg), L.indicator(d), N, y0, cfg.replicas, cfg.seed,
                                    tol=_tol(cfg, "relative", 0.15), level=_tol(cfg, "level", 0.01)) for N in Ns]
    if k == "geometric-d3":
        hz = int(o.get("horizon", Ns[-1]))
        return [L.total_collision_test_d3(_chain(cfg), hz, cfg.replicas, cfg.seed, level=_tol(cfg, "level", 0.01),
                                          tail_tol=_tol(cfg, "tail", 0.01))]
    if k == "local-time-d1":
        tg = o.get("t_grid", [0.25, 1.0, 4.0])
        return [L.local_time_test_d1(_chain(cfg), L.indicator(d), N, tg, cfg.replicas, cfg.seed,
                                     _tol(cfg, "relative", 0.05), _tol(cfg, "slope", 0.05)) for N in Ns]
    if k == "invariance":
        tg = tuple(o.get("t_grid", [0.5, 1.0]))
        return [L.invariance_principle_test(_chain(cfg), N, cfg.replicas, cfg.seed, tg, n_se=_tol(cfg, "n_se", 3.0))
                for N in Ns]
    if k == "anti-concentration":
        rg = o.get("r_grid", [100, 300, 1000, 3000, 10000])
        return [L.anti_concentration_scan(_chain(cfg), rg, cfg.replicas, cfg.seed, _tol(cfg, "level", 0.05))]
    if k == "expectation-limit":
        variant = o.get("variant", "separated")
        t = float(o.get("t", 1.0))
        phi = TestFunction.constant(d) if o.get("phi", "constant") == "constant" else TestFunction.gaussian([0.0] * d, 1.0)
        reps = []
        for N in Ns:
            x1 = [0] * d
            x2 = [0] * d
            if variant == "separated" and d >= 2:
                s = int(o.get("separation", math.isqrt(N)))
                x2[0] = s + s % 2
            reps.append(L.expectation_limit_test(_chain(cfg), L.indicator(d), phi, x1, x2, [N], cfg.replicas,
                                                 cfg.seed, t, _tol(cfg, "relative", 0.1), variant))
        return reps
    if k == "backward-propagation":
        phi = TestFunction.gaussian([0.0] * d, float(o.get("phi_width", 1.0)))
        return [L.backward_propagation_test(_chain(cfg), L.indicator(d), phi, Ns, cfg.replicas, cfg.seed,
                                            floor_ratio=_tol(cfg, "floor_ratio", 0.5))]
    if k == "invariant-measure":
        return [L.invariant_measure_test(spec, o.get("target"), _tol(cfg, "relative", 0.02), int(o.get("radius", 60)),
                                         _tol(cfg, "unit", 1e-8), _tol(cfg, "window", 0.005),
                                         o.get("y_far"), int(o.get("horizon", 100000)),
                                         cfg.replicas, cfg.seed)]
    if k == "coefficients":
        which = o.get("which", "gamma")
        if which == "gamma":
            return [L.gamma_closed_form_test(spec, o.get("target"), _tol(cfg, "relative", 0.05))]
        if which == "taylor":
            return [L.taylor_remainder_test([spec], _tol(cfg, "margin", 0.2))]
        if which == "theta":
            return [L.theta_eff_test(spec, None, float(o.get("v_small", 1e-3)), float(o.get("v_mid", 0.1)),
                                     cfg.replicas, int(o.get("horizon", 20000)), cfg.seed, _tol(cfg, "n_se", 3.0))]
        raise ConfigError(f"options.which: unknown coefficient check {which!r}")
    raise ConfigError(f"kind: unknown experiment kind {k!r}")


# ---------------------------------------------------------------------------
# output

CSV_FIELDS = ("kind", "name", "N", "verdict", "estimate", "stderr", "target", "tolerance", "statistic", "p_value",
              "replicas", "seed")


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _report_N(rep, cfg) -> str:
    n = rep.details.get("N")
    if isinstance(n, (list, tuple, np.ndarray)):
        n = n[-1] if len(n) else None
    return _num(n)


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    seed: int
    started: str
    finished: str
    replica_seeds: list
    files: list
    status: str
    error: str | None = None

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def _new_run_dir(root: Path, cfg: ExperimentConfig) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    base = f"{cfg.kind}-{cfg.digest()}-s{cfg.seed}"
    k = 0
    while (root / f"{base}-{k:03d}").exists():
        k += 1
    out = root / f"{base}-{k:03d}"
    out.mkdir()
    return out


def run_experiment(cfg: ExperimentConfig, out: str | None = None) -> tuple[RunManifest, list, Path]:
    """Run one config into a fresh directory; returns (manifest, reports, directory)."""
    root = Path(out if out is not None else cfg.out)
    run_dir = _new_run_dir(root, cfg)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    reports, error = [], None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            reports = _run_kind(cfg)
    except (ModelError, ConfigError, ValueError) as e:
        error = f"{type(e).__name__}: {e}"
    with open(run_dir / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in reports:
            w.writerow([cfg.kind, r.name, _report_N(r, cfg), _num(r.verdict), _num(r.estimate), _num(r.stderr),
                        _num(r.target), _num(r.tolerance), _num(r.statistic), _num(r.p_value), _num(r.replicas),
                        _num(r.seed)])
    summary = {"kind": cfg.kind, "config_hash": cfg.digest(), "seed": cfg.seed,
               "all_pass": bool(reports) and error is None and all(r.verdict for r in reports),
               "error": error, "reports": [r.as_dict() for r in reports]}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str))
    dump_config(cfg, run_dir / "config.yaml")
    seeds = [int(s) for s in replica_seeds(cfg.seed, min(cfg.replicas, 100000), cfg.kind)]
    man = RunManifest(cfg.digest(), __version__, cfg.seed, started, time.strftime("%Y-%m-%dT%H:%M:%S"), seeds,
                      ["data.csv", "summary.json", "config.yaml"], "ok" if error is None else "error", error)
    (run_dir / "manifest.json").write_text(json.dumps(man.as_dict(), indent=2))
    return man, reports, run_dir


# ---------------------------------------------------------------------------
# report


def _load_run(path: Path) -> dict:
    path = Path(path)
    if path.is_file():
        path = path.parent
    return {"dir": path, "manifest": json.loads((path / "manifest.json").read_text()),
            "summary": json.loads((path / "summary.json").read_text()),
            "config": yaml.safe_load((path / "config.yaml").read_text())}


def _diff_keys(a: dict, b: dict, prefix: str = "") -> list:
    out = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        key = f"{prefix}{k}"
        if isinstance(va, dict) and isinstance(vb, dict):
            out += _diff_keys(va, vb, key + ".")
        elif va != vb:
            out.append(key)
    return out


def report(paths, out_csv=None) -> dict:
    """Pool runs of one config over seeds; inverse-variance pooling of each estimate."""
    runs = [_load_run(p) for p in paths]
    if not runs:
        raise ConfigError("report: no runs given")
    base = {k: v for k, v in runs[0]["config"].items() if k not in ("seed", "out")}
    for r in runs[1:]:
        other = {k: v for k, v in r["config"].items() if k not in ("seed", "out")}
        diff = _diff_keys(base, other)
        if diff:
            raise ConfigError("report: refusing to pool runs with differing keys: " + ", ".join(diff))
    versions = {r["manifest"]["code_version"] for r in runs}
    if len(versions) > 1:
        warnings.warn(f"mixed code versions {sorted(versions)}")
    n_rep = len(runs[0]["summary"]["reports"])
    pooled = []
    for i in range(n_rep):
        rows = [r["summary"]["reports"][i] for r in runs if len(r["summary"]["reports"]) > i]
        est = np.array([x["estimate"] if x["estimate"] is not None else np.nan for x in rows], float)
        se = np.array([x["stderr"] if x["stderr"] is not None else np.nan for x in rows], float)
        if len(rows) == 1:
            pe, ps = est[0], se[0]
        elif np.all(np.isfinite(se)) and np.all(se > 0):
            w = 1.0 / se**2
            pe, ps = float(np.sum(w * est) / w.sum()), float(1.0 / math.sqrt(w.sum()))
        else:
            pe, ps = float(np.mean(est)), float("nan")
        tgt, tol = rows[0]["target"], rows[0]["tolerance"]
        pooled.append({"name": rows[0]["name"], "runs": len(rows), "estimate": _f(pe), "stderr": _f(ps),
                       "target": tgt, "tolerance": tol, "verdicts": [bool(x["verdict"]) for x in rows],
                       "all_pass": all(bool(x["verdict"]) for x in rows)})
    agg = {"kind": runs[0]["summary"]["kind"], "config_hash": runs[0]["manifest"]["config_hash"],
           "seeds": [r["manifest"]["seed"] for r in runs], "pooled": pooled,
           "all_pass": all(p["all_pass"] for p in pooled) and all(r["summary"]["error"] is None for r in runs)}
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("name", "runs", "estimate", "stderr", "target", "tolerance", "all_pass"))
            for p in pooled:
                w.writerow((p["name"], p["runs"], _num(p["estimate"]), _num(p["stderr"]), _num(p["target"]),
                            _num(p["tolerance"]), _num(p["all_pass"])))
    return agg


def _f(x):
    return None if x is None or not np.isfinite(x) else float(x)


# ---------------------------------------------------------------------------
# command line


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.replicas is not None:
        kw["replicas"] = args.replicas
    if args.out is not None:
        kw["out"] = args.out
    if args.n_grid is not None:
        grid = tuple(int(float(x)) for x in args.n_grid.split(","))
        kw["scaling"] = dataclasses.replace(cfg.scaling, n_grid=grid)
    return config_from_dict({**cfg.canonical(), **{k: _plain(dataclasses.asdict(v)) if dataclasses.is_dataclass(v)
                                                    else v for k, v in kw.items()}})


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rwre-lab", description="Random walk in random environment experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind, help=f"run a {kind} experiment")
        sp.add_argument("--config", help="YAML or JSON config; kind is taken from the subcommand")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--replicas", type=int)
        sp.add_argument("--out")
        sp.add_argument("--n-grid", help="comma-separated N values, e.g. 1e4,1e5")
    rp = sub.add_parser("report", help="pool run directories of one config")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("--csv")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            agg = report(args.runs, args.csv)
            print(json.dumps(agg, indent=2))
            return 0 if agg["all_pass"] else 1
        if args.config:
            data = parse_config(args.config).canonical()
            if data["kind"] != args.command:
                raise ConfigError(f"kind: config says {data['kind']!r} but subcommand is {args.command!r}")
        else:
            data = {"kind": args.command}
        cfg = _apply_overrides(config_from_dict(data), args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    man, reports, run_dir = run_experiment(cfg)
    for r in reports:
        print(r.line())
    print(f"outputs: {run_dir}")
    if man.error:
        print(f"error: {man.error}", file=sys.stderr)
        return 1
    return 0 if reports and all(r.verdict for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
