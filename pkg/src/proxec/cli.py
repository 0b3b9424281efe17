"""Command-line interface: ``analyze``, ``simulate``, ``diagnose`` and ``summarize``.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 estimation failure. Errors are printed to stderr as one JSON object.
Settings come from ``--config`` (JSON) with command-line flags taking
precedence; the resolved settings are embedded in every output file
(as a leading ``#`` comment line in CSV files).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import ColumnMap, StudyDataset, complete_case, exclude_no_followup, exclusion_counts, load_csv, summarize
from .errors import DataError, EstimationError
from .estimating import bootstrap
from .incidence import IncidenceEstimate, estimate_stack
from .inference import PLACEBO_METHODS, efficacy_test, placebo_stack
from .sensitivity import gamma_bounds, proxy_strength
from .survival import km_incidence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ESTIMATION = 0, 1, 2, 3
ANALYZE_METHODS = ("ob", "tb", "dr", "ts1y", "tsall", "naive-x", "naive-xzw", "km")
NEEDS_ZW = {"ob", "tb", "dr", "ts1y", "tsall", "naive-xzw"}
# IPCW needs Z only on the external study, so only these force complete Z
NEEDS_Z_ALL = {"ts1y", "tsall", "naive-xzw"}

DEFAULTS = {
    "analyze": {"t": 365.0, "methods": "ob,tb,dr,ts1y,tsall,naive-x,naive-xzw,km", "level": 0.95, "bootstrap": 0,
                "seed": 0, "workers": 1, "q_moment": "external", "censor": "exponential",
                "exclude_no_followup": False, "interactions": False, "t0": 365.0, "arms": None,
                "dump_fits": False, "columns": {}},
    "diagnose": {"t": 365.0, "methods": "ob,tb,dr", "level": 0.95, "gamma": "1,1.1,1.2,1.5,2", "subset": "combined",
                 "q_moment": "external", "censor": "exponential", "interactions": False, "t0": 365.0,
                 "exclude_no_followup": False, "columns": {}},
    "summarize": {"variables": None, "columns": {}, "exclude_no_followup": False},
    "simulate": {"cells": ["medium,medium"], "n": [6500], "replicates": 50, "seed": 0, "workers": 1, "t": 365.0,
                 "methods": "oracle,naive-x,naive-xzw,ob,tb,dr,ts1y,tsall", "level": 0.95},
}


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, details=None):
        super().__init__(message)
        self.code, self.kind, self.details = code, kind, details or {}


# --------------------------------------------------------------------------
# config and output helpers


def _resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise CliError(EXIT_DATA, "ConfigError", f"cannot read config {args.config}: {err}") from err
        if not isinstance(loaded, dict):
            raise CliError(EXIT_DATA, "ConfigError", "config must be a JSON object")
        unknown = set(loaded) - set(cfg) - {"input", "out"}
        if unknown:
            raise CliError(EXIT_DATA, "ConfigError", f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "config", "func") or value is None:
            continue
        cfg[key] = value
    if "covariates" in cfg:
        # shorthand for the column map's covariate list
        cfg["columns"] = {**(cfg.get("columns") or {}), "covariates": cfg.pop("covariates")}
    return cfg


def _config_line(config: dict) -> str:
    # workers changes scheduling only, so it is left out for byte-identical output
    return "# config=" + json.dumps({k: v for k, v in config.items() if k != "workers"}, sort_keys=True) + "\n"


def _csv_text(rows: list[dict], config: dict) -> str:
    buf = io.StringIO()
    buf.write(_config_line(config))
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return v


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / name, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _json_text(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _methods(cfg: dict, allowed) -> list[str]:
    raw = cfg["methods"]
    codes = [m.strip() for m in (raw.split(",") if isinstance(raw, str) else raw) if m.strip()]
    bad = [m for m in codes if m not in allowed]
    if bad:
        raise CliError(EXIT_DATA, "ConfigError", f"unknown method(s) {bad}; choose from {list(allowed)}")
    return codes


def _load(cfg: dict, need_z: bool, need_w: bool, complete_z: bool | None = None) -> StudyDataset:
    if not cfg.get("input"):
        raise CliError(EXIT_USAGE, "UsageError", "--input is required")
    cmap = ColumnMap.from_dict(cfg.get("columns") or {})
    if not need_z:
        cmap = ColumnMap.from_dict({**cmap.to_dict(), "nce": None})
    if not need_w:
        cmap = ColumnMap.from_dict({**cmap.to_dict(), "nco": None})
    if not cmap.covariates:
        warnings.warn("no covariates mapped; estimators adjust for no baseline covariates "
                      "(use --covariates or the config's columns.covariates)")
    ds = load_csv(cfg["input"], cmap)
    if cfg.get("exclude_no_followup"):
        ds = exclude_no_followup(ds)
    complete_z = need_z if complete_z is None else complete_z
    required = {"covariates"} | ({"nce"} if complete_z else set()) | ({"nco"} if need_w else set())
    return complete_case(ds, required)


def _data_summary(ds: StudyDataset) -> dict:
    return {"n": len(ds), "n0": ds.n0, "n1": ds.n1, "rejects": [{"row": r.row, "reason": r.reason} for r in ds.rejects],
            "exclusions": exclusion_counts(ds), "notes": list(ds.notes)}


# --------------------------------------------------------------------------
# analyze


def _options(cfg: dict) -> dict:
    return {"censor": cfg["censor"], "q_moment": cfg["q_moment"], "interactions": bool(cfg["interactions"]),
            "t0": float(cfg["t0"])}


class _PointEstimator:
    """Picklable closed-form point estimator for bootstrap workers."""

    def __init__(self, code: str, t: float, options: dict):
        self.code, self.t, self.options = code, t, options

    def __call__(self, ds: StudyDataset) -> float:
        return placebo_stack(ds, self.code, self.t, self.options).point


def _with_bootstrap(est: IncidenceEstimate, ds, code, t, cfg) -> IncidenceEstimate:
    res = bootstrap(_PointEstimator(code, t, _options(cfg)), ds, reps=int(cfg["bootstrap"]), seed=int(cfg["seed"]),
                    workers=int(cfg["workers"]), level=float(cfg["level"]))
    diag = {**est.diagnostics, "bootstrap": {"reps": res.reps, "failed": res.failed, "se": res.se,
                                             "percentile_ci": list(res.ci)}, "inference": "bootstrap"}
    return IncidenceEstimate.from_point(est.method, est.t, est.estimate, se=res.se, level=est.level, n0=est.n0,
                                        n1=est.n1, specification=est.specification, diagnostics=diag)


def cmd_analyze(cfg: dict) -> int:
    codes = _methods(cfg, ANALYZE_METHODS)
    t, level = float(cfg["t"]), float(cfg["level"])
    need = any(c in NEEDS_ZW for c in codes)
    ds = _load(cfg, need, need, any(c in NEEDS_Z_ALL for c in codes))
    arms = cfg["arms"] or sorted({int(a) for a in ds.arm[ds.study == 0] if a != 0})
    estimates, efficacy, failures = [], [], []
    options = _options(cfg)
    for code in codes:
        if code == "km":
            for a in arms:
                sel = (ds.study == 0) & (ds.arm == a)
                if sel.any():
                    e = km_incidence(ds.time[sel], ds.event[sel], t, level, specification=f"arm {a}")
                    estimates.append({"code": "km", **e.to_json()})
            continue
        try:
            stack = placebo_stack(ds, code, t, options)
            est = estimate_stack(stack, PLACEBO_METHODS[code][0], t, level)
            if int(cfg["bootstrap"]) > 0:
                est = _with_bootstrap(est, ds, code, t, cfg)
        except EstimationError as err:
            failures.append({"code": code, "error": type(err).__name__, "message": str(err),
                             "diagnostics": err.diagnostics})
            continue
        estimates.append({"code": code, **est.to_json()})
        if not est.valid or not stack.sandwich:
            continue
        for a in arms:
            try:
                res = efficacy_test(ds, a, stack, t)
            except EstimationError as err:
                failures.append({"code": code, "arm": a, "error": type(err).__name__, "message": str(err)})
                continue
            efficacy.append({"code": code, **res.to_json(), "method": PLACEBO_METHODS[code][0]})
    if not estimates:
        raise CliError(EXIT_ESTIMATION, "EstimationError", "every requested estimator failed", {"failures": failures})
    out = Path(cfg.get("out") or ".")
    payload = {"config": cfg, "data": _data_summary(ds), "estimates": estimates, "efficacy": efficacy,
               "failures": failures, "version": __version__}
    if cfg.get("dump_fits"):
        payload["fits"] = {e["code"]: e["diagnostics"] for e in estimates}
    _write(out, "estimates.json", _json_text(payload))
    rows = [{"code": e["code"], "method": e["method"], "specification": e["specification"], "t": e["t"],
             "estimate": e["estimate"], "cloglog": e["cloglog"], "se_cloglog": e["se_cloglog"],
             "ci_lower": (e["ci_prob"] or [None, None])[0], "ci_upper": (e["ci_prob"] or [None, None])[1],
             "valid": e["valid"], "n0": e["n0"], "n1": e["n1"]} for e in estimates]
    _write(out, "estimates.csv", _csv_text(rows, cfg))
    eff_rows = [{"arm": r["arm"], "code": r["code"], "method": r["method"], "specification": r["specification"],
                 "rel_eff": r["rel_eff"], "abs_eff": r["abs_eff"], "stat": r["stat"], "pvalue": r["pvalue"]}
                for r in efficacy]
    _write(out, "efficacy.csv", _csv_text(eff_rows, cfg))
    for r in rows:
        ci = "" if r["ci_lower"] is None else f"  [{r['ci_lower']:.4f}, {r['ci_upper']:.4f}]"
        print(f"{r['code']:10s} {r['specification']:22s} {r['estimate']:.4f}{ci}{'' if r['valid'] else '  INVALID'}")
    for r in eff_rows:
        print(f"arm {r['arm']} vs {r['code']:10s} rel {r['rel_eff']:.3f} abs {r['abs_eff']:.3f} "
              f"stat {r['stat']:.3f} p {r['pvalue']:.3g}")
    if failures:
        print(json.dumps({"failures": failures}, default=_json_default), file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# diagnose


def cmd_diagnose(cfg: dict) -> int:
    codes = _methods(cfg, ("ob", "tb", "dr"))
    t, level = float(cfg["t"]), float(cfg["level"])
    ds = _load(cfg, True, True, complete_z=False)
    ps = proxy_strength(ds, cfg["subset"])
    raw = cfg["gamma"]
    gammas = [float(g) for g in (raw.split(",") if isinstance(raw, str) else raw)]
    if not gammas or min(gammas) < 1:
        raise CliError(EXIT_DATA, "ConfigError", f"Gamma values must be >= 1, got {gammas}")
    out = Path(cfg.get("out") or ".")
    _write(out, "proxy_strength.csv", _csv_text([ps.to_row()], cfg))
    rows = []
    for code in codes:
        est = estimate_stack(placebo_stack(ds, code, t, _options(cfg)), PLACEBO_METHODS[code][0], t, level)
        if not est.valid:
            rows.append({"gamma": None, "gamma2": None, "method": est.method, "estimate": est.estimate, "lower": None,
                         "upper": None, "capped": None, "cloglog_lower": None, "cloglog_upper": None})
            continue
        try:
            rows.extend(b.to_row() for b in gamma_bounds(est, gammas))
        except ValueError as err:
            raise CliError(EXIT_DATA, "ConfigError", str(err)) from err
    _write(out, "gamma_bounds.csv", _csv_text(rows, cfg))
    _write(out, "diagnose.json", _json_text({"config": cfg, "data": _data_summary(ds),
                                             "proxy_strength": ps.to_row(), "gamma_bounds": rows}))
    flag = "WEAK PROXY" if ps.weak else "ok"
    print(f"proxy strength ({ps.subset}, n={ps.n}): OR {ps.odds_ratio:.3f} "
          f"[{ps.ci[0]:.3f}, {ps.ci[1]:.3f}] p={ps.pvalue:.3g} {flag}")
    for r in rows:
        if r["gamma"] is not None:
            print(f"{r['method']:17s} gamma {r['gamma']:<5g} [{r['lower']:.4f}, {r['upper']:.4f}]"
                  f"{' capped' if r['capped'] else ''}")
    return EXIT_OK


# --------------------------------------------------------------------------
# summarize


def cmd_summarize(cfg: dict) -> int:
    cmap = ColumnMap.from_dict(cfg.get("columns") or {})
    if not cfg.get("input"):
        raise CliError(EXIT_USAGE, "UsageError", "--input is required")
    ds = load_csv(cfg["input"], cmap)
    if cfg.get("exclude_no_followup"):
        ds = exclude_no_followup(ds)
    variables = cfg["variables"]
    if variables is None:
        variables = [c.name for c in ds.schema.categoricals]
        cat_cols = {c for cat in ds.schema.categoricals for c in cat.columns}
        variables += [c for c in ds.schema.covariates if c not in cat_cols]
        variables += [n for n, present in (("Z", ds.nce is not None), ("W", ds.nco is not None)) if present]
    elif isinstance(variables, str):
        variables = [v.strip() for v in variables.split(",") if v.strip()]
    table = summarize(ds, variables)
    out = Path(cfg.get("out") or ".")
    _write(out, "summary.csv", _config_line(cfg) + table.to_csv())
    _write(out, "summary.txt", _config_line(cfg) + table.to_text())
    print(table.to_text(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate


def _as_list(v) -> list:
    return [v] if isinstance(v, str) else list(v)


def cmd_simulate(cfg: dict) -> int:
    from .dgp import DGPConfig, calibration_check
    from .simulation import SimScenario, run_scenarios

    out = Path(cfg.get("out") or ".")
    if cfg.get("calibration_check"):
        res = calibration_check(DGPConfig.for_cell(_as_list(cfg["cells"])[0]), n=int(cfg["calibration_check"]),
                                seed=int(cfg["seed"]))
        _write(out, "calibration.json", _json_text({"config": cfg, "result": res}))
        print(json.dumps(res, default=_json_default))
        return EXIT_OK
    try:
        cells = _as_list(cfg["cells"])
        ns = [int(x) for x in (cfg["n"] if isinstance(cfg["n"], (list, tuple)) else [cfg["n"]])]
        methods = tuple(_methods(cfg, tuple(PLACEBO_METHODS)))
        scenarios = [SimScenario(c, n, methods, float(cfg["t"]), float(cfg["level"])) for c in cells for n in ns]
        reps = int(cfg["replicates"])
        if reps < 1:
            raise ValueError("replicates must be at least 1")
    except (ValueError, TypeError, KeyError) as err:
        raise CliError(EXIT_DATA, "ConfigError", f"malformed simulation config: {err}") from err
    embedded = {k: v for k, v in cfg.items() if k != "workers"}
    report = run_scenarios(scenarios, reps, seed=int(cfg["seed"]), workers=int(cfg["workers"]), config=embedded)
    _write(out, "report.csv", _config_line(cfg) + report.to_csv())
    _write(out, "report.json", _json_text(report.metadata))
    print(report.to_csv(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="JSON file with settings; flags override it")
    p.add_argument("--out", help="output directory (default: current directory)")
    if data:
        p.add_argument("--input", help="input CSV")
        p.add_argument("--covariates", type=lambda s: [c for c in s.split(",") if c],
                       help="comma list of adjustment covariate columns")
        p.add_argument("--exclude-no-followup", dest="exclude_no_followup", action="store_const", const=True,
                       help="drop records with time 0 and no event")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate counterfactual placebo incidence and efficacy")
    _common(a)
    a.add_argument("--t", type=float, help="horizon in days (default 365)")
    a.add_argument("--methods", help=f"comma list from {','.join(ANALYZE_METHODS)}")
    a.add_argument("--level", type=float, help="confidence level (default 0.95)")
    a.add_argument("--bootstrap", type=int, help="bootstrap replicates (0 = sandwich only)")
    a.add_argument("--seed", type=int)
    a.add_argument("--workers", type=int)
    a.add_argument("--q-moment", dest="q_moment", choices=("external", "alldata"))
    a.add_argument("--censor", choices=("exponential", "cox"))
    a.add_argument("--t0", type=float, help="two-stage truncation window for ts1y (default 365)")
    a.add_argument("--interactions", action="store_const", const=True, help="add W*X and Z*X bridge terms")
    a.add_argument("--arms", type=lambda s: [int(x) for x in s.split(",")], help="active arm labels to test")
    a.add_argument("--dump-fits", dest="dump_fits", action="store_const", const=True)
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("diagnose", help="proxy strength and Gamma sensitivity bounds")
    _common(d)
    d.add_argument("--t", type=float)
    d.add_argument("--methods", help="comma list from ob,tb,dr")
    d.add_argument("--level", type=float)
    d.add_argument("--gamma", help="comma list of Gamma values >= 1")
    d.add_argument("--subset", choices=("external", "primary", "combined"))
    d.add_argument("--q-moment", dest="q_moment", choices=("external", "alldata"))
    d.add_argument("--censor", choices=("exponential", "cox"))
    d.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("summarize", help="baseline characteristics by study")
    _common(s)
    s.add_argument("--variables", help="comma list of variables (default: all)")
    s.set_defaults(func=cmd_summarize)

    m = sub.add_parser("simulate", help="run the factorial simulation design")
    _common(m, data=False)
    m.add_argument("--cell", dest="cells", action="append",
                   help="proxy-strength cell 'W,Z' with levels medium/high; repeatable")
    m.add_argument("--n", type=int, action="append", help="sample size; repeatable")
    m.add_argument("--replicates", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--workers", type=int)
    m.add_argument("--t", type=float)
    m.add_argument("--methods", help=f"comma list from {','.join(PLACEBO_METHODS)}")
    m.add_argument("--calibration-check", dest="calibration_check", type=int, metavar="N",
                   help="only check the DGP anchors with N latent draws")
    m.set_defaults(func=cmd_simulate)
    return parser


def _fail(code: int, kind: str, message: str, details=None) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code, "details": details or {}},
                     default=_json_default), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args.command, args)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            code = args.func(cfg)
        for w in caught:
            print(json.dumps({"warning": str(w.message)}), file=sys.stderr)
        return code
    except CliError as err:
        return _fail(err.code, err.kind, str(err), err.details)
    except DataError as err:
        return _fail(EXIT_DATA, type(err).__name__, str(err), getattr(err, "details", {}))
    except EstimationError as err:
        return _fail(EXIT_ESTIMATION, type(err).__name__, str(err), err.diagnostics)
    except ValueError as err:
        return _fail(EXIT_DATA, "ConfigError", str(err))


if __name__ == "__main__":
    sys.exit(main())
