"""Monte Carlo harness for the factorial simulation design.

Each replicate draws one dataset, fits every requested placebo estimator
once, and runs two efficacy tests against it: one with primary-trial times
from the active law (power) and one with them from the placebo law
(type-I error). Replicate ``r`` of scenario ``s`` always uses the stream
``SeedSequence(seed, spawn_key=(crc32(s.id), r))``, so results do not depend
on worker count, scheduling or how the replicate range is split.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import io
import json
import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dgp import CELLS, DGPConfig, calibration_constant, generate, observe, true_incidence
from .errors import EstimationError
from .estimating import solve
from .incidence import cloglog, inv_cloglog, z_quantile
from .inference import PLACEBO_METHODS, efficacy_test, placebo_stack

DEFAULT_METHODS = ("oracle", "naive-x", "naive-xzw", "ob", "tb", "dr", "ts1y", "tsall")
IPCW_METHODS = frozenset({"ob", "tb", "dr"})
LABELS = {
    "oracle": ("Oracle", "Adjust for X,U"),
    "naive-x": ("Naïve", "Adjust for X"),
    "naive-xzw": ("Naïve", "Adjust for X,Z,W"),
    "ob": ("IPCW", "Outcome bridge"),
    "tb": ("IPCW", "Propensity bridge"),
    "dr": ("IPCW", "Doubly robust"),
    "ts1y": ("Two-stage", "1-year"),
    "tsall": ("Two-stage", "All data"),
}
COLUMNS = ("Factor 2", "Method", "Specification", "Estimate", "Est. Incidence", "SD", "Med. SE", "Coverage",
           "Power", "Type I Error", "Prop_ex", "n", "replicates", "failed")
ARM_CONVENTION = ("power: primary-trial times follow the active law; type-I error: they follow the placebo "
                  "law used for external records (null configuration)")


@dataclass(frozen=True)
class SimScenario:
    cell: str
    n: int = 6500
    methods: tuple[str, ...] = DEFAULT_METHODS
    t: float = 365.0
    level: float = 0.95

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ValueError(f"unknown cell {self.cell!r}; choose from {sorted(CELLS)}")
        unknown = set(self.methods) - set(PLACEBO_METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")

    @property
    def id(self) -> str:
        return f"{self.cell}|n={self.n}"

    @property
    def factor2(self) -> str:
        w, z = self.cell.split(",")
        return f"{w} W, {z} Z"

    def config(self) -> DGPConfig:
        return DGPConfig.for_cell(self.cell, self.n)

    def to_dict(self) -> dict:
        return asdict(self)


def replicate_seed(master: int, scenario: SimScenario, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(zlib.crc32(scenario.id.encode()), rep))


@dataclass(frozen=True)
class ReplicateRecord:
    scenario: str
    rep: int
    method: str
    status: str  # "ok", "invalid" or "failed"
    estimate: float = math.nan
    cloglog: float = math.nan
    se_cloglog: float = math.nan
    covered: float = math.nan
    reject_alt: float = math.nan
    reject_null: float = math.nan
    error: str = ""


def run_replicate(scenario: SimScenario, rep: int, seed: int) -> list[ReplicateRecord]:
    cfg = scenario.config()
    truth = true_incidence(cfg)
    ds = generate(cfg, replicate_seed(seed, scenario, rep))
    dnull = observe(ds, "placebo")
    z = z_quantile(scenario.level)
    alpha = 1 - scenario.level
    out = []
    for code in scenario.methods:
        try:
            stack = placebo_stack(ds, code, scenario.t)
            sol = solve(stack.system, stack.init)
        except EstimationError as err:
            out.append(ReplicateRecord(scenario.id, rep, code, "failed", error=type(err).__name__))
            continue
        p = float(sol.theta[stack.target])
        if not (0 < p < 1 and math.isfinite(p)):
            out.append(ReplicateRecord(scenario.id, rep, code, "invalid", estimate=p))
            continue
        th = cloglog(p)
        se = float(sol.se[stack.target]) * abs(1 / (p * math.log(p)))
        covered = float(abs(th - cloglog(truth)) <= z * se)
        rej = []
        for data in (ds, dnull):
            try:
                res = efficacy_test(data, 1, stack, scenario.t, placebo_solution=sol)
                rej.append(float(res.pvalue < alpha))
            except EstimationError:
                rej.append(math.nan)
        out.append(ReplicateRecord(scenario.id, rep, code, "ok", p, th, se, covered, rej[0], rej[1]))
    return out


def _job(args):
    scenario, rep, seed = args
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run_replicate(scenario, rep, seed)


def run_records(scenarios: Sequence[SimScenario], replicates: int | range, seed: int = 0,
                workers: int = 1) -> list[ReplicateRecord]:
    """Raw per-replicate records, ordered by (scenario, replicate, method)."""
    reps = range(replicates) if isinstance(replicates, int) else replicates
    if len(reps) < 1:
        raise ValueError("replicates must be at least 1")
    for s in scenarios:
        calibration_constant(s.config())  # warn once, in this process
    jobs = [(s, r, seed) for s in scenarios for r in reps]
    if workers > 1:
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(_job, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    else:
        chunks = [_job(j) for j in jobs]
    return [rec for chunk in chunks for rec in chunk]


# --------------------------------------------------------------------------
# aggregation


def _mean(a) -> float | None:
    a = np.asarray(a, dtype=float)
    a = a[~np.isnan(a)]
    return float(np.mean(a)) if a.size else None


@dataclass(frozen=True)
class SimRow:
    factor2: str
    method: str
    specification: str
    code: str
    estimate: float | None
    incidence: float | None
    sd: float | None
    median_se: float | None
    coverage: float | None
    power: float | None
    type1: float | None
    prop_ex: float | None
    n: int
    replicates: int
    failed: int

    def values(self) -> dict:
        return {"Factor 2": self.factor2, "Method": self.method, "Specification": self.specification,
                "Estimate": self.estimate, "Est. Incidence": self.incidence, "SD": self.sd,
                "Med. SE": self.median_se, "Coverage": self.coverage, "Power": self.power,
                "Type I Error": self.type1, "Prop_ex": self.prop_ex, "n": self.n,
                "replicates": self.replicates, "failed": self.failed}


def aggregate(scenario: SimScenario, records: Iterable[ReplicateRecord]) -> list[SimRow]:
    recs = sorted((r for r in records if r.scenario == scenario.id), key=lambda r: (r.rep, r.method))
    rows = []
    for code in scenario.methods:
        mine = [r for r in recs if r.method == code]
        ok = [r for r in mine if r.status == "ok"]
        invalid = sum(r.status == "invalid" for r in mine)
        failed = sum(r.status == "failed" for r in mine)
        th = np.array([r.cloglog for r in ok])
        est = float(np.mean(th)) if ok else None
        attempted = len(mine) - failed
        rows.append(SimRow(
            factor2=scenario.factor2,
            method=LABELS[code][0],
            specification=LABELS[code][1],
            code=code,
            estimate=est,
            incidence=inv_cloglog(est) if est is not None else None,
            sd=float(np.std(th, ddof=1)) if len(ok) >= 2 else None,
            median_se=float(np.median([r.se_cloglog for r in ok])) if ok else None,
            coverage=_mean([r.covered for r in ok]),
            power=_mean([r.reject_alt for r in ok]),
            type1=_mean([r.reject_null for r in ok]),
            prop_ex=invalid / attempted if attempted else None,
            n=scenario.n,
            replicates=len(mine),
            failed=failed,
        ))
    return rows


@dataclass
class SimReport:
    rows: list[SimRow]
    metadata: dict = field(default_factory=dict)

    def row(self, cell: str, code: str) -> SimRow:
        w, z = cell.split(",")
        for r in self.rows:
            if r.code == code and r.factor2 == f"{w} W, {z} Z":
                return r
        raise KeyError((cell, code))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(v) for v in r.values().values()])
        return buf.getvalue()

    def write(self, stem) -> tuple[str, str]:
        """Write ``<stem>.csv`` and the ``<stem>.json`` metadata sidecar."""
        stem = str(stem)
        with open(stem + ".csv", "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())
        with open(stem + ".json", "w", encoding="utf-8", newline="") as fh:
            json.dump(self.metadata, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return stem + ".csv", stem + ".json"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def run_scenarios(scenarios: Sequence[SimScenario], replicates: int | range, seed: int = 0, workers: int = 1,
                  config: dict | None = None) -> SimReport:
    """Run and aggregate a sweep. ``config`` (the caller's resolved settings)
    is embedded in the metadata verbatim."""
    records = run_records(scenarios, replicates, seed, workers)
    return report_from_records(scenarios, records, seed, config)


def report_from_records(scenarios: Sequence[SimScenario], records: Sequence[ReplicateRecord], seed: int = 0,
                        config: dict | None = None) -> SimReport:
    rows = [row for s in scenarios for row in aggregate(s, records)]
    meta = {
        "config": config or {},
        "seed": seed,
        "scenarios": [s.to_dict() for s in scenarios],
        "truth": {s.id: true_incidence(s.config()) for s in scenarios},
        "calibration_constant": {s.id: calibration_constant(s.config()) for s in scenarios},
        "arm_law": ARM_CONVENTION,
        "coverage": "cloglog-scale Wald interval contains cloglog(truth)",
        "excluded": "IPCW replicates with estimates outside (0, 1) are dropped from moment columns; Prop_ex is "
                    "their share among non-failed replicates",
        "seed_derivation": "SeedSequence(seed, spawn_key=(crc32(scenario id), replicate))",
    }
    return SimReport(rows, meta)


def merge_records(*parts: Sequence[ReplicateRecord]) -> list[ReplicateRecord]:
    merged = [r for p in parts for r in p]
    return sorted(merged, key=lambda r: (r.scenario, r.rep, DEFAULT_METHODS.index(r.method)
                                         if r.method in DEFAULT_METHODS else 99))
