"""Experiment drivers: antenna planning on synthetic stay data and the
Monte-Carlo evaluation of robust BD beamforming."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.optimize import brentq

from .antenna_planner import PlannerConfig, plan
from .mginf_queue import ArrivalProfile, ConcurrencyModel
from .mimo_core import bd_precoders, sample_channel
from .phasefit import DurationSamples, empht_fit
from .robust_bf import RobustBfProblem, solve_p2_batch

__all__ = [
    "HarnessError",
    "Table2Attributes",
    "TABLE2",
    "synth_dataset",
    "DatasetPlan",
    "run_planning_experiment",
    "ScenarioConfig",
    "ExperimentResult",
    "CellSummary",
    "PairedComparison",
    "run_trial",
    "run_bdbf_experiment",
    "compare_systems",
    "write_results_csv",
    "write_trials_csv",
    "read_trials_csv",
]

log = logging.getLogger(__name__)

N_SLOTS = 48
SLOT_MIN = 10.0
CSV_COLUMNS = ["system", "eps_sq", "zeta_watts", "mean_capacity_bps", "se_capacity",
               "mean_interference_w", "se_interference", "n_ok", "n_failed"]


class HarnessError(ValueError):
    pass


# ---------------------------------------------------------------------------
# planning

@dataclass(frozen=True)
class Table2Attributes:
    name: str
    n_sojourners: int
    mean_stay: float
    sd_stay: float
    rates: tuple
    slot_length: float = SLOT_MIN

    def profile(self) -> ArrivalProfile:
        return ArrivalProfile(self.slot_length, self.rates)


def _uniform(total: float) -> tuple:
    return (total / N_SLOTS,) * N_SLOTS


def _peaked(peak: float, rest_total: float, peak_slots=range(6, 12)) -> tuple:
    peak_slots = set(peak_slots)
    rest = rest_total / (N_SLOTS - len(peak_slots))
    return tuple(peak if k in peak_slots else rest for k in range(N_SLOTS))


# Slots 6-11 are 10-11 am for a day that opens at 9 am.
TABLE2 = {
    1: Table2Attributes("set1", 60, 60.0, 3.7947, _uniform(60)),
    2: Table2Attributes("set2", 60, 60.0, 148.0447, _uniform(60)),
    3: Table2Attributes("set3", 60, 90.0, 3.7947, _uniform(60)),
    4: Table2Attributes("set4", 60, 90.0, 148.0447, _uniform(60)),
    5: Table2Attributes("set5", 60, 60.0, 3.7947, _peaked(5.0, 30.0)),
    6: Table2Attributes("set6", 60, 60.0, 148.0447, _peaked(5.0, 30.0)),
    7: Table2Attributes("set7", 90, 60.0, 2.7809, _uniform(90)),
    8: Table2Attributes("set8", 90, 60.0, 134.5144, _uniform(90)),
}


def synth_dataset(attrs: Table2Attributes, rng=None):
    """Durations whose sample mean and sd equal the targets, plus the profile.

    Draws standard normals ``z`` and returns ``c * exp(s z)`` with ``s`` and
    ``c`` solved so the sample moments match exactly (a lognormal shape).
    """
    if attrs.sd_stay <= 0 or attrs.mean_stay <= 0:
        raise HarnessError("mean and sd of stay must be positive")
    if attrs.n_sojourners < 2:
        raise HarnessError("need at least two sojourners")
    rng = np.random.default_rng(rng)
    z = rng.standard_normal(attrs.n_sojourners)
    z = (z - z.mean()) / z.std(ddof=1)
    target_cv = attrs.sd_stay / attrs.mean_stay

    def cv(s):
        y = np.exp(s * z - (s * z).max())
        return y.std(ddof=1) / y.mean()

    s = brentq(lambda s: cv(s) - target_cv, 1e-9, 20.0, xtol=1e-14)
    y = np.exp(s * z - (s * z).max())
    y *= attrs.mean_stay / y.mean()
    return DurationSamples(y), attrs.profile()


@dataclass
class DatasetPlan:
    name: str
    curve: np.ndarray
    n_eta: int | None = None
    p_eta: float | None = None
    n_gamma: int | None = None
    p_gamma: float | None = None
    fit_status: str = ""
    loglik: float = float("nan")
    error: str | None = None

    def p_at(self, n: int) -> float:
        return float(self.curve[n - 1])


def run_planning_experiment(datasets, qos: float = 1.0, eta: float = 0.99,
                            gamma: float = 0.001, m: int = 4, n_max: int = 40,
                            strict: bool = True, seed: int = 7,
                            max_iters: int = 5000) -> list[DatasetPlan]:
    """Fit, analyze and plan every dataset.

    ``datasets`` holds ``(name, DurationSamples, ArrivalProfile)`` triples or
    ``Table2Attributes`` (synthesized with ``seed``). Counts ``N_U`` here are
    supportable sojourners (``N_R = 1``, no inhabitants). A failing dataset
    is reported with ``error`` set; the rest still run.
    """
    out = []
    cfg = PlannerConfig(n_r=1, qos=qos, eta=eta, gamma=gamma, strict=strict)
    for k, ds in enumerate(datasets):
        try:
            if isinstance(ds, Table2Attributes):
                name = ds.name
                samples, profile = synth_dataset(ds, np.random.SeedSequence(seed, spawn_key=(k,)))
            else:
                name, samples, profile = ds
            fit = empht_fit(samples, m=m, max_iters=max_iters)
            model = ConcurrencyModel(profile, fit.dist)
            rep = plan(model, cfg, selector="gamma", n_curve=n_max)
            curve = np.asarray(rep.curve)
            full = rep.curve if len(rep.curve) else curve
            row = DatasetPlan(name, curve, fit_status=fit.status, loglik=fit.loglik[-1])
            if rep.n_u_eta is not None:
                row.n_eta = rep.n_u_eta
                row.p_eta = float(_curve_value(model, cfg, rep.n_u_eta, full))
            if rep.n_u_gamma is not None:
                row.n_gamma = rep.n_u_gamma
                row.p_gamma = float(_curve_value(model, cfg, rep.n_u_gamma, full))
            if rep.errors:
                row.error = "; ".join(rep.errors)
        except Exception as exc:  # keep the batch going
            log.warning("dataset %s failed: %s", getattr(ds, "name", k), exc)
            row = DatasetPlan(getattr(ds, "name", str(k)), np.array([]), error=str(exc))
        out.append(row)
    return out


def _curve_value(model, cfg, n, curve):
    if n <= len(curve):
        return curve[n - 1]
    from .mginf_queue import mean_adequacy
    return mean_adequacy(model, n, cfg.qos, strict=cfg.strict)


# ---------------------------------------------------------------------------
# beamforming Monte-Carlo

@dataclass(frozen=True)
class ScenarioConfig:
    n_sojourners: int = 2
    n_inhabitants: int = 2
    n_r: int = 2
    snr_db: float = 20.0
    p_sap_watts: float = 10.0
    n_subcarriers: int = 4
    eps_sq_list: tuple = (0.0, 0.1, 1.0, 5.0, 10.0)
    zeta_list: tuple = tuple(0.25 * k for k in range(1, 13))
    n_trials: int = 200
    master_seed: int = 2024
    bf_csi: str = "perfect"
    capacity_units: str = "nats"
    solver_tol: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "eps_sq_list", tuple(float(e) for e in self.eps_sq_list))
        object.__setattr__(self, "zeta_list", tuple(float(z) for z in self.zeta_list))
        for name in ("n_sojourners", "n_inhabitants", "n_r", "n_subcarriers", "n_trials"):
            if int(getattr(self, name)) < 1:
                raise HarnessError(f"{name} must be >= 1")
        if not self.eps_sq_list or not self.zeta_list:
            raise HarnessError("eps_sq_list and zeta_list must be non-empty")
        if any(e < 0 for e in self.eps_sq_list):
            raise HarnessError("eps_sq values must be >= 0")
        if any(z <= 0 for z in self.zeta_list):
            raise HarnessError("zeta values must be positive")
        if self.p_sap_watts <= 0:
            raise HarnessError("p_sap_watts must be positive")
        if self.bf_csi not in ("perfect", "estimated"):
            raise HarnessError("bf_csi must be 'perfect' or 'estimated'")
        if self.capacity_units not in ("nats", "bits"):
            raise HarnessError("capacity_units must be 'nats' or 'bits'")

    @property
    def n_t(self) -> int:
        return self.n_r * (self.n_sojourners + self.n_inhabitants)

    @property
    def snr(self) -> float:
        return 10.0 ** (self.snr_db / 10.0)

    @property
    def log_base(self) -> float:
        return math.e if self.capacity_units == "nats" else 2.0

    def cells(self):
        return [(s, e, z) for s in ("a", "b") for e in self.eps_sq_list for z in self.zeta_list]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps_sq_list"] = list(self.eps_sq_list)
        d["zeta_list"] = list(self.zeta_list)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise HarnessError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


def _trial_rng(cfg: ScenarioConfig, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.master_seed, spawn_key=(trial,)))


def run_trial(cfg: ScenarioConfig, trial: int) -> dict:
    """One channel realization; returns ``{cell: (capacity, interference, ok)}``."""
    rng = _trial_rng(cfg, trial)
    n_c, n_u, n_i, n_r, n_t = (cfg.n_subcarriers, cfg.n_sojourners, cfg.n_inhabitants,
                               cfg.n_r, cfg.n_t)
    h_soj = sample_channel(n_r, n_t, rng, size=(n_c, n_u))
    h_inh = sample_channel(n_r, n_t, rng, size=(n_c, n_i))
    z = sample_channel(n_r, n_t, rng, size=(n_c, n_i))   # unit-variance error shape

    w_b, sig_b = bd_precoders(h_soj)
    problems, owners = [], []

    def add(system, eps, w, sig, est):
        if cfg.bf_csi == "perfect":
            victims, eps_bf = h_inh, 0.0
        else:
            victims, eps_bf = est, eps
        for zeta in cfg.zeta_list:
            problems.append(RobustBfProblem(sig, w, victims, eps_bf, zeta, cfg.p_sap_watts,
                                            cfg.snr, n_t, cfg.log_base))
            owners.append((system, eps, zeta, w))

    b_shared = cfg.bf_csi == "perfect"
    for eps in cfg.eps_sq_list:
        est = h_inh - math.sqrt(eps) * z
        w_a, sig_a = bd_precoders(h_soj, est.reshape(n_c, n_i * n_r, n_t))
        add("a", eps, w_a, sig_a, est)
        if not b_shared or eps == cfg.eps_sq_list[0]:
            add("b", eps, w_b, sig_b, est)

    sols = solve_p2_batch(problems, tol=cfg.solver_tol)
    out = {}
    for (system, eps, zeta, w), sol in zip(owners, sols):
        ok = sol.status == "optimal"
        qb = np.einsum("suti,suij,suvj->sutv", w, sol.Q, w.conj())
        intf = np.einsum("sjrt,sutv,sjrv->sju", h_inh, qb, h_inh.conj()).real
        out[(system, eps, zeta)] = (sol.objective, float(np.mean(intf)), ok)
    if b_shared:
        for eps in cfg.eps_sq_list[1:]:
            for zeta in cfg.zeta_list:
                out[("b", eps, zeta)] = out[("b", cfg.eps_sq_list[0], zeta)]
    return out


@dataclass
class CellSummary:
    system: str
    eps_sq: float
    zeta: float
    mean_capacity: float
    se_capacity: float
    mean_interference: float
    se_interference: float
    n_ok: int
    n_failed: int


def _mean_se(x: np.ndarray):
    x = x[np.isfinite(x)]
    if x.size == 0:
        return float("nan"), float("nan")
    mean = math.fsum(x) / x.size
    if x.size < 2:
        return mean, 0.0
    var = math.fsum((x - mean) ** 2) / (x.size - 1)
    return mean, math.sqrt(var / x.size)


@dataclass
class ExperimentResult:
    cfg: ScenarioConfig
    capacity: dict            # cell -> per-trial array, NaN where the solve failed
    interference: dict
    status: str = "ok"
    failure_rate: float = 0.0
    warnings: list = field(default_factory=list)

    def summary(self) -> list[CellSummary]:
        rows = []
        for cell in self.cfg.cells():
            cap, intf = self.capacity[cell], self.interference[cell]
            mc, sc = _mean_se(cap)
            mi, si = _mean_se(intf)
            n_ok = int(np.isfinite(cap).sum())
            rows.append(CellSummary(*cell, mc, sc, mi, si, n_ok, cap.size - n_ok))
        return rows

    def cell(self, system: str, eps_sq: float, zeta: float) -> CellSummary:
        for row in self.summary():
            if (row.system, row.eps_sq, row.zeta) == (system, eps_sq, zeta):
                return row
        raise KeyError((system, eps_sq, zeta))


def run_bdbf_experiment(cfg: ScenarioConfig, jobs: int = 1, progress=None) -> ExperimentResult:
    """Run ``cfg.n_trials`` independent realizations and collect every cell.

    Trial ``k`` draws from ``SeedSequence(master_seed, spawn_key=(k,))`` so
    results do not depend on ``jobs`` or scheduling.
    """
    trials = range(cfg.n_trials)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_trial = list(pool.map(run_trial, [cfg] * cfg.n_trials, trials, chunksize=4))
    else:
        per_trial = []
        for k in trials:
            per_trial.append(run_trial(cfg, k))
            if progress:
                progress(k + 1, cfg.n_trials)

    cap, intf = {}, {}
    failed = 0
    for cell in cfg.cells():
        c = np.array([r[cell][0] for r in per_trial])
        i = np.array([r[cell][1] for r in per_trial])
        ok = np.array([r[cell][2] for r in per_trial])
        failed += int((~ok).sum())
        cap[cell] = np.where(ok, c, np.nan)
        intf[cell] = np.where(ok, i, np.nan)
    rate = failed / (len(cfg.cells()) * cfg.n_trials)
    res = ExperimentResult(cfg, cap, intf, failure_rate=rate)
    if rate > 0.05:
        res.status = "warning"
        msg = f"{rate:.1%} of solves failed"
        res.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return res


@dataclass
class PairedComparison:
    zeta: float
    eps_a: float
    eps_b: float
    mean_diff: float
    se_diff: float
    n_pairs: int

    @property
    def significant(self) -> bool:
        """Mean of a exceeds mean of b by more than two standard errors."""
        return self.mean_diff > 2 * self.se_diff

    @property
    def holds(self) -> bool:
        return self.mean_diff > 0


def compare_systems(result: ExperimentResult, eps_a: float | None = None,
                    eps_b: float | None = None,
                    other: ExperimentResult | None = None) -> list[PairedComparison]:
    """Paired capacity differences ``a - b`` per threshold.

    Without ``eps_a``/``eps_b`` both systems are compared at every shared
    ``eps_sq``. ``other`` supplies system b from a second result, which must
    cover the same trials.
    """
    b_res = other or result
    if b_res.cfg.n_trials != result.cfg.n_trials or b_res.cfg.master_seed != result.cfg.master_seed:
        raise HarnessError("results are not paired: trial counts or seeds differ")
    if eps_a is None and eps_b is None:
        pairs = [(e, e) for e in result.cfg.eps_sq_list if e in b_res.cfg.eps_sq_list]
    else:
        pairs = [(eps_a if eps_a is not None else eps_b, eps_b if eps_b is not None else eps_a)]
    out = []
    for ea, eb in pairs:
        for zeta in result.cfg.zeta_list:
            try:
                a = result.capacity[("a", ea, zeta)]
                b = b_res.capacity[("b", eb, zeta)]
            except KeyError as exc:
                raise HarnessError(f"missing cell {exc}") from None
            if a.shape != b.shape:
                raise HarnessError("unpaired trials")
            d = a - b
            mean, se = _mean_se(d)
            out.append(PairedComparison(zeta, ea, eb, mean, se, int(np.isfinite(d).sum())))
    return out


def write_results_csv(result: ExperimentResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in result.summary():
            w.writerow([r.system, repr(r.eps_sq), repr(r.zeta), repr(r.mean_capacity),
                        repr(r.se_capacity), repr(r.mean_interference),
                        repr(r.se_interference), r.n_ok, r.n_failed])


def write_trials_csv(result: ExperimentResult, path) -> None:
    """Per-trial values, enough to rebuild the result for paired comparisons."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "eps_sq", "zeta_watts", "trial", "capacity", "interference"])
        for cell in result.cfg.cells():
            for k, (c, i) in enumerate(zip(result.capacity[cell], result.interference[cell])):
                w.writerow([cell[0], repr(cell[1]), repr(cell[2]), k, repr(float(c)), repr(float(i))])


def read_trials_csv(cfg: ScenarioConfig, path) -> ExperimentResult:
    cap = {cell: np.full(cfg.n_trials, np.nan) for cell in cfg.cells()}
    intf = {cell: np.full(cfg.n_trials, np.nan) for cell in cfg.cells()}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cell = (row["system"], float(row["eps_sq"]), float(row["zeta_watts"]))
            if cell not in cap:
                raise HarnessError(f"trial file has cell {cell} not in the scenario")
            k = int(row["trial"])
            if not 0 <= k < cfg.n_trials:
                raise HarnessError(f"trial index {k} out of range")
            cap[cell][k] = float(row["capacity"])
            intf[cell][k] = float(row["interference"])
    n_cells = len(cap) * cfg.n_trials
    failed = sum(int(np.isnan(v).sum()) for v in cap.values())
    res = ExperimentResult(cfg, cap, intf, failure_rate=failed / n_cells)
    if res.failure_rate > 0.05:
        res.status = "warning"
    return res
