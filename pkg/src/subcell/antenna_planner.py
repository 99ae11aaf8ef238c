"""Transmit-antenna sizing for the sojourner and inhabitant access points.

With block diagonalization and full-rank transmission an AP with ``N_ST``
antennas serving ``N_R``-antenna users supports ``N_ST / N_R`` users. Of
those, ``N1'`` are inhabitants the sojourner AP must null toward, leaving
``N_U = N_ST / N_R - N1'`` sojourners.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mginf_queue import ConcurrencyModel, adequacy_curve

__all__ = [
    "PlannerError",
    "UnsatisfiablePlan",
    "PlannerConfig",
    "PlanReport",
    "supportable_sojourners",
    "select_sap_antennas_eta",
    "select_sap_antennas_gamma",
    "iap_antennas",
    "disk_overlap_area",
    "plan",
]

DEFAULT_CAP = 500


class PlannerError(ValueError):
    pass


class UnsatisfiablePlan(PlannerError):
    """No antenna count up to the search cap meets the criterion."""

    def __init__(self, cap: int, criterion: str):
        super().__init__(f"{criterion} not met for any N_U <= {cap} (search cap)")
        self.cap = cap
        self.criterion = criterion


@dataclass(frozen=True)
class PlannerConfig:
    n_r: int = 2
    n1: int = 0
    n1_prime: int = 0
    qos: float = 1.0
    qos_inhabitant: float = 1.0
    eta: float = 0.99
    gamma: float = 0.001
    overlap_ratio: float = 0.0
    strict: bool = False
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if self.n_r < 1:
            raise PlannerError("n_r must be >= 1")
        if self.n1 < 0 or self.n1_prime < 0:
            raise PlannerError("inhabitant counts must be >= 0")
        if not (0 < self.qos <= 1):
            raise PlannerError("qos must be in (0, 1]")
        if self.qos_inhabitant <= 0:
            raise PlannerError("qos_inhabitant must be positive")
        if not (0 < self.eta < 1):
            raise PlannerError("eta must be in (0, 1)")
        if self.gamma <= 0:
            raise PlannerError("gamma must be positive")
        if not (0 <= self.overlap_ratio <= 1):
            raise PlannerError("overlap_ratio must be in [0, 1]")
        if self.cap < 1:
            raise PlannerError("cap must be >= 1")

    @property
    def first_n_st(self) -> int:
        """Smallest legal antenna count, giving ``N_U = 1``."""
        return self.n_r * (self.n1_prime + 1)

    def n_st_for(self, n_u: int) -> int:
        return self.n_r * (n_u + self.n1_prime)


def supportable_sojourners(n_st: int, cfg: PlannerConfig) -> int:
    """``N_U = N_ST / N_R - N1'``; raises unless this is a positive integer."""
    if n_st % cfg.n_r:
        raise PlannerError(f"N_ST={n_st} is not a multiple of N_R={cfg.n_r}")
    n_u = n_st // cfg.n_r - cfg.n1_prime
    if n_u < 1:
        raise PlannerError(
            f"N_ST={n_st} leaves no room for sojourners (needs > {cfg.n_r * cfg.n1_prime})")
    return n_u


def _curve(model: ConcurrencyModel, cfg: PlannerConfig, n_max: int) -> np.ndarray:
    return adequacy_curve(model, np.arange(1, n_max + 1), cfg.qos, cfg.strict)


def select_sap_antennas_eta(model: ConcurrencyModel, cfg: PlannerConfig,
                            curve: np.ndarray | None = None) -> int:
    """Fewest SAP antennas whose mean adequacy reaches ``eta``.

    The search walks ``N_ST = N_R (N1' + 1), N_R (N1' + 2), ...``; the mean
    adequacy is non-decreasing in ``N_U`` so the first hit is the minimum.
    """
    if curve is None:
        curve = _curve(model, cfg, cfg.cap)
    hits = np.flatnonzero(curve[:cfg.cap] >= cfg.eta)
    if hits.size == 0:
        raise UnsatisfiablePlan(cfg.cap, f"E[P] >= eta={cfg.eta}")
    return cfg.n_st_for(int(hits[0]) + 1)


def select_sap_antennas_gamma(model: ConcurrencyModel, cfg: PlannerConfig,
                              curve: np.ndarray | None = None) -> int:
    """Fewest SAP antennas after which one more supportable sojourner raises
    the mean adequacy by at most ``gamma``."""
    if curve is None:
        curve = _curve(model, cfg, cfg.cap + 1)
    growth = np.diff(curve[:cfg.cap + 1])
    hits = np.flatnonzero(growth <= cfg.gamma)
    if hits.size == 0:
        raise UnsatisfiablePlan(cfg.cap, f"growth <= gamma={cfg.gamma}")
    return cfg.n_st_for(int(hits[0]) + 1)


def iap_antennas(cfg: PlannerConfig, n_u_star: int) -> int:
    """Inhabitant-AP antennas ``ceil(N_R Q' (N1 + N_U* S_overlap / S_A2))``."""
    if n_u_star < 1:
        raise PlannerError("N_U* must be >= 1")
    raw = cfg.n_r * cfg.qos_inhabitant * (cfg.n1 + n_u_star * cfg.overlap_ratio)
    # absorb float noise such as 24.000000000000004
    return int(math.ceil(raw - 1e-9 * max(1.0, raw)))


def disk_overlap_area(r1: float, r2: float, d: float) -> float:
    """Area of the intersection of two disks with radii ``r1``, ``r2`` whose
    centres are ``d`` apart."""
    if r1 <= 0 or r2 <= 0:
        raise PlannerError("radii must be positive")
    if d < 0:
        raise PlannerError("centre distance must be >= 0")
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    c1 = np.clip((d * d + r1 * r1 - r2 * r2) / (2 * d * r1), -1.0, 1.0)
    c2 = np.clip((d * d + r2 * r2 - r1 * r1) / (2 * d * r2), -1.0, 1.0)
    k = (-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)
    return float(r1 * r1 * math.acos(c1) + r2 * r2 * math.acos(c2)
                 - 0.5 * math.sqrt(max(k, 0.0)))


@dataclass
class PlanReport:
    n_st_eta: int | None
    n_st_gamma: int | None
    n_u_eta: int | None
    n_u_gamma: int | None
    n_it: int | None
    curve: np.ndarray
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_st_eta": self.n_st_eta,
            "n_u_eta": self.n_u_eta,
            "n_st_gamma": self.n_st_gamma,
            "n_u_gamma": self.n_u_gamma,
            "n_it": self.n_it,
            "errors": list(self.errors),
        }


def plan(model: ConcurrencyModel, cfg: PlannerConfig, selector: str = "eta",
         n_curve: int | None = None) -> PlanReport:
    """Run both selection rules and size the inhabitant AP.

    ``selector`` names the rule whose ``N_U*`` feeds the IAP formula.
    """
    if selector not in ("eta", "gamma"):
        raise ValueError("selector must be 'eta' or 'gamma'")
    curve = _curve(model, cfg, cfg.cap + 1)
    errors = []
    picks = {}
    for name, fn in (("eta", select_sap_antennas_eta),
                     ("gamma", select_sap_antennas_gamma)):
        try:
            picks[name] = fn(model, cfg, curve)
        except UnsatisfiablePlan as exc:
            errors.append(str(exc))
            picks[name] = None
    n_u = {k: (None if v is None else supportable_sojourners(v, cfg))
           for k, v in picks.items()}
    n_it = None if n_u[selector] is None else iap_antennas(cfg, n_u[selector])
    shown = curve[:n_curve] if n_curve else curve[:cfg.cap]
    return PlanReport(picks["eta"], picks["gamma"], n_u["eta"], n_u["gamma"],
                      n_it, shown, errors)
