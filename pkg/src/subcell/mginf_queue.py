"""Nonstationary M_t/G/inf analysis with phase-type service.

The number of customers in an infinite-server queue fed by a Poisson process
of rate ``lambda(t)`` (empty at ``t = 0``) is Poisson distributed with mean

    v(t) = integral_0^t lambda(tau) (1 - F_X(t - tau)) dtau .

Arrival rates are piecewise constant over equal time slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import expm
from scipy.special import gammaln

from .phasefit import PhaseTypeDist, ph_cdf, ph_mean

__all__ = [
    "QueueDomainError",
    "ArrivalProfile",
    "ConcurrencyModel",
    "offered_load",
    "offered_load_grid",
    "concurrency_pmf",
    "concurrency_cdf",
    "capacity_count",
    "adequacy_probability",
    "mean_adequacy",
    "adequacy_curve",
]


class QueueDomainError(ValueError):
    pass


@dataclass(frozen=True)
class ArrivalProfile:
    """Piecewise-constant arrival rate.

    ``rates[k]`` is the expected number of arrivals during slot ``k``, which
    covers ``[k * slot_length, (k + 1) * slot_length)`` minutes.
    """

    slot_length: float
    rates: tuple

    def __post_init__(self):
        rates = tuple(float(r) for r in np.atleast_1d(self.rates))
        if self.slot_length <= 0:
            raise QueueDomainError("slot_length must be positive")
        if not rates:
            raise QueueDomainError("at least one slot is required")
        if any(r < 0 or not math.isfinite(r) for r in rates):
            raise QueueDomainError("arrival rates must be finite and >= 0")
        object.__setattr__(self, "rates", rates)

    @property
    def n_slots(self) -> int:
        return len(self.rates)

    @property
    def horizon(self) -> float:
        return self.slot_length * self.n_slots

    @property
    def per_minute(self) -> np.ndarray:
        return np.asarray(self.rates) / self.slot_length

    @classmethod
    def constant(cls, rate_per_slot: float, n_slots: int, slot_length: float):
        return cls(slot_length, (rate_per_slot,) * n_slots)

    def to_dict(self) -> dict:
        return {
            "slot_length_min": self.slot_length,
            "rates": list(self.rates),
            "horizon_min": self.horizon,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ArrivalProfile":
        profile = cls(float(doc["slot_length_min"]), tuple(doc["rates"]))
        if "horizon_min" in doc and not math.isclose(
                float(doc["horizon_min"]), profile.horizon, rel_tol=1e-12):
            raise QueueDomainError(
                f"horizon_min={doc['horizon_min']} does not equal "
                f"slot_length_min * len(rates) = {profile.horizon}")
        return profile


@dataclass(frozen=True)
class ConcurrencyModel:
    profile: ArrivalProfile
    service: PhaseTypeDist

    @cached_property
    def _aug(self) -> np.ndarray:
        # expm(s * [[R, 1], [0, 0]]) carries int_0^s exp(R u) du 1 in its last column
        m = self.service.m
        A = np.zeros((m + 1, m + 1))
        A[:m, :m] = self.service.rate_matrix
        A[:m, m] = 1.0
        return A

    def survival_integral(self, s) -> np.ndarray:
        """``G(s) = int_0^s (1 - F_X(u)) du`` for an array of ``s >= 0``."""
        s = np.asarray(s, dtype=float)
        flat = s.ravel()
        m = self.service.m
        E = expm(flat[:, None, None] * self._aug[None])
        return (E[:, :m, m] @ self.service.alpha).reshape(s.shape)


def _check_time(model: ConcurrencyModel, t: float) -> None:
    if t < 0 or t > model.profile.horizon * (1 + 1e-12):
        raise QueueDomainError(
            f"t={t} outside [0, {model.profile.horizon}]")


def offered_load_grid(model: ConcurrencyModel, ts) -> np.ndarray:
    """Offered load ``v(t)`` at many times, in closed form.

    Within a slot the rate is constant, so each slot contributes
    ``lambda_k (G(t - a_k) - G(t - min(b_k, t)))`` with ``G`` the integrated
    survival function. Distinct offsets are evaluated once.
    """
    ts = np.asarray(ts, dtype=float)
    flat = ts.ravel()
    prof = model.profile
    starts = prof.slot_length * np.arange(prof.n_slots)
    ends = starts + prof.slot_length
    lam = prof.per_minute
    upper = flat[:, None] - starts[None, :]
    lower = flat[:, None] - np.minimum(ends[None, :], flat[:, None])
    active = upper > 0
    offsets = np.concatenate([upper[active], lower[active]])
    keys = np.round(offsets, 9)
    uniq, inv = np.unique(keys, return_inverse=True)
    G = model.survival_integral(uniq)[inv]
    n_act = int(active.sum())
    contrib = np.zeros_like(upper)
    contrib[active] = G[:n_act] - G[n_act:]
    v = (contrib * lam[None, :]).sum(axis=1)
    return np.maximum(v, 0.0).reshape(ts.shape)


def _adaptive_simpson(f, a, b, tol, fa, fm, fb, whole, depth):
    m = 0.5 * (a + b)
    lm, rm = 0.5 * (a + m), 0.5 * (m + b)
    flm, frm = f(lm), f(rm)
    left = (m - a) / 6 * (fa + 4 * flm + fm)
    right = (b - m) / 6 * (fm + 4 * frm + fb)
    if depth <= 0 or abs(left + right - whole) <= 15 * tol:
        return left + right + (left + right - whole) / 15
    return (_adaptive_simpson(f, a, m, tol / 2, fa, flm, fm, left, depth - 1)
            + _adaptive_simpson(f, m, b, tol / 2, fm, frm, fb, right, depth - 1))


def offered_load(model: ConcurrencyModel, t: float, quad_tol: float = 1e-8,
                 method: str = "exact") -> float:
    """Offered load ``v(t)``.

    ``method="exact"`` integrates each slot in closed form through the matrix
    exponential; ``method="quadrature"`` runs adaptive Simpson on every slot
    (slot boundaries are panel boundaries) to absolute error ``quad_tol``.
    """
    _check_time(model, t)
    if t == 0:
        return 0.0
    if method == "exact":
        return float(offered_load_grid(model, [t])[0])
    if method != "quadrature":
        raise ValueError(f"unknown method {method!r}")

    prof = model.profile
    dist = model.service

    def integrand(tau):
        return 1.0 - ph_cdf(dist, t - tau)

    total = 0.0
    n_active = sum(1 for k in range(prof.n_slots) if k * prof.slot_length < t)
    for k in range(prof.n_slots):
        a = k * prof.slot_length
        if a >= t:
            break
        b = min(a + prof.slot_length, t)
        lam = prof.rates[k] / prof.slot_length
        if lam == 0:
            continue
        fa, fm, fb = integrand(a), integrand(0.5 * (a + b)), integrand(b)
        whole = (b - a) / 6 * (fa + 4 * fm + fb)
        tol = quad_tol / (lam * n_active)
        total += lam * _adaptive_simpson(integrand, a, b, tol, fa, fm, fb, whole, 40)
    return max(total, 0.0)


def _check_pmf_args(v, n):
    if v < 0 or not math.isfinite(v):
        raise QueueDomainError(f"Poisson mean must be finite and >= 0, got {v}")
    if n < 0:
        raise QueueDomainError(f"count must be >= 0, got {n}")


def concurrency_pmf(v: float, n: int) -> float:
    """Poisson probability ``v**n exp(-v) / n!``."""
    _check_pmf_args(v, n)
    n = int(n)
    if v == 0:
        return 1.0 if n == 0 else 0.0
    if v > 50 or n > 50:
        return math.exp(n * math.log(v) - v - math.lgamma(n + 1))
    return v ** n * math.exp(-v) / math.factorial(n)


def concurrency_cdf(v: float, n_max: int) -> float:
    """Poisson CDF ``sum_{n <= n_max} pmf(v, n)``."""
    _check_pmf_args(v, n_max)
    n_max = int(n_max)
    if v == 0:
        return 1.0
    # accumulate terms in log space, ratio recursion p_n = p_{n-1} v / n
    log_p = -v
    logs = [log_p]
    for n in range(1, n_max + 1):
        log_p += math.log(v) - math.log(n)
        logs.append(log_p)
    top = max(logs)
    total = math.fsum(math.exp(x - top) for x in logs)
    return min(1.0, math.exp(top) * total)


def _poisson_cdf_table(v: np.ndarray, n_max: int) -> np.ndarray:
    """Poisson CDFs for counts ``0..n_max`` at every mean in ``v``.

    Returns an array of shape ``v.shape + (n_max + 1,)``.
    """
    v = np.asarray(v, dtype=float)
    n = np.arange(n_max + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logv = np.where(v > 0, np.log(np.where(v > 0, v, 1.0)), -np.inf)
        logp = n * logv[..., None] - v[..., None] - gammaln(n + 1)
    logp = np.where((v[..., None] == 0) & (n == 0), 0.0, logp)
    cdf = np.cumsum(np.exp(logp), axis=-1)
    return np.clip(cdf, 0.0, 1.0)


def capacity_count(n_supportable: int, qos: float, strict: bool = False) -> int:
    """Largest concurrency count that ``n_supportable`` users can serve.

    With ``strict=False`` the count is ``floor(N_U / Q)``; with
    ``strict=True`` adequacy means ``N_2(t) < N_U / Q``, i.e. the largest
    integer strictly below ``N_U / Q``.
    """
    if not (0 < qos <= 1):
        raise QueueDomainError(f"QoS fraction must be in (0, 1], got {qos}")
    if n_supportable < 0:
        raise QueueDomainError("n_supportable must be >= 0")
    ratio = n_supportable / qos
    nearest = round(ratio)
    if abs(ratio - nearest) <= 1e-9 * max(1.0, ratio):
        ratio = nearest
        return int(ratio) - 1 if strict else int(ratio)
    return math.ceil(ratio) - 1 if strict else math.floor(ratio)


def adequacy_probability(model: ConcurrencyModel, n_supportable: int, qos: float,
                         t: float, strict: bool = False) -> float:
    """Probability that the concurrent sojourners fit the supportable count at
    time ``t``: ``F_{N2(t)}(floor(N_U / Q))``."""
    if n_supportable < 1:
        raise QueueDomainError("n_supportable must be >= 1")
    k = capacity_count(n_supportable, qos, strict)
    v = offered_load(model, t)
    if k < 0:
        return 0.0
    return concurrency_cdf(v, k)


def _slot_nodes(profile: ArrivalProfile, nodes_per_slot: int):
    x, w = np.polynomial.legendre.leggauss(nodes_per_slot)
    h = profile.slot_length
    starts = h * np.arange(profile.n_slots)
    ts = starts[:, None] + 0.5 * h * (x[None, :] + 1.0)
    ws = np.broadcast_to(0.5 * h * w, ts.shape)
    return ts.ravel(), ws.ravel()


def adequacy_curve(model: ConcurrencyModel, n_values, qos: float = 1.0,
                   strict: bool = False, nodes_per_slot: int = 16) -> np.ndarray:
    """Time-averaged adequacy ``E[P(N_U, t)]`` for every ``N_U`` in ``n_values``.

    The average over ``[0, T]`` uses composite Gauss-Legendre quadrature with
    ``nodes_per_slot`` nodes in each arrival slot.
    """
    n_values = np.atleast_1d(np.asarray(n_values, dtype=int))
    if np.any(n_values < 1):
        raise QueueDomainError("n_supportable must be >= 1")
    counts = np.array([capacity_count(int(n), qos, strict) for n in n_values])
    ts, ws = _slot_nodes(model.profile, nodes_per_slot)
    v = offered_load_grid(model, ts)
    kmax = max(int(counts.max()), 0)
    table = _poisson_cdf_table(v, kmax)              # (nodes, kmax+1)
    avg = ws @ table / model.profile.horizon         # (kmax+1,)
    out = np.where(counts >= 0, avg[np.maximum(counts, 0)], 0.0)
    return np.clip(out, 0.0, 1.0)


def mean_adequacy(model: ConcurrencyModel, n_supportable: int, qos: float = 1.0,
                  quad_tol: float = 1e-8, strict: bool = False) -> float:
    """``(1/T) int_0^T P(N_U, t) dt``.

    ``quad_tol`` is accepted for interface symmetry; 16 Gauss-Legendre nodes
    per slot integrate the smooth in-slot integrand far below it.
    """
    return float(adequacy_curve(model, [n_supportable], qos, strict)[0])


def stationary_load(model: ConcurrencyModel, rate_per_minute: float) -> float:
    """``lambda * E[X]``, the limit of ``v(t)`` under a constant rate."""
    return rate_per_minute * ph_mean(model.service)
