"""Phase-type distributions: evaluation, sampling and EM fitting.

A phase-type (PH) law is the absorption time of a continuous-time Markov
chain with ``m`` transient states, started in state ``i`` with probability
``alpha[i]`` and moving according to the sub-generator ``rate_matrix``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm

logger = logging.getLogger(__name__)

__all__ = [
    "PhaseTypeError",
    "PhaseTypeDist",
    "DurationSamples",
    "PhFit",
    "ph_cdf",
    "ph_pdf",
    "ph_mean",
    "ph_moment",
    "ph_sample",
    "empht_fit",
    "read_durations",
    "dump_dist",
    "load_dist",
]


class PhaseTypeError(ValueError):
    """Raised when a PH representation or its input data is invalid."""


@dataclass(frozen=True)
class PhaseTypeDist:
    """PH distribution given by an initial vector and a sub-generator.

    Parameters
    ----------
    alpha : array_like, shape (m,)
        Initial probabilities over the transient phases (must sum to one).
    rate_matrix : array_like, shape (m, m)
        Transition rates among transient phases, in 1/minute.
    """

    alpha: np.ndarray
    rate_matrix: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        rates = np.atleast_2d(np.asarray(self.rate_matrix, dtype=float))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "rate_matrix", rates)
        self.validate()

    @property
    def m(self) -> int:
        return self.alpha.shape[0]

    @property
    def exit_rates(self) -> np.ndarray:
        """Absorption rate out of each phase (``-R 1``)."""
        return -self.rate_matrix.sum(axis=1)

    def validate(self, tol: float = 1e-9) -> None:
        a, R = self.alpha, self.rate_matrix
        m = a.shape[0]
        if a.ndim != 1 or R.shape != (m, m):
            raise PhaseTypeError(
                f"alpha has shape {a.shape} but rate_matrix has shape {R.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(R))):
            raise PhaseTypeError("non-finite entries in PH representation")
        if np.any(a < -tol) or abs(a.sum() - 1.0) > max(tol, 1e-12):
            raise PhaseTypeError(f"alpha must be a probability vector, got {a}")
        if np.any(np.diag(R) >= 0):
            raise PhaseTypeError("rate_matrix diagonal entries must be negative")
        off = R - np.diag(np.diag(R))
        if np.any(off < -tol):
            raise PhaseTypeError("rate_matrix off-diagonal entries must be >= 0")
        if np.any(R.sum(axis=1) > tol):
            raise PhaseTypeError("rate_matrix rows must sum to <= 0")
        # every phase must eventually absorb, i.e. -R is non-singular
        if np.linalg.cond(R) > 1e14:
            raise PhaseTypeError("rate_matrix is singular; some phases never absorb")

    def scaled(self, c: float) -> "PhaseTypeDist":
        """Return the law of ``X / c`` (rates multiplied by ``c``)."""
        return PhaseTypeDist(self.alpha.copy(), self.rate_matrix * c)

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "alpha": self.alpha.tolist(),
            "rate_matrix": self.rate_matrix.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PhaseTypeDist":
        try:
            dist = cls(doc["alpha"], doc["rate_matrix"])
        except KeyError as exc:
            raise PhaseTypeError(f"missing key {exc.args[0]!r} in PH document") from None
        if "m" in doc and int(doc["m"]) != dist.m:
            raise PhaseTypeError(f"m={doc['m']} disagrees with alpha length {dist.m}")
        return dist

    @classmethod
    def exponential(cls, rate: float) -> "PhaseTypeDist":
        return cls([1.0], [[-rate]])

    @classmethod
    def erlang(cls, k: int, rate: float) -> "PhaseTypeDist":
        R = -rate * np.eye(k) + rate * np.eye(k, k=1)
        alpha = np.zeros(k)
        alpha[0] = 1.0
        return cls(alpha, R)


@dataclass(frozen=True)
class DurationSamples:
    """Observed durations of stay, in minutes."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size == 0:
            raise PhaseTypeError("no samples")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise PhaseTypeError("durations must be finite and strictly positive")
        object.__setattr__(self, "values", values)

    @property
    def count(self) -> int:
        return self.values.size

    def mean(self) -> float:
        return float(self.values.mean())

    def std(self) -> float:
        return float(self.values.std(ddof=1)) if self.count > 1 else 0.0


def ph_cdf(dist: PhaseTypeDist, x):
    """CDF ``1 - alpha exp(R x) 1`` of a PH distribution.

    ``x`` may be a scalar or an array; the matrix exponential is evaluated
    by scaling and squaring with a Pade approximant.
    """
    xs = np.asarray(x, dtype=float)
    if np.any(xs < 0):
        raise PhaseTypeError("ph_cdf is defined for x >= 0")
    flat = xs.ravel()
    E = expm(flat[:, None, None] * dist.rate_matrix[None, :, :])
    surv = np.einsum("i,kij,j->k", dist.alpha, E, np.ones(dist.m))
    out = np.clip(1.0 - surv, 0.0, 1.0).reshape(xs.shape)
    return float(out) if out.ndim == 0 else out


def ph_pdf(dist: PhaseTypeDist, x):
    """Density ``alpha exp(R x) t`` with exit vector ``t = -R 1``."""
    xs = np.asarray(x, dtype=float)
    if np.any(xs < 0):
        raise PhaseTypeError("ph_pdf is defined for x >= 0")
    flat = xs.ravel()
    E = expm(flat[:, None, None] * dist.rate_matrix[None, :, :])
    dens = np.einsum("i,kij,j->k", dist.alpha, E, dist.exit_rates)
    out = np.maximum(dens, 0.0).reshape(xs.shape)
    return float(out) if out.ndim == 0 else out


def ph_moment(dist: PhaseTypeDist, k: int = 1) -> float:
    """Raw moment ``E[X^k] = k! alpha (-R)^{-k} 1``."""
    try:
        U = np.linalg.inv(-dist.rate_matrix)
    except np.linalg.LinAlgError as exc:
        raise PhaseTypeError("rate_matrix is singular") from exc
    v = np.ones(dist.m)
    for _ in range(k):
        v = U @ v
    return float(math.factorial(k) * dist.alpha @ v)


def ph_mean(dist: PhaseTypeDist) -> float:
    """Mean ``-alpha R^{-1} 1``."""
    return ph_moment(dist, 1)


def ph_sample(dist: PhaseTypeDist, rng, size=None):
    """Draw absorption times by simulating the underlying Markov chain.

    Parameters
    ----------
    dist : PhaseTypeDist
    rng : int or numpy.random.Generator
        Seed or generator; an int gives a reproducible sequence.
    size : int, optional
        Number of draws. ``None`` returns a single float.
    """
    rng = np.random.default_rng(rng)
    n = 1 if size is None else int(size)
    m = dist.m
    R = dist.rate_matrix
    out_rate = -np.diag(R)
    # jump probabilities: columns 0..m-1 to other phases, column m to absorption
    jump = np.zeros((m, m + 1))
    jump[:, :m] = np.where(np.eye(m, dtype=bool), 0.0, R) / out_rate[:, None]
    jump[:, m] = np.maximum(dist.exit_rates, 0.0) / out_rate
    cum = np.cumsum(jump, axis=1)
    cum[:, -1] = 1.0

    state = rng.choice(m, size=n, p=dist.alpha / dist.alpha.sum())
    total = np.zeros(n)
    alive = np.arange(n)
    while alive.size:
        s = state[alive]
        total[alive] += rng.exponential(1.0 / out_rate[s])
        u = rng.random(alive.size)
        nxt = (u[:, None] > cum[s]).sum(axis=1)
        done = nxt == m
        state[alive[~done]] = nxt[~done]
        alive = alive[~done]
    return float(total[0]) if size is None else total


@dataclass
class PhFit:
    """Result of :func:`empht_fit`."""

    dist: PhaseTypeDist
    loglik: list[float]
    converged: bool
    status: str = "ok"
    messages: list[str] = field(default_factory=list)

    @property
    def n_iter(self) -> int:
        return len(self.loglik)

    def __iter__(self):
        # allows ``dist, trace = empht_fit(...)``
        yield self.dist
        yield self.loglik


def _initial_guess(m: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random feasible PH with unit mean."""
    alpha = rng.uniform(0.1, 1.0, m)
    alpha /= alpha.sum()
    off = rng.uniform(0.0, 1.0, (m, m))
    np.fill_diagonal(off, 0.0)
    exit_ = rng.uniform(0.1, 1.0, m)
    T = off - np.diag(off.sum(axis=1) + exit_)
    mean = float(alpha @ np.linalg.solve(-T, np.ones(m)))
    return alpha, T * mean


def _estep(alpha, T, y):
    m = alpha.size
    t = -T.sum(axis=1)
    block = np.zeros((2 * m, 2 * m))
    block[:m, :m] = T
    block[:m, m:] = np.outer(t, alpha)
    block[m:, m:] = T
    E = expm(y[:, None, None] * block[None])
    eT = E[:, :m, :m]
    J = E[:, :m, m:]
    a = alpha @ eT                                   # (n, m)
    b = eT @ t                                       # (n, m)
    f = b @ alpha                                    # densities, (n,)
    if np.any(f <= 0):
        f = np.maximum(f, np.finfo(float).tiny)
    w = 1.0 / f
    EB = (alpha[None, :] * b * w[:, None]).sum(axis=0)
    EZ = (np.diagonal(J, axis1=1, axis2=2) * w[:, None]).sum(axis=0)
    JT = (J.transpose(0, 2, 1) * w[:, None, None]).sum(axis=0)
    EN = T * JT
    np.fill_diagonal(EN, 0.0)
    EN0 = t * (a * w[:, None]).sum(axis=0)
    ll = float(np.log(f).sum())
    return ll, EB, EZ, EN, EN0


def empht_fit(samples, m: int = 4, max_iters: int = 2000, ll_tol: float = 1e-7,
              seed: int = 20240, init: PhaseTypeDist | None = None) -> PhFit:
    """Maximum-likelihood PH fit by expectation-maximisation.

    Fits a general (unstructured) PH of order ``m``. Iteration stops when the
    log-likelihood grows by less than ``ll_tol`` or after ``max_iters`` steps.
    The E-step integrals are computed exactly through the matrix exponential
    of the block matrix ``[[R, t alpha], [0, R]]``.

    Parameters
    ----------
    samples : DurationSamples or array_like
        Positive durations.
    m : int
        Number of transient phases.
    max_iters : int
        Iteration cap.
    ll_tol : float
        Absolute log-likelihood growth regarded as zero.
    seed : int
        Seed for the randomised starting point.
    init : PhaseTypeDist, optional
        Starting distribution; overrides ``seed``.

    Returns
    -------
    PhFit
        Fitted distribution plus the log-likelihood after every iteration
        (on the original time scale).
    """
    if not isinstance(samples, DurationSamples):
        samples = DurationSamples(samples)
    if m < 1:
        raise PhaseTypeError("m must be >= 1")
    if max_iters < 1:
        raise PhaseTypeError("max_iters must be >= 1")
    if samples.count < m:
        raise PhaseTypeError(f"need at least m={m} samples, got {samples.count}")

    messages = []
    status = "ok"
    if samples.count < 5 * m:
        status = "warning"
        messages.append(f"only {samples.count} samples for {m} phases")
    if np.ptp(samples.values) <= 1e-12 * samples.mean():
        status = "ill_conditioned"
        messages.append("all samples are identical")

    # work on a unit-mean time scale for conditioning
    scale = samples.mean()
    y = samples.values / scale
    n = y.size
    if init is None:
        alpha, T = _initial_guess(m, np.random.default_rng(seed))
    else:
        alpha, T = init.alpha.copy(), init.rate_matrix * scale

    trace = []
    converged = False
    shift = n * math.log(scale)
    for _ in range(max_iters):
        ll, EB, EZ, EN, EN0 = _estep(alpha, T, y)
        trace.append(ll - shift)
        if len(trace) > 1 and trace[-1] - trace[-2] < ll_tol:
            converged = True
            break
        alpha = EB / n
        EZ = np.maximum(EZ, np.finfo(float).tiny)
        T = EN / EZ[:, None]
        t = EN0 / EZ
        np.fill_diagonal(T, -(T.sum(axis=1) + t))
    if not converged:
        # trace holds likelihoods of iterates 0..k-1, (alpha, T) is iterate k
        ll = _estep(alpha, T, y)[0]
        trace.append(ll - shift)
        messages.append(f"max_iters={max_iters} reached")

    alpha = np.clip(alpha, 0.0, None)
    alpha /= alpha.sum()
    off = np.clip(T - np.diag(np.diag(T)), 0.0, None)
    exit_ = np.clip(-T.sum(axis=1), 0.0, None)
    T = off - np.diag(off.sum(axis=1) + exit_)
    dist = PhaseTypeDist(alpha, T / scale)
    for msg in messages:
        logger.warning("empht_fit: %s", msg)
    return PhFit(dist, trace, converged, status, messages)


def read_durations(path) -> DurationSamples:
    """Read one positive duration (minutes) per line; blank lines and ``#``
    comments are skipped."""
    values = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            value = float(line)
        except ValueError:
            raise PhaseTypeError(f"line {lineno}: cannot parse {line!r}") from None
        if not (value > 0 and math.isfinite(value)):
            raise PhaseTypeError(f"line {lineno}: duration must be positive, got {value}")
        values.append(value)
    if not values:
        raise PhaseTypeError("no samples")
    return DurationSamples(values)


def dump_dist(dist: PhaseTypeDist, path, loglik: Sequence[float] | None = None) -> None:
    doc = dist.to_dict()
    if loglik is not None:
        doc["loglik"] = list(loglik)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_dist(path) -> PhaseTypeDist:
    return PhaseTypeDist.from_dict(json.loads(Path(path).read_text()))
