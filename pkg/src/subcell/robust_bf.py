"""Robust transmit-covariance design for the sojourner AP.

For every subcarrier the covariances ``Q_i`` of the sojourners (expressed in
their BD-precoded coordinates, ``Qb_i = W_i Q_i W_i^H``) maximize the sum of
``log det(I + c L_i Q_i L_i)`` under a total power budget, while the
interference ``Tr(H Qb_i H^H)`` toward every inhabitant stays below ``zeta``
for all channels ``H = Hh + dH`` with ``||dH||_F^2 <= eps_sq``. The
semi-infinite constraint is replaced by its S-procedure LMI

    [[a I - I (x) Qb,   -b            ],
     [-b^H,             k - a eps_sq  ]]  >= 0,

with ``b = vec(Qb Hh^H)`` and ``k = zeta - Tr(Hh Qb Hh^H)``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .maxdet import Block, solve_maxdet

__all__ = [
    "BfError",
    "RobustBfProblem",
    "BeamformerSolution",
    "interference",
    "assemble_lmi",
    "hermitian_basis",
    "solve_p2",
    "solve_p2_batch",
    "beamformer_from_Q",
    "water_filling",
    "water_filling_capacity",
    "feasibility_report",
]

PSD_TOL = 1e-9


class BfError(ValueError):
    pass


def _check_psd(q: np.ndarray, tol: float, what: str = "matrix"):
    if q.shape[-1] != q.shape[-2]:
        raise BfError(f"{what} must be square, got {q.shape}")
    scale = max(1.0, float(np.abs(q).max(initial=0.0)))
    if np.abs(q - np.swapaxes(q, -1, -2).conj()).max(initial=0.0) > tol * scale:
        raise BfError(f"{what} is not Hermitian")
    if q.size and np.linalg.eigvalsh(q).min() < -tol * scale:
        raise BfError(f"{what} is not positive semidefinite")


def interference(victim, Q_breve) -> float:
    """``Tr(H Qb H^H)``, clamped at zero."""
    h = np.asarray(victim, dtype=complex)
    q = np.asarray(Q_breve, dtype=complex)
    if h.ndim != 2 or q.shape != (h.shape[1], h.shape[1]):
        raise BfError(f"shape mismatch: victim {h.shape}, covariance {q.shape}")
    _check_psd(q, PSD_TOL, "Q_breve")
    return max(float(np.einsum("ij,jk,ik->", h, q, h.conj()).real), 0.0)


def assemble_lmi(Q_breve, victim_est, eps_sq: float, zeta: float, alpha: float) -> np.ndarray:
    """The full ``(n_t n_r + 1)``-square S-procedure matrix."""
    q = np.asarray(Q_breve, dtype=complex)
    h = np.asarray(victim_est, dtype=complex)
    if h.ndim != 2 or q.shape != (h.shape[1], h.shape[1]):
        raise BfError(f"shape mismatch: victim {h.shape}, covariance {q.shape}")
    if alpha < 0:
        raise BfError("alpha must be >= 0")
    n_r, n_t = h.shape
    b = (q @ h.conj().T).reshape(-1, order="F")
    k = zeta - np.trace(h @ q @ h.conj().T).real
    d = n_t * n_r
    out = np.empty((d + 1, d + 1), dtype=complex)
    out[:d, :d] = alpha * np.eye(d) - np.kron(np.eye(n_r), q)
    out[:d, d] = -b
    out[d, :d] = -b.conj()
    out[d, d] = k - alpha * eps_sq
    return out


def hermitian_basis(n: int) -> np.ndarray:
    """Real-coefficient basis of ``n x n`` Hermitian matrices, shape ``(n*n, n, n)``."""
    basis = []
    for i in range(n):
        e = np.zeros((n, n), dtype=complex)
        e[i, i] = 1
        basis.append(e)
    for i in range(n):
        for j in range(i + 1, n):
            e = np.zeros((n, n), dtype=complex)
            e[i, j] = e[j, i] = 1
            basis.append(e)
            e = np.zeros((n, n), dtype=complex)
            e[i, j], e[j, i] = 1j, -1j
            basis.append(e)
    return np.array(basis)


@dataclass
class RobustBfProblem:
    """One P2 instance covering all subcarriers.

    Shapes: ``sigmas (n_c, n_u, n_r)``, ``precoders (n_c, n_u, n_t, n_r)``,
    ``victims (n_c, n_i, n_r, n_t)``. ``zeta = inf`` drops the interference
    constraints. ``snr`` is linear.
    """

    sigmas: np.ndarray
    precoders: np.ndarray
    victims: np.ndarray
    eps_sq: float
    zeta: float
    p_sap: float
    snr: float
    n_st_star: int
    log_base: float = 2.0

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        self.precoders = np.asarray(self.precoders, dtype=complex)
        self.victims = np.asarray(self.victims, dtype=complex)
        if self.sigmas.ndim != 3 or self.precoders.ndim != 4 or self.victims.ndim != 4:
            raise BfError("sigmas, precoders and victims must be 3-D, 4-D and 4-D")
        n_c, n_u, n_r = self.sigmas.shape
        n_t = self.precoders.shape[2]
        if self.precoders.shape != (n_c, n_u, n_t, n_r):
            raise BfError(f"precoders shape {self.precoders.shape} != {(n_c, n_u, n_t, n_r)}")
        if self.victims.shape[0] != n_c or self.victims.shape[2:] != (n_r, n_t):
            raise BfError(f"victims shape {self.victims.shape} inconsistent")
        if self.eps_sq < 0 or self.p_sap < 0 or self.snr <= 0 or self.n_st_star < 1:
            raise BfError("need eps_sq >= 0, p_sap >= 0, snr > 0, n_st_star >= 1")
        if math.isnan(self.zeta):
            raise BfError("zeta is NaN")

    @property
    def dims(self):
        n_c, n_u, n_r = self.sigmas.shape
        return n_c, n_u, n_r, self.precoders.shape[2], self.victims.shape[1]

    @property
    def robust(self) -> bool:
        return self.eps_sq > 0 and math.isfinite(self.zeta)

    def to_dict(self) -> dict:
        return {
            "sigmas": _enc(self.sigmas),
            "precoders": _enc(self.precoders),
            "victims": _enc(self.victims),
            "eps_sq": self.eps_sq,
            "zeta": _enc_float(self.zeta),
            "p_sap": self.p_sap,
            "snr": self.snr,
            "n_st_star": self.n_st_star,
            "log_base": self.log_base,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobustBfProblem":
        return cls(_dec(d["sigmas"]).real, _dec(d["precoders"]), _dec(d["victims"]),
                   float(d["eps_sq"]), _dec_float(d["zeta"]), float(d["p_sap"]),
                   float(d["snr"]), int(d["n_st_star"]), float(d.get("log_base", 2.0)))


@dataclass
class BeamformerSolution:
    Q: np.ndarray                 # (n_c, n_u, n_r, n_r)
    s_multipliers: np.ndarray     # (n_c, n_u, n_i)
    objective: float
    status: str
    subcarrier_status: list = field(default_factory=list)
    gap: float = 0.0

    def to_dict(self) -> dict:
        return {
            "Q": _enc(self.Q),
            "s_multipliers": _enc(self.s_multipliers),
            "objective": self.objective,
            "status": self.status,
            "subcarrier_status": list(self.subcarrier_status),
            "gap": self.gap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BeamformerSolution":
        return cls(_dec(d["Q"]), _dec(d["s_multipliers"]).real, float(d["objective"]),
                   d["status"], list(d.get("subcarrier_status", [])), float(d.get("gap", 0.0)))


def _enc(a: np.ndarray) -> dict:
    a = np.asarray(a)
    return {"shape": list(a.shape),
            "data": [[float(z.real), float(z.imag)] for z in a.reshape(-1)]}


def _dec(d: dict) -> np.ndarray:
    pairs = np.asarray(d["data"], dtype=float).reshape(-1, 2)
    return (pairs[:, 0] + 1j * pairs[:, 1]).reshape(d["shape"])


def _enc_float(v: float):
    return v if math.isfinite(v) else str(v)


def _dec_float(v) -> float:
    return float(v)


# ---------------------------------------------------------------------------
# solver assembly

def _assemble(items, basis, robust: bool, constrained: bool):
    """Blocks for a batch of ``(problem, subcarrier)`` items of equal shape."""
    p0, _ = items[0]
    _, n_u, n_r, n_t, n_i = p0.dims
    p = basis.shape[0]
    nq = n_u * p
    n = nq + (n_u * n_i if robust else 0)
    nb = len(items)

    lam = np.array([pr.sigmas[s] for pr, s in items])            # (B, n_u, n_r)
    w = np.array([pr.precoders[s] for pr, s in items])           # (B, n_u, n_t, n_r)
    gain = np.array([pr.snr / pr.n_st_star for pr, _ in items])
    power = np.array([pr.p_sap for pr, _ in items])

    blocks = []
    eye = np.eye(n_r, dtype=complex)
    for i in range(n_u):
        sl = slice(1 + i * p, 1 + (i + 1) * p)
        c = np.zeros((nb, n + 1, n_r, n_r), dtype=complex)
        c[:, 0] = eye
        c[:, sl] = gain[:, None, None, None] * (
            lam[:, i, None, :, None] * basis[None] * lam[:, i, None, None, :])
        blocks.append(Block(c, objective=True))
        c = np.zeros((nb, n + 1, n_r, n_r), dtype=complex)
        c[:, sl] = basis[None]
        blocks.append(Block(c))

    c = np.zeros((nb, n + 1, 1, 1), dtype=complex)
    c[:, 0, 0, 0] = power
    for i in range(n_u):
        gram = np.einsum("bti,btj->bij", w[:, i].conj(), w[:, i])
        c[:, 1 + i * p:1 + (i + 1) * p, 0, 0] = -np.einsum("bij,kji->bk", gram, basis)
    blocks.append(Block(c))

    if constrained:
        vic = np.array([pr.victims[s] for pr, s in items])       # (B, n_i, n_r, n_t)
        zeta = np.array([pr.zeta for pr, _ in items])
        eps = np.array([pr.eps_sq for pr, _ in items])
        for i in range(n_u):
            sl = slice(1 + i * p, 1 + (i + 1) * p)
            for j in range(n_i):
                g = vic[:, j] @ w[:, i]                           # (B, n_r, n_r)
                # Tr(G E_k G^H) per basis element
                tr = np.einsum("bri,kij,brj->bk", g, basis, g.conj()).real
                if not robust:
                    c = np.zeros((nb, n + 1, 1, 1), dtype=complex)
                    c[:, 0, 0, 0] = zeta
                    c[:, sl, 0, 0] = -tr
                    blocks.append(Block(c))
                    continue
                d = n_r * n_r
                c = np.zeros((nb, n + 1, d + 1, d + 1), dtype=complex)
                c[:, 0, d, d] = zeta
                # b' = vec(E_k G^H): column-major stacking of E_k G^H
                bvec = np.einsum("kij,brj->bkri", basis, g.conj()).reshape(nb, p, d)
                c[:, sl, :d, :d] = -np.kron(eye, basis)[None]
                c[:, sl, :d, d] = -bvec
                c[:, sl, d, :d] = -bvec.conj()
                c[:, sl, d, d] = -tr
                a_idx = 1 + nq + i * n_i + j
                c[:, a_idx, :d, :d] = np.eye(d)
                c[:, a_idx, d, d] = -eps
                blocks.append(Block(c))
    return blocks, n, nq


def _start(blocks, items, basis, robust: bool, n: int, nq: int):
    """Scaled-identity covariances backed off until strictly feasible."""
    p0, _ = items[0]
    _, n_u, n_r, _, n_i = p0.dims
    p = basis.shape[0]
    nb = len(items)
    delta = np.array([pr.p_sap / (2 * n_u * n_r) for pr, _ in items])
    q_unit = np.zeros(nq)
    for i in range(n_u):
        q_unit[i * p:i * p + n_r] = 1.0      # diagonal basis entries come first
    x = np.zeros((nb, n))
    if robust:
        alpha = np.array([pr.zeta / (2 * pr.eps_sq) for pr, _ in items])
        x[:, nq:] = alpha[:, None]
    feasible = np.zeros(nb, dtype=bool)
    cons = [b for b in blocks if not b.objective]
    for _ in range(80):
        x[:, :nq] = delta[:, None] * q_unit
        ok = np.ones(nb, dtype=bool)
        for blk in cons:
            ev = np.linalg.eigvalsh(blk.coef[:, 0] + np.einsum(
                "bk,bkij->bij", x.astype(complex), blk.coef[:, 1:]))
            ok &= ev[:, 0] > 0
        feasible |= ok
        if np.all(feasible):
            break
        delta = np.where(feasible, delta, delta / 2)
    return x, feasible


def solve_p2_batch(problems: list[RobustBfProblem], tol: float = 1e-6,
                   max_iter: int = 400) -> list[BeamformerSolution]:
    """Solve many P2 instances; subcarriers of equal structure share one
    vectorized barrier run."""
    out_q, out_a, out_f, out_st = {}, {}, {}, {}
    groups = defaultdict(list)
    for pi, pr in enumerate(problems):
        n_c, n_u, n_r, n_t, n_i = pr.dims
        for s in range(n_c):
            key = (pi, s)
            if pr.zeta <= 0:
                out_q[key] = np.zeros((n_u, n_r, n_r), dtype=complex)
                out_a[key] = np.zeros((n_u, n_i))
                out_f[key], out_st[key] = 0.0, "infeasible"
            elif pr.p_sap == 0:
                out_q[key] = np.zeros((n_u, n_r, n_r), dtype=complex)
                out_a[key] = np.zeros((n_u, n_i))
                out_f[key], out_st[key] = 0.0, "optimal"
            else:
                constrained = math.isfinite(pr.zeta) and n_i > 0
                groups[(n_u, n_r, n_t, n_i, pr.robust and n_i > 0, constrained)].append(key)

    for (n_u, n_r, _, n_i, robust, constrained), keys in groups.items():
        items = [(problems[pi], s) for pi, s in keys]
        basis = hermitian_basis(n_r)
        blocks, n, nq = _assemble(items, basis, robust, constrained)
        x0, feasible = _start(blocks, items, basis, robust, n, nq)
        res_x = np.zeros_like(x0)
        res_f = np.zeros(len(items))
        res_st = np.full(len(items), "infeasible", dtype=object)
        if np.any(feasible):
            sub = [Block(b.coef[feasible], b.objective) for b in blocks]
            res = solve_maxdet(sub, x0[feasible], tol=tol, max_iter=max_iter)
            res_x[feasible] = res.x
            res_f[feasible] = res.objective
            res_st[feasible] = res.status
        p = basis.shape[0]
        for r, key in enumerate(keys):
            coeffs = res_x[r, :nq].reshape(n_u, p)
            out_q[key] = np.einsum("uk,kij->uij", coeffs, basis)
            out_a[key] = (res_x[r, nq:].reshape(n_u, n_i) if robust
                          else np.zeros((n_u, n_i)))
            out_f[key], out_st[key] = float(res_f[r]), str(res_st[r])

    sols = []
    for pi, pr in enumerate(problems):
        n_c = pr.dims[0]
        keys = [(pi, s) for s in range(n_c)]
        st = [out_st[k] for k in keys]
        if "infeasible" in st:
            status = "infeasible"
        elif "max_iter" in st:
            status = "max_iter"
        else:
            status = "optimal"
        nats = math.fsum(out_f[k] for k in keys)
        sols.append(BeamformerSolution(
            Q=np.array([out_q[k] for k in keys]),
            s_multipliers=np.array([out_a[k] for k in keys]),
            objective=nats / math.log(pr.log_base),
            status=status,
            subcarrier_status=st,
            gap=float(tol)))
    return sols


def solve_p2(problem: RobustBfProblem, tol: float = 1e-6, max_iter: int = 400) -> BeamformerSolution:
    """Maximize sum capacity subject to power and robust interference limits."""
    return solve_p2_batch([problem], tol, max_iter)[0]


def beamformer_from_Q(Q) -> np.ndarray:
    """Hermitian square root ``P`` with ``P P^H = Q``."""
    q = np.asarray(Q, dtype=complex)
    _check_psd(q, 1e-8, "Q")
    ev, vec = np.linalg.eigh(0.5 * (q + q.conj().T))
    ev = np.clip(ev, 0.0, None)
    return (vec * np.sqrt(ev)) @ vec.conj().T


def water_filling(gains, total_power: float) -> np.ndarray:
    """Powers maximizing ``sum log(1 + g_k p_k)`` with ``sum p_k = total_power``."""
    g = np.asarray(gains, dtype=float)
    if total_power <= 0:
        return np.zeros_like(g)
    order = np.argsort(-g)
    gs = g[order]
    pos = gs > 0
    inv = np.where(pos, 1.0 / np.where(pos, gs, 1.0), np.inf)
    level = 0.0
    for k in range(int(pos.sum()), 0, -1):
        level = (total_power + inv[:k].sum()) / k
        if level > inv[k - 1]:
            break
    p = np.zeros_like(g)
    p[order] = np.clip(level - inv, 0.0, None)
    return p


def water_filling_capacity(sigmas, p_sap: float, snr: float, n_st_star: int,
                           log_base: float = 2.0) -> float:
    """Unconstrained optimum of P2: per-subcarrier water-filling over all
    streams of all sojourners."""
    lam = np.asarray(sigmas, dtype=float)
    c = snr / n_st_star
    total = []
    for s in range(lam.shape[0]):
        g = c * lam[s].reshape(-1) ** 2
        total.extend(np.log1p(g * water_filling(g, p_sap)))
    return math.fsum(total) / math.log(log_base)


def feasibility_report(problem: RobustBfProblem, sol: BeamformerSolution,
                       n_samples: int = 0, rng=None) -> dict:
    """Residuals certifying a solution.

    Keys: ``min_eig_q``, ``power_residual`` (max over subcarriers of used
    minus available power), ``lmi_min_eig_rel`` (smallest eigenvalue of any
    full S-procedure matrix over its spectral norm) and, when ``n_samples``
    is positive, ``worst_sampled_ratio``: the largest realized interference
    over ``zeta`` across boundary channel errors.
    """
    from .mimo_core import sample_error

    n_c, n_u, n_r, n_t, n_i = problem.dims
    rng = np.random.default_rng(rng)
    qb = np.einsum("suti,suij,suvj->sutv", problem.precoders, sol.Q, problem.precoders.conj())
    rep = {
        "min_eig_q": float(np.linalg.eigvalsh(sol.Q).min()),
        "power_residual": float(np.max(np.einsum("sutt->s", qb).real - problem.p_sap)),
        "lmi_min_eig_rel": math.inf,
    }
    if not math.isfinite(problem.zeta):
        return rep
    worst = -math.inf
    for s in range(n_c):
        for i in range(n_u):
            for j in range(n_i):
                h = problem.victims[s, j]
                if problem.eps_sq > 0:
                    a = max(float(sol.s_multipliers[s, i, j]), 0.0)
                    lmi = assemble_lmi(qb[s, i], h, problem.eps_sq, problem.zeta, a)
                    ev = np.linalg.eigvalsh(lmi)
                    rel = ev[0] / max(np.abs(ev).max(), 1e-300)
                else:
                    rel = (problem.zeta - interference(h, qb[s, i])) / problem.zeta
                rep["lmi_min_eig_rel"] = min(rep["lmi_min_eig_rel"], float(rel))
                if n_samples:
                    dh = sample_error((n_samples, n_r, n_t), problem.eps_sq, "boundary", rng)
                    ht = h[None] + dh
                    val = np.einsum("nij,jk,nik->n", ht, qb[s, i], ht.conj()).real
                    worst = max(worst, float(val.max()) / problem.zeta)
    if n_samples:
        rep["worst_sampled_ratio"] = worst
    return rep
