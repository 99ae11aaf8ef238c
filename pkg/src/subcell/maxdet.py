"""Batched primal barrier method for small determinant-maximization problems.

Each problem in a batch has real decision vector ``x`` of length ``n`` and a
list of Hermitian blocks ``F_b(x) = C_b[0] + sum_k x_k C_b[k+1]``. The
problem solved is::

    maximize    sum_{b in objective} log det F_b(x)
    subject to  F_b(x) > 0        for every block

Constraint blocks enter through a log-det barrier; the central path is
followed by damped Newton steps with a geometric increase of the barrier
weight, giving a duality gap of at most ``m / t`` where ``m`` is the total
dimension of the constraint blocks. All problems in the batch must share
block shapes; they are advanced in lockstep with per-problem step sizes and
termination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Block", "MaxdetResult", "solve_maxdet"]


@dataclass
class Block:
    """``coef`` has shape ``(batch, n + 1, d, d)``; index 0 is the constant."""

    coef: np.ndarray
    objective: bool = False

    @property
    def dim(self) -> int:
        return self.coef.shape[-1]


@dataclass
class MaxdetResult:
    x: np.ndarray
    objective: np.ndarray
    gap: np.ndarray
    status: np.ndarray  # "optimal" | "max_iter"
    iterations: int


def _value(block: Block, x: np.ndarray) -> np.ndarray:
    c = block.coef
    return c[:, 0] + np.einsum("bk,bkij->bij", x.astype(c.dtype), c[:, 1:])


def _logdet(block: Block, x: np.ndarray):
    ev = np.linalg.eigvalsh(_value(block, x))
    ok = ev[:, 0] > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ld = np.where(ok, np.sum(np.log(np.where(ev > 0, ev, 1.0)), axis=1), -np.inf)
    return ld, ok


def _barrier(blocks, x, t):
    phi = np.zeros(x.shape[0])
    f0 = np.zeros(x.shape[0])
    feas = np.ones(x.shape[0], dtype=bool)
    for blk in blocks:
        ld, ok = _logdet(blk, x)
        feas &= ok
        if blk.objective:
            f0 = f0 + np.where(ok, ld, 0.0)
            phi = phi + t * np.where(ok, ld, 0.0)
        else:
            phi = phi + np.where(ok, ld, 0.0)
    return np.where(feas, phi, -np.inf), f0, feas


def _derivatives(blocks, x, t):
    b, n = x.shape
    g = np.zeros((b, n))
    h = np.zeros((b, n, n))
    for blk in blocks:
        s = np.linalg.inv(_value(blk, x))
        m = np.einsum("bij,bkjl->bkil", s, blk.coef[:, 1:])
        w = t[:, None] if blk.objective else 1.0
        g += w * np.einsum("bkii->bk", m).real
        hh = np.einsum("bkij,blji->bkl", m, m).real
        h += (t[:, None, None] if blk.objective else 1.0) * hh
    return g, h


def solve_maxdet(blocks: list[Block], x0: np.ndarray, tol: float = 1e-6,
                 t0: float = 1.0, mu: float = 10.0, max_iter: int = 400,
                 newton_tol: float = 1e-7) -> MaxdetResult:
    """Solve a batch from the strictly feasible start ``x0`` (shape ``(B, n)``).

    Termination is per problem: the barrier weight grows until the gap bound
    ``m / t`` falls below ``tol * max(1, |objective|)``.
    """
    x = np.array(x0, dtype=float)
    nb = x.shape[0]
    m = sum(blk.dim for blk in blocks if not blk.objective)
    t = np.full(nb, float(t0))
    _, _, feas = _barrier(blocks, x, t)
    if not np.all(feas):
        raise ValueError("starting point is not strictly feasible")

    done = np.zeros(nb, dtype=bool)
    it = 0
    while not np.all(done) and it < max_iter:
        it += 1
        act = ~done
        sub = [Block(blk.coef[act], blk.objective) for blk in blocks]
        xa, ta = x[act], t[act]
        g, h = _derivatives(sub, xa, ta)
        reg = 1e-13 * np.einsum("bii->b", h)[:, None, None] * np.eye(h.shape[1])
        dx = np.linalg.solve(h + reg, g[..., None])[..., 0]
        dec = np.einsum("bk,bk->b", g, dx)

        centred = dec / 2 <= newton_tol
        phi, f0, _ = _barrier(sub, xa, ta)
        finished = centred & (m / ta <= tol * np.maximum(1.0, np.abs(f0)))
        ta = np.where(centred & ~finished, ta * mu, ta)

        step = np.where(centred, 0.0, 1.0)
        pending = ~centred
        for _ in range(60):
            if not np.any(pending):
                break
            cand = xa + step[:, None] * dx
            phic, _, feasc = _barrier(sub, cand, ta)
            ok = feasc & (phic >= phi + 0.25 * step * dec)
            pending &= ~ok
            step = np.where(pending, step * 0.5, step)
        # a vanishing step means roundoff has swamped the barrier value
        stalled = ~centred & (pending | (step < 1e-8))
        step = np.where(pending, 0.0, step)
        ta = np.where(stalled, ta * mu, ta)
        finished |= stalled & (m / ta <= tol * np.maximum(1.0, np.abs(f0)))

        x[act] = xa + step[:, None] * dx
        t[act] = ta
        idx = np.flatnonzero(act)
        done[idx[finished]] = True

    _, f0, _ = _barrier(blocks, x, t)
    status = np.where(done, "optimal", "max_iter")
    return MaxdetResult(x, f0, m / t, status, it)
