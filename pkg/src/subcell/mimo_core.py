"""Flat-fading MIMO channels and block-diagonalization precoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "ChannelError",
    "BdInfeasible",
    "ChannelMatrix",
    "UncertainChannel",
    "BdPrecoder",
    "sample_channel",
    "sample_error",
    "perturb_channel",
    "estimate_from_true",
    "stack_interfering",
    "bd_precoder",
    "bd_precoders",
    "capacity_term",
]

NULL_RTOL = 1e-10
PSD_TOL = 1e-9


class ChannelError(ValueError):
    pass


class BdInfeasible(ChannelError):
    """The interferer stack leaves fewer null-space dimensions than streams."""

    def __init__(self, n_t: int, null_dim: int, n_r: int, required_n_t: int):
        super().__init__(
            f"block diagonalization needs n_t >= {required_n_t} "
            f"(have n_t={n_t}, null space dim {null_dim} < n_r={n_r})")
        self.required_n_t = required_n_t


@dataclass(frozen=True)
class ChannelMatrix:
    """An ``n_r x n_t`` complex gain matrix with optional labels."""

    entries: np.ndarray
    tx_id: int | None = None
    user_id: int | None = None
    subcarrier_id: int | None = None

    def __post_init__(self):
        h = np.asarray(self.entries, dtype=complex)
        if h.ndim != 2:
            raise ChannelError(f"channel must be 2-D, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ChannelError("channel has non-finite entries")
        object.__setattr__(self, "entries", h)

    @property
    def shape(self):
        return self.entries.shape


@dataclass(frozen=True)
class UncertainChannel:
    estimate: np.ndarray
    radius_sq: float
    true_channel: np.ndarray | None = None

    @property
    def error(self) -> np.ndarray | None:
        if self.true_channel is None:
            return None
        return self.true_channel - self.estimate


@dataclass(frozen=True)
class BdPrecoder:
    W: np.ndarray
    decoder: np.ndarray
    sigma: np.ndarray


def _arr(h) -> np.ndarray:
    if isinstance(h, ChannelMatrix):
        return h.entries
    return np.asarray(h, dtype=complex)


def sample_channel(n_r: int, n_t: int, rng=None, size: tuple = ()) -> np.ndarray:
    """I.i.d. CN(0, 1) entries; ``size`` prepends batch axes."""
    if n_r < 1 or n_t < 1:
        raise ChannelError("n_r and n_t must be >= 1")
    rng = np.random.default_rng(rng)
    shape = tuple(size) + (n_r, n_t)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def sample_error(shape: tuple, eps_sq: float, mode: str = "gaussian", rng=None) -> np.ndarray:
    """Channel error draws.

    ``gaussian`` gives i.i.d. CN(0, eps_sq) entries. ``boundary`` gives a
    uniformly oriented matrix on the sphere ``||dH||_F^2 = eps_sq`` (the last
    two axes form one matrix).
    """
    if eps_sq < 0:
        raise ChannelError("eps_sq must be >= 0")
    if mode not in ("gaussian", "boundary"):
        raise ChannelError(f"unknown perturbation mode {mode!r}")
    rng = np.random.default_rng(rng)
    z = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)
    if mode == "gaussian":
        return math.sqrt(eps_sq) * z
    norms = np.sqrt(np.sum(np.abs(z) ** 2, axis=(-2, -1), keepdims=True))
    return z * (math.sqrt(eps_sq) / norms)


def perturb_channel(est, eps_sq: float, mode: str = "gaussian", rng=None) -> UncertainChannel:
    """Treat ``est`` as the estimate and draw a true channel around it."""
    h = _arr(est)
    dh = sample_error(h.shape, eps_sq, mode, rng)
    return UncertainChannel(h, float(eps_sq), h + dh)


def estimate_from_true(true, eps_sq: float, mode: str = "gaussian", rng=None) -> UncertainChannel:
    """Treat ``true`` as the real channel and form the estimate ``H - dH``."""
    h = _arr(true)
    dh = sample_error(h.shape, eps_sq, mode, rng)
    return UncertainChannel(h - dh, float(eps_sq), h)


def stack_interfering(channels: Sequence, exclude_index: int | None = None) -> np.ndarray:
    """Row-stack every channel except ``exclude_index``."""
    mats = [_arr(h) for k, h in enumerate(channels) if k != exclude_index]
    if not mats:
        raise ChannelError("nothing left to stack")
    n_t = {m.shape[-1] for m in mats}
    if len(n_t) != 1 or any(m.ndim != 2 for m in mats):
        raise ChannelError(f"inconsistent channel shapes {[m.shape for m in mats]}")
    return np.vstack(mats)


def _fix_phase(w: np.ndarray, u: np.ndarray):
    # rotate column k of W (and U) so W's largest-magnitude entry is real > 0
    idx = np.argmax(np.abs(w), axis=-2)[..., None, :]
    lead = np.take_along_axis(w, idx, axis=-2)
    ph = np.conj(lead) / np.abs(lead)
    return w * ph, u * ph


def bd_precoder(h_tilde, h_own) -> BdPrecoder:
    """Precoder for one user that is invisible to every row of ``h_tilde``."""
    ht = _arr(h_tilde)
    ho = _arr(h_own)
    n_r, n_t = ho.shape
    if ht.ndim != 2 or ht.shape[1] != n_t:
        raise ChannelError(f"stack shape {ht.shape} does not match n_t={n_t}")
    _, s, vh = np.linalg.svd(ht, full_matrices=True)
    rank = int(np.sum(s > NULL_RTOL * s[0])) if s.size else 0
    null_dim = n_t - rank
    if null_dim < n_r:
        raise BdInfeasible(n_t, null_dim, n_r, rank + n_r)
    v0 = vh[rank:].conj().T
    u, lam, v1h = np.linalg.svd(ho @ v0, full_matrices=False)
    w, u = _fix_phase(v0 @ v1h[:n_r].conj().T, u[:, :n_r])
    return BdPrecoder(w, u.conj().T, lam[:n_r])


def bd_precoders(own: np.ndarray, extra: np.ndarray | None = None):
    """Batched BD over users.

    ``own`` has shape ``(..., n_u, n_r, n_t)``. User ``i`` is nulled toward
    all other users plus the rows of ``extra`` (shape ``(..., k, n_t)``).
    Returns ``(W, sigma)`` with shapes ``(..., n_u, n_t, n_r)`` and
    ``(..., n_u, n_r)``.
    """
    own = np.asarray(own, dtype=complex)
    *batch, n_u, n_r, n_t = own.shape
    stacks = []
    for i in range(n_u):
        parts = [own[..., j, :, :] for j in range(n_u) if j != i]
        if extra is not None:
            parts.append(np.asarray(extra, dtype=complex))
        stacks.append(np.concatenate(parts, axis=-2) if parts else
                      np.zeros((*batch, 0, n_t), dtype=complex))
    ht = np.stack(stacks, axis=-3)
    n_rows = ht.shape[-2]
    if n_t - n_rows < n_r:
        raise BdInfeasible(n_t, n_t - n_rows, n_r, n_rows + n_r)
    if n_rows:
        _, s, vh = np.linalg.svd(ht, full_matrices=True)
        if np.any(s[..., -1] <= NULL_RTOL * s[..., 0]):
            raise ChannelError("rank-deficient interferer stack; use bd_precoder per user")
        v0 = np.swapaxes(vh[..., n_rows:, :], -1, -2).conj()
    else:
        v0 = np.broadcast_to(np.eye(n_t, dtype=complex), (*batch, n_u, n_t, n_t))
    u, lam, v1h = np.linalg.svd(own @ v0, full_matrices=False)
    w = v0 @ np.swapaxes(v1h[..., :n_r, :], -1, -2).conj()
    w, _ = _fix_phase(w, u[..., :n_r])
    return w, lam[..., :n_r]


def capacity_term(sigma, Q, snr: float, n_st_star: int, base: float = 2.0) -> float:
    """``log det(I + (snr / n_st_star) L Q L^H)`` with ``L = diag(sigma)``."""
    lam = np.asarray(sigma, dtype=float)
    q = np.asarray(Q, dtype=complex)
    if q.shape != (lam.size, lam.size):
        raise ChannelError(f"Q shape {q.shape} does not match {lam.size} streams")
    if np.max(np.abs(q - q.conj().T), initial=0.0) > PSD_TOL * max(1.0, np.abs(q).max()):
        raise ChannelError("Q is not Hermitian")
    if np.linalg.eigvalsh(q).min() < -PSD_TOL:
        raise ChannelError("Q is not positive semidefinite")
    a = np.eye(lam.size) + (snr / n_st_star) * (lam[:, None] * q * lam[None, :])
    _, logdet = np.linalg.slogdet(a)
    return max(float(logdet) / math.log(base), 0.0)
