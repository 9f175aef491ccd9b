"""Dense float64 matrix helpers, a self-contained Jacobi SVD, the Moore-Penrose
pseudoinverse and reproducible random streams.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Every public
function returns a fresh array and never mutates its inputs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

Matrix = np.ndarray

SVD_MAX_SWEEPS = 100
PINV_RTOL = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class SVDNonConvergence(RuntimeError):
    pass


def as_matrix(x, name: str = "matrix") -> Matrix:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings where each round touches every column at most once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        pairs = [(players[i], players[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(p), max(p)) for p in pairs if -1 not in p]
        rounds.append((np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: Matrix, valid: np.ndarray) -> Matrix:
    """Replace columns not flagged ``valid`` with unit vectors orthogonal to the rest."""
    u = u.copy()
    m = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(valid)]
    candidates = iter(np.eye(m))
    for j in np.flatnonzero(~valid):
        for e in candidates:
            v = e.copy()
            for _ in range(2):  # twice is enough for Gram-Schmidt stability
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                u[:, j] = v / nv
                basis.append(u[:, j])
                break
    return u


def svd(m: Matrix, max_sweeps: int = SVD_MAX_SWEEPS) -> tuple[Matrix, np.ndarray, Matrix]:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(U, S, V)`` with ``m == U @ diag(S) @ V.T``, ``S`` descending and
    non-negative, and orthonormal columns in ``U`` and ``V``. Pairs of columns
    are rotated in round-robin order so each round is one vectorised update;
    the sweep order is fixed, so results are deterministic.
    """
    a = as_matrix(m)
    if a.shape[0] < a.shape[1]:
        v, s, u = svd(a.T, max_sweeps)
        return u, s, v

    rows, n = a.shape
    u = a.copy()
    v = np.eye(n)
    tol = max(rows, n) * np.finfo(np.float64).eps
    schedule = _round_robin(n) if n > 1 else []

    for _ in range(max_sweeps):
        rotated = False
        for i, j in schedule:
            ui, uj = u[:, i], u[:, j]
            alpha = np.einsum("ij,ij->j", ui, ui)
            beta = np.einsum("ij,ij->j", uj, uj)
            gamma = np.einsum("ij,ij->j", ui, uj)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            u[:, i], u[:, j] = c * ui - s * uj, s * ui + c * uj
            vi, vj = v[:, i], v[:, j]
            v[:, i], v[:, j] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            break
    else:
        raise SVDNonConvergence(f"Jacobi SVD did not converge within {max_sweeps} sweeps")

    sigma = np.linalg.norm(u, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, u, v = sigma[order], u[:, order], v[:, order]
    smax = sigma[0] if sigma.size else 0.0
    valid = sigma > max(smax * tol, np.finfo(np.float64).tiny)
    u[:, valid] = u[:, valid] / sigma[valid]
    if not valid.all():
        u = _complete_basis(u, valid)
    return u, sigma, v


def pinv(m: Matrix, tol: float = PINV_RTOL) -> Matrix:
    """Moore-Penrose pseudoinverse.

    Singular values at or below ``tol * max(S)`` are treated as zero.
    """
    if tol < 0:
        raise ValueError("tol must be non-negative")
    a = as_matrix(m)
    u, s, v = svd(a)
    if s[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0]))
    keep = s > tol * s[0]
    return (v[:, keep] / s[keep]) @ u[:, keep].T


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, so a given key produces the same draws on every platform.
    ``spawn`` derives child streams from labels (client index, round, site name).
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and 0 <= self.stream_id < 2**64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed | (self.stream_id << 64)))

    def spawn(self, *labels) -> "RngStream":
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream_id.to_bytes(8, "little"))
        h.update(repr(labels).encode())
        return RngStream(self.seed, int.from_bytes(h.digest(), "little"))


def gaussian(rows: int, cols: int, stream: RngStream) -> Matrix:
    """I.i.d. N(0, 1) draws, fully determined by ``stream``."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"gaussian needs positive dimensions, got {rows}x{cols}")
    return stream.generator().standard_normal((rows, cols))


def frobenius(m: Matrix) -> float:
    return float(np.sqrt(np.sum(np.square(m))))
