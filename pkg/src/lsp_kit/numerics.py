"""Dense linear algebra used throughout the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
The helpers here add shape checking, a power-iteration spectral norm and a
one-sided Jacobi SVD that is accurate for the small matrices we deal with.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractError, UnsupportedSizeError

SVD_MAX_DIM = 512


def as_matrix(a, name="matrix") -> np.ndarray:
    """Return ``a`` as a C-contiguous float64 2-D array (no copy when possible)."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


class PowerIterationResult(NamedTuple):
    value: float
    iterations: int
    converged: bool


def power_iteration(a, tol=1e-12, max_iter=10_000) -> PowerIterationResult:
    """Largest singular value of ``a`` by power iteration on ``a.T @ a``.

    Stops once the relative change of the estimate drops below ``tol``.
    """
    if tol <= 0:
        raise ContractError("tol must be positive")
    a = as_matrix(a)
    if a.size == 0 or not np.any(a):
        return PowerIterationResult(0.0, 0, True)
    # fixed start vector: deterministic, and almost surely not orthogonal to
    # the top right singular vector
    v = np.random.default_rng(0x5EED).standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for it in range(1, max_iter + 1):
        w = a.T @ (a @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return PowerIterationResult(0.0, it, True)
        v = w / nrm
        new = float(np.linalg.norm(a @ v))
        if abs(new - est) <= tol * new:
            return PowerIterationResult(new, it, True)
        est = new
    return PowerIterationResult(est, max_iter, False)


def spectral_norm(a, tol=1e-12, max_iter=10_000) -> float:
    return power_iteration(a, tol, max_iter).value


def _round_robin(n):
    """Pairings of ``n`` columns into rounds of disjoint pairs (circle method)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        pairs = [(players[i], players[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u, rank):
    """Fill columns ``rank:`` of ``u`` with an orthonormal complement."""
    m, k = u.shape
    filled = rank
    for e in range(m):
        if filled == k:
            break
        x = np.zeros(m)
        x[e] = 1.0
        for _ in range(2):
            x -= u[:, :filled] @ (u[:, :filled].T @ x)
        nrm = np.linalg.norm(x)
        if nrm > 1e-8:
            u[:, filled] = x / nrm
            filled += 1
    return u


def svd_thin(a, tol=1e-15, max_sweeps=80):
    """Thin SVD ``a = U @ diag(s) @ V.T`` by one-sided (Hestenes) Jacobi rotations.

    Returns ``(U, s, V)`` with ``U`` of shape (m, k), ``s`` of length k and
    ``V`` of shape (n, k) where k = min(m, n). Singular values are sorted in
    non-increasing order.
    """
    a = as_matrix(a)
    m, n = a.shape
    if min(m, n) > SVD_MAX_DIM:
        raise UnsupportedSizeError(
            f"svd_thin supports min(rows, cols) <= {SVD_MAX_DIM}, got {a.shape}")
    if m < n:
        u, s, v = svd_thin(a.T, tol, max_sweeps)
        return v, s, u
    if n == 0:
        return np.zeros((m, 0)), np.zeros(0), np.zeros((0, 0))

    w = a.copy()
    v = np.eye(n)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p, q in rounds:
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            off = max(off, float(rel.max(initial=0.0)))
            act = rel > tol
            if not act.any():
                continue
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = w[:, p], w[:, q]
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if off <= tol:
            break

    sv = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-sv, kind="stable")
    sv, w, v = sv[order], w[:, order], v[:, order]
    cutoff = sv[0] * max(m, n) * np.finfo(float).eps if sv[0] > 0 else 0.0
    rank = int(np.sum(sv > cutoff))
    u = np.zeros((m, n))
    u[:, :rank] = w[:, :rank] / sv[:rank]
    sv[rank:] = np.where(sv[rank:] > 0, sv[rank:], 0.0)
    if rank < n:
        _complete_basis(u, rank)
    return u, sv, v


def save_matrix_csv(path, a):
    """Write one matrix row per line using shortest round-trip float formatting."""
    a = as_matrix(a)
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# {a.shape[0]} {a.shape[1]}\n")
        for row in a:
            fh.write(",".join(repr(float(x)) for x in row))
            fh.write("\n")


def load_matrix_csv(path) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    shape = None
    if lines and lines[0].startswith("#"):
        rows, cols = lines[0][1:].split()
        shape = (int(rows), int(cols))
        lines = lines[1:]
    data = [[float(x) for x in ln.split(",")] for ln in lines if ln.strip()]
    out = np.array(data, dtype=np.float64)
    if shape is not None:
        out = out.reshape(shape)
    return as_matrix(out)
