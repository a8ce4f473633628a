"""(d, r)-sparse projectors.

A projector ``P`` of shape (n_rows, d) stores exactly ``r`` nonzeros per row.
A pair ``(P, Q)`` compresses an m x n matrix ``G`` to the d x d matrix
``P.T @ G @ Q`` and decompresses ``S`` back with ``P @ S @ Q.T``. All
products below work directly on the (positions, values) storage and accept
stacks of matrices with any number of leading batch axes.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateInputError, NumericalAbort


@dataclass(frozen=True, eq=False)
class SparseProjector:
    n_rows: int
    d: int
    r: int
    positions: np.ndarray  # (n_rows, r) int, sorted ascending per row
    values: np.ndarray  # (n_rows, r) float64

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.int64)
        val = np.ascontiguousarray(self.values, dtype=np.float64)
        if not (1 <= self.r <= self.d):
            raise ContractError(f"need 1 <= r <= d, got r={self.r}, d={self.d}")
        if pos.shape != (self.n_rows, self.r) or val.shape != pos.shape:
            raise ContractError("positions/values must have shape (n_rows, r)")
        if pos.size and (pos.min() < 0 or pos.max() >= self.d):
            raise ContractError("positions must lie in [0, d)")
        if self.r > 1 and np.any(np.diff(pos, axis=1) <= 0):
            raise ContractError("positions must be distinct and sorted within each row")
        if not np.all(np.isfinite(val)):
            raise ContractError("projector values must be finite")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "values", val)

    @property
    def shape(self):
        return (self.n_rows, self.d)

    def with_values(self, values) -> "SparseProjector":
        return dataclasses.replace(self, values=np.array(values, dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, SparseProjector):
            return NotImplemented
        return (self.shape == other.shape and self.r == other.r
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class ProjectorPair:
    P: SparseProjector
    Q: SparseProjector
    birth_step: int = 0

    def __post_init__(self):
        if self.P.d != self.Q.d:
            raise ContractError(f"P.d ({self.P.d}) != Q.d ({self.Q.d})")

    @property
    def d(self):
        return self.P.d

    @property
    def m(self):
        return self.P.n_rows

    @property
    def n(self):
        return self.Q.n_rows


def init_sparse(n_rows, d, r, seed) -> SparseProjector:
    """Random projector: ``r`` uniform positions per row, values ~ N(0, 1/r).

    The standard deviation ``1/sqrt(r)`` makes ``E[P @ P.T] = I``.
    """
    if not (1 <= r <= d):
        raise ContractError(f"need 1 <= r <= d, got r={r}, d={d}")
    rng = np.random.default_rng(seed)
    # argsort of uniform keys gives a uniform r-subset per row without a Python loop
    keys = rng.random((n_rows, d))
    pos = np.sort(np.argpartition(keys, r - 1, axis=1)[:, :r], axis=1) if r < d else \
        np.broadcast_to(np.arange(d), (n_rows, d)).copy()
    vals = rng.standard_normal((n_rows, r)) / math.sqrt(r)
    return SparseProjector(n_rows, d, r, pos, vals)


def init_pair(m, n, d, r, seed, birth_step=0) -> ProjectorPair:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    sp, sq = ss.spawn(2)
    return ProjectorPair(init_sparse(m, d, r, sp), init_sparse(n, d, r, sq), birth_step)


def identity_projector(n) -> SparseProjector:
    return SparseProjector(n, n, 1, np.arange(n)[:, None], np.ones((n, 1)))


def identity_pair(m, n=None) -> ProjectorPair:
    n = m if n is None else n
    if m != n:
        raise ContractError("identity pattern needs m == n == d")
    return ProjectorPair(identity_projector(m), identity_projector(n))


def to_dense(p: SparseProjector) -> np.ndarray:
    out = np.zeros((p.n_rows, p.d))
    np.add.at(out, (np.repeat(np.arange(p.n_rows), p.r), p.positions.ravel()), p.values.ravel())
    return out


# -- sparse kernels ---------------------------------------------------------

def _left(p: SparseProjector, y):
    """``P @ y`` for y of shape (..., d, a) -> (..., n_rows, a). Pure gather."""
    g = y[..., p.positions, :]  # (..., n_rows, r, a)
    return np.einsum("...ika,ik->...ia", g, p.values)


def _left_t(p: SparseProjector, x):
    """``P.T @ x`` for x of shape (..., n_rows, a) -> (..., d, a). Scatter-add."""
    contrib = x[..., :, None, :] * p.values[:, :, None]  # (..., n_rows, r, a)
    contrib = np.moveaxis(contrib.reshape(*x.shape[:-2], p.n_rows * p.r, x.shape[-1]), -2, 0)
    out = np.zeros((p.d,) + contrib.shape[1:])
    np.add.at(out, p.positions.ravel(), contrib)
    return np.moveaxis(out, 0, -2)


def _t(x):
    return np.swapaxes(x, -1, -2)


def _check_full(pair: ProjectorPair, g):
    g = np.asarray(g, dtype=np.float64)
    if g.ndim < 2 or g.shape[-2:] != (pair.m, pair.n):
        raise ContractError(f"expected (..., {pair.m}, {pair.n}) matrix, got {g.shape}")
    return g


def _check_sub(pair: ProjectorPair, s):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim < 2 or s.shape[-2:] != (pair.d, pair.d):
        raise ContractError(f"expected (..., {pair.d}, {pair.d}) matrix, got {s.shape}")
    return s


def compress(pair: ProjectorPair, g) -> np.ndarray:
    """``P.T @ g @ Q`` without forming dense projectors."""
    g = _check_full(pair, g)
    ptg = _left_t(pair.P, g)  # (..., d, n)
    return _t(_left_t(pair.Q, _t(ptg)))


def decompress(pair: ProjectorPair, s) -> np.ndarray:
    """``P @ s @ Q.T`` without forming dense projectors."""
    s = _check_sub(pair, s)
    qst = _left(pair.Q, _t(s))  # (..., n, d)
    return _left(pair.P, _t(qst))


def estimation_bias(pair: ProjectorPair, sigma) -> np.ndarray:
    sigma = _check_full(pair, sigma)
    return decompress(pair, compress(pair, sigma)) - sigma


def relative_bias(pair: ProjectorPair, sigma) -> float:
    sigma = _check_full(pair, sigma)
    nrm = np.linalg.norm(sigma)
    if nrm == 0.0:
        raise DegenerateInputError("relative bias undefined for a zero matrix")
    return float(np.linalg.norm(estimation_bias(pair, sigma)) / nrm)


def transfer_matrix(new: SparseProjector, old: SparseProjector) -> np.ndarray:
    """``new.T @ old`` (d x d) from the two sparse patterns."""
    if new.n_rows != old.n_rows:
        raise ContractError("projectors must have the same number of rows")
    out = np.zeros((new.d, old.d))
    rows = np.broadcast_to(new.positions[:, :, None], (new.n_rows, new.r, old.r))
    cols = np.broadcast_to(old.positions[:, None, :], (new.n_rows, new.r, old.r))
    vals = new.values[:, :, None] * old.values[:, None, :]
    np.add.at(out, (rows.ravel(), cols.ravel()), vals.ravel())
    return out


# -- fitting ----------------------------------------------------------------

REGULARIZERS = ("squared", "eq3", "alg1")


@dataclass
class FitConfig:
    alpha: float = 0.5
    reg_beta: float = 1e-4
    step_size: float = 1e-2
    max_steps: int = 500
    timeout_steps: int = 500
    seed: int = 0
    regularizer: str = "squared"
    normalize_targets: bool = True
    max_halvings: int = 40

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ContractError("alpha must lie in (0, 1]")
        if self.max_steps < 1 or self.timeout_steps < 1:
            raise ContractError("max_steps and timeout_steps must be >= 1")
        if self.reg_beta < 0 or self.step_size <= 0:
            raise ContractError("reg_beta must be >= 0 and step_size > 0")
        if self.regularizer not in REGULARIZERS:
            raise ContractError(f"regularizer must be one of {REGULARIZERS}")


@dataclass
class FitReport:
    loss_curve: list = field(default_factory=list)
    bias_curve: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    final_relative_bias: float = float("nan")
    success: bool = False
    timed_out: bool = False
    stalled: bool = False
    steps: int = 0

    def to_csv(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write("step,loss,mean_relative_bias,step_size\n")
            for i, (loss, bias) in enumerate(zip(self.loss_curve, self.bias_curve)):
                lr = self.step_sizes[i - 1] if i > 0 else 0.0
                fh.write(f"{i},{loss!r},{bias!r},{lr!r}\n")


def _stack_targets(targets):
    if isinstance(targets, np.ndarray) and targets.ndim == 3:
        stack = np.asarray(targets, dtype=np.float64)
    else:
        targets = list(targets)
        if not targets:
            raise ContractError("fit needs at least one target")
        shapes = {np.shape(t) for t in targets}
        if len(shapes) != 1:
            raise ContractError(f"targets must share one shape, got {sorted(shapes)}")
        stack = np.stack([np.asarray(t, dtype=np.float64) for t in targets])
    if stack.shape[0] == 0:
        raise ContractError("fit needs at least one target")
    return stack


def _reg(x, kind_sq):
    """Regularizer value and gradient for one projector's values."""
    sq = float(np.sum(x * x))
    if kind_sq:
        return sq, 2.0 * x
    nrm = math.sqrt(sq)
    return nrm, (x / nrm if nrm > 0 else np.zeros_like(x))


def _dense_terms(Pd, Qd, G):
    A = Pd.T @ G @ Qd  # (T, d, d)
    B = Pd @ A @ Qd.T - G  # (T, m, n)
    return A, B


def _sparse_reg(pair, reg_beta, regularizer):
    if not reg_beta:
        return 0.0, 0.0, 0.0
    rp, grp = _reg(pair.P.values, regularizer in ("squared", "alg1"))
    rq, grq = _reg(pair.Q.values, regularizer == "squared")
    return reg_beta * (rp + rq), reg_beta * grp, reg_beta * grq


def fit_objective(pair: ProjectorPair, targets, reg_beta=0.0, regularizer="squared",
                  with_grad=True):
    """Fitting loss and its gradient with respect to the stored values.

    loss = mean_t ||P P^T G_t Q Q^T - G_t||_F^2 + reg_beta * R(P, Q)

    Returns ``(loss, grad_P, grad_Q, per_target_bias_norms)`` where the
    gradients have the shape of ``P.values`` / ``Q.values`` (None when
    ``with_grad`` is false). Fitting is a check-time operation, so the
    projectors are expanded into dense (m, d) / (n, d) scratch copies here.
    """
    G = _stack_targets(targets)
    _check_full(pair, G)
    T = G.shape[0]
    P, Q = pair.P, pair.Q
    Pd, Qd = to_dense(P), to_dense(Q)
    A, B = _dense_terms(Pd, Qd, G)
    bias_norms = np.sqrt(np.einsum("tij,tij->t", B, B))
    reg, grp, grq = _sparse_reg(pair, reg_beta, regularizer)
    loss = float(np.sum(bias_norms ** 2) / T) + reg
    if not with_grad:
        return loss, None, None, bias_norms
    C = Pd.T @ B @ Qd
    # d/dP: 2 [B Q A^T + G Q C^T], d/dQ: 2 [B^T P A + G^T P C], averaged over t
    dP = 2.0 * ((B @ Qd) @ _t(A) + (G @ Qd) @ _t(C)).sum(axis=0) / T
    dQ = 2.0 * (_t(B) @ Pd @ A + _t(G) @ Pd @ C).sum(axis=0) / T
    gP = np.take_along_axis(dP, P.positions, axis=1) + grp
    gQ = np.take_along_axis(dQ, Q.positions, axis=1) + grq
    return loss, gP, gQ, bias_norms


def mean_relative_bias(pair: ProjectorPair, targets) -> float:
    G = _stack_targets(targets)
    _check_full(pair, G)
    norms = np.sqrt(np.einsum("tij,tij->t", G, G))
    if np.any(norms == 0):
        raise DegenerateInputError("relative bias undefined for a zero target")
    B = estimation_bias(pair, G)
    return float(np.mean(np.sqrt(np.einsum("tij,tij->t", B, B)) / norms))


def fit(pair0: ProjectorPair, targets, cfg: FitConfig):
    """Learn projector values (positions frozen) by gradient descent.

    Each step starts from twice the previously accepted step size and halves
    it until the loss decreases, so the loss curve is non-increasing. Stops
    when the mean relative bias over the targets is at most ``cfg.alpha``,
    when the step budget is used, or when no decreasing step can be found.
    """
    G = _stack_targets(targets)
    _check_full(pair0, G)
    norms = np.sqrt(np.einsum("tij,tij->t", G, G))
    if np.any(norms == 0):
        raise DegenerateInputError("cannot fit on a zero target")
    if cfg.normalize_targets:
        G = G / norms[:, None, None]
        norms = np.ones_like(norms)

    def evaluate(pair, with_grad=True):
        out = fit_objective(pair, G, cfg.reg_beta, cfg.regularizer, with_grad)
        if not np.isfinite(out[0]):
            raise NumericalAbort(f"non-finite fitting loss {out[0]!r}")
        return out

    budget = min(cfg.max_steps, cfg.timeout_steps)
    report = FitReport()
    pair = pair0
    loss, gP, gQ, bn = evaluate(pair)
    bias = float(np.mean(bn / norms))
    report.loss_curve.append(loss)
    report.bias_curve.append(bias)
    step = cfg.step_size
    while bias > cfg.alpha and report.steps < budget:
        trial = step * 2.0 if report.steps else step
        accepted = None
        for _ in range(cfg.max_halvings):
            cand = ProjectorPair(pair.P.with_values(pair.P.values - trial * gP),
                                 pair.Q.with_values(pair.Q.values - trial * gQ),
                                 pair.birth_step)
            out = evaluate(cand, with_grad=False)
            if out[0] < loss:
                accepted = cand, evaluate(cand)
                break
            trial *= 0.5
        if accepted is None:
            report.stalled = True
            break
        pair, (loss, gP, gQ, bn) = accepted
        step = trial
        bias = float(np.mean(bn / norms))
        report.steps += 1
        report.loss_curve.append(loss)
        report.bias_curve.append(bias)
        report.step_sizes.append(step)
    report.final_relative_bias = bias
    report.success = bias <= cfg.alpha
    report.timed_out = not report.success and not report.stalled and report.steps >= budget
    return pair, report


# -- serialization ----------------------------------------------------------

def save_projector(path, p: SparseProjector):
    with open(path, "w", newline="\n") as fh:
        fh.write(f"{p.n_rows} {p.d} {p.r}\n")
        for pos, val in zip(p.positions, p.values):
            fh.write(" ".join(str(int(i)) for i in pos))
            fh.write(" ")
            fh.write(" ".join(repr(float(v)) for v in val))
            fh.write("\n")


def load_projector(path) -> SparseProjector:
    with open(path) as fh:
        header = fh.readline().split()
        n_rows, d, r = (int(x) for x in header)
        pos = np.zeros((n_rows, r), dtype=np.int64)
        val = np.zeros((n_rows, r))
        for i in range(n_rows):
            parts = fh.readline().split()
            if len(parts) != 2 * r:
                raise ContractError(f"row {i}: expected {2 * r} fields, got {len(parts)}")
            pos[i] = [int(x) for x in parts[:r]]
            val[i] = [float(x) for x in parts[r:]]
    return SparseProjector(n_rows, d, r, pos, val)
