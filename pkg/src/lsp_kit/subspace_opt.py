"""Adam on the compressed d x d gradient, and moment transfer between subspaces."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericalAbort
from .numerics import load_matrix_csv, save_matrix_csv
from .projector import ProjectorPair, transfer_matrix


@dataclass(frozen=True)
class SubspaceOptState:
    M: np.ndarray
    V: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.M.shape != self.V.shape:
            raise ContractError("M and V must have the same shape")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1) or self.eps <= 0:
            raise ContractError("need beta1, beta2 in (0, 1) and eps > 0")

    @classmethod
    def zeros(cls, shape, **hyper):
        if isinstance(shape, int):
            shape = (shape, shape)
        return cls(np.zeros(shape), np.zeros(shape), 0, **hyper)

    @property
    def shape(self):
        return self.M.shape


def adam_step(state: SubspaceOptState, grad):
    """One Adam step. Returns ``(new_state, direction)``.

    The direction is bias-corrected ``m_hat / (sqrt(v_hat) + eps)``; the
    caller scales it by the learning rate.
    """
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != state.shape:
        raise ContractError(f"gradient shape {g.shape} != state shape {state.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericalAbort("non-finite gradient passed to adam_step")
    b1, b2 = state.beta1, state.beta2
    M = b1 * state.M + (1.0 - b1) * g
    V = b2 * state.V + (1.0 - b2) * (g * g)
    t = state.step + 1
    m_hat = M / (1.0 - b1 ** t)
    v_hat = V / (1.0 - b2 ** t)
    delta = m_hat / (np.sqrt(v_hat) + state.eps)
    return dataclasses.replace(state, M=M, V=V, step=t), delta


def reproject_state(state: SubspaceOptState, old: ProjectorPair, new: ProjectorPair,
                    second_moment="entrywise") -> SubspaceOptState:
    """Carry (M, V) from the ``old`` subspace into the ``new`` one.

    M <- (Pn^T Po) M (Qo^T Qn)
    V <- T_P V T_Q^T with T_P = (Pn^T Po)**2, T_Q = (Qn^T Qo)**2

    ``second_moment="entrywise"`` squares the transfer matrices elementwise,
    ``"matrix"`` uses the matrix square. V is clamped at zero either way.
    """
    if old.d != new.d:
        raise ContractError(f"subspace widths differ: {old.d} vs {new.d}")
    if (old.m, old.n) != (new.m, new.n):
        raise ContractError("projector pairs act on different matrix shapes")
    if state.shape != (new.d, new.d):
        raise ContractError(f"state shape {state.shape} does not match d={new.d}")
    tp = transfer_matrix(new.P, old.P)
    tq = transfer_matrix(new.Q, old.Q)
    M = tp @ state.M @ tq.T
    if second_moment == "entrywise":
        tp2, tq2 = tp * tp, tq * tq
    elif second_moment == "matrix":
        tp2, tq2 = tp @ tp, tq @ tq
    else:
        raise ContractError(f"unknown second_moment mode {second_moment!r}")
    V = np.maximum(tp2 @ state.V @ tq2.T, 0.0)
    return dataclasses.replace(state, M=M, V=V)


def save_state(directory, state: SubspaceOptState, prefix="opt"):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, f"{prefix}_header.csv"), "w", newline="\n") as fh:
        fh.write("step,beta1,beta2,eps\n")
        fh.write(f"{state.step},{state.beta1!r},{state.beta2!r},{state.eps!r}\n")
    save_matrix_csv(os.path.join(directory, f"{prefix}_M.csv"), state.M)
    save_matrix_csv(os.path.join(directory, f"{prefix}_V.csv"), state.V)


def load_state(directory, prefix="opt") -> SubspaceOptState:
    with open(os.path.join(directory, f"{prefix}_header.csv")) as fh:
        fh.readline()
        step, b1, b2, eps = fh.readline().strip().split(",")
    M = load_matrix_csv(os.path.join(directory, f"{prefix}_M.csv"))
    V = load_matrix_csv(os.path.join(directory, f"{prefix}_V.csv"))
    return SubspaceOptState(M, V, int(step), float(b1), float(b2), float(eps))
