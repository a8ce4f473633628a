"""Reference methods: full Adam, LoRA, GaLore, and the GPU memory model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numerics import as_matrix, svd_thin
from .subspace_opt import SubspaceOptState, adam_step
from .toy_models import DenseNet
from .trainer import TrainConfig, TrainHistory, _Loop, _task_data

METHODS = ("full", "lora", "galore", "lsp")


@dataclass(frozen=True)
class MemoryEstimate:
    method: str
    weight_count: int
    projector_count: int
    opt_state_count: int
    total: int

    @property
    def extra(self):
        return self.total - self.weight_count


def memory_estimate(method, m, n, r_or_d, opt_factor=3) -> MemoryEstimate:
    """GPU-resident scalar counts for one m x n weight.

    full:   (1 + b) mn           lora:  mn + b (m + n) r
    galore: mn + (m + b n) r     lsp:   mn + (m + n) r
    where b = ``opt_factor`` (3 for Adam: weights' copy plus two moments).
    """
    for name, v in (("m", m), ("n", n), ("r_or_d", r_or_d), ("opt_factor", opt_factor)):
        if int(v) != v:
            raise ContractError(f"{name} must be an integer count")
    m, n, r, b = int(m), int(n), int(r_or_d), int(opt_factor)
    if m <= 0 or n <= 0 or r < 0 or b < 1:
        raise ContractError("need positive m, n, r >= 0 and opt_factor >= 1")
    w = m * n
    if method == "full":
        proj, opt = 0, b * w
    elif method == "lora":
        proj, opt = (m + n) * r, (b - 1) * (m + n) * r
    elif method == "galore":
        proj, opt = m * r, b * n * r
    elif method == "lsp":
        proj, opt = (m + n) * r, 0
    else:
        raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")
    return MemoryEstimate(method, w, proj, opt, w + proj + opt)


def galore_rank_for_memory(m, n, extra, opt_factor=3):
    """Largest GaLore rank whose extra memory does not exceed ``extra`` (at least 1)."""
    return max(1, int(extra // (m + opt_factor * n)))


def galore_project(grad, rank):
    """Top-``rank`` left singular vectors ``P`` of ``grad`` and ``P.T @ grad``."""
    g = as_matrix(grad, "grad")
    if not (1 <= rank <= min(g.shape)):
        raise ContractError(f"rank must lie in [1, {min(g.shape)}], got {rank}")
    u, _, _ = svd_thin(g)
    p = np.ascontiguousarray(u[:, :rank])
    return p, p.T @ g


def galore_basis(grads, rank):
    """Left basis fitted to several gradients at once (SVD of their concatenation)."""
    stack = np.concatenate([as_matrix(g) for g in grads], axis=1)
    return galore_project(stack, rank)[0]


def train_baseline(kind, net: DenseNet, task, cfg: TrainConfig) -> TrainHistory:
    """Train ``net`` in place with ``kind`` in {"full", "lora", "galore"}.

    lora: W = W0 + A B^T with W0 frozen, A ~ N(0, 1/r), B = 0, Adam on A and B.
    galore: every ``check_freq`` steps the left basis is recomputed from the
    current gradient by SVD; Adam runs on the rank x n projected gradient and
    its state is kept across basis changes.
    """
    data = _task_data(task)
    loop = _Loop(net, data, cfg, kind)
    hyper = dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    shapes = net.shapes

    if kind == "full":
        states = [SubspaceOptState.zeros(s, **hyper) for s in shapes]

        def step(t, grads):
            lr = cfg.lr_at(t)
            for l, g in enumerate(grads):
                states[l], direction = adam_step(states[l], g)
                net.add_to_layer(l, -lr * direction)

    elif kind == "lora":
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
        ranks = [min(cfg.rank, m, n) for m, n in shapes]
        A = [rng.standard_normal((m, k)) / np.sqrt(k) for (m, _), k in zip(shapes, ranks)]
        B = [np.zeros((n, k)) for (_, n), k in zip(shapes, ranks)]
        sa = [SubspaceOptState.zeros(a.shape, **hyper) for a in A]
        sb = [SubspaceOptState.zeros(b.shape, **hyper) for b in B]

        def step(t, grads):
            lr = cfg.lr_at(t)
            for l, g in enumerate(grads):
                sa[l], da = adam_step(sa[l], g @ B[l])
                sb[l], db = adam_step(sb[l], g.T @ A[l])
                new_a, new_b = A[l] - lr * da, B[l] - lr * db
                net.add_to_layer(l, new_a @ new_b.T - A[l] @ B[l].T)
                A[l], B[l] = new_a, new_b

    elif kind == "galore":
        ranks = [min(cfg.rank, m, n) for m, n in shapes]
        bases = [None] * len(shapes)
        states = [SubspaceOptState.zeros((k, n), **hyper) for (_, n), k in zip(shapes, ranks)]

        def step(t, grads):
            lr = cfg.lr_at(t)
            for l, g in enumerate(grads):
                if t % cfg.check_freq == 0:
                    bases[l], low = galore_project(g, ranks[l])
                    if l == 0:
                        loop.hist.refresh_steps.append(t)
                else:
                    low = bases[l].T @ g
                states[l], direction = adam_step(states[l], low)
                net.add_to_layer(l, -lr * (bases[l] @ direction))

    else:
        raise ContractError(f"unknown baseline {kind!r}")

    return loop.run(step)
