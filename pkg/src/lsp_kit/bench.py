"""Estimation-bias bench: fitted sparse projectors vs random ones vs GaLore."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field

import numpy as np

from .baselines import galore_basis, galore_rank_for_memory, memory_estimate
from .errors import ContractError, DegenerateInputError
from .projector import FitConfig, estimation_bias, fit, identity_pair, init_pair
from .toy_models import SyntheticTask, init_net, loss_and_grads, make_task
from .trainer import TrainConfig


@dataclass
class GradientCorpus:
    """Per-layer calibration and held-out minibatch gradients at one checkpoint."""
    calib: list  # calib[layer] -> list of (m, n) arrays
    heldout: list

    @property
    def n_layers(self):
        return len(self.calib)

    def shapes(self):
        return [c[0].shape for c in self.calib]


def gradient_corpus(task: SyntheticTask, seed=0, warmup_steps=200, lr=3e-3,
                    n_calib=8, n_heldout=16, batch_size=32) -> GradientCorpus:
    """Train a fresh net for ``warmup_steps`` with full Adam, then sample gradients.

    Calibration and held-out gradients come from disjoint minibatch draws.
    """
    from .baselines import train_baseline  # local: baselines imports trainer

    if n_calib < 1 or n_heldout < 1:
        raise ContractError("need at least one calibration and one held-out gradient")
    data = make_task(task)
    net = init_net(task, np.random.SeedSequence([seed, 5]))
    if warmup_steps:
        cfg = TrainConfig(total_steps=warmup_steps, lr=lr, seed=seed, batch_size=batch_size,
                          eval_every=warmup_steps)
        train_baseline("full", net, data, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    train = data[0]

    def draw(k):
        out = [[] for _ in net.weights]
        for _ in range(k):
            _, grads = loss_and_grads(net, train.take(rng.integers(0, len(train), batch_size)))
            for l, g in enumerate(grads):
                out[l].append(g)
        return out

    return GradientCorpus(draw(n_calib), draw(n_heldout))


@dataclass
class BenchConfig:
    ds: list = field(default_factory=lambda: [8, 16, 32, 64])
    rs: list = field(default_factory=lambda: [4])
    galore_ranks: list = field(default_factory=list)  # empty: equal-memory ranks only
    opt_factor: int = 3
    fit: FitConfig = field(default_factory=lambda: FitConfig(alpha=0.05))
    seed: int = 0


@dataclass
class BenchRow:
    method: str
    d: int
    r: int
    extra_memory: int
    train_bias: float
    heldout_bias: float

    FIELDS = ("method", "d", "r", "extra_memory", "train_bias", "heldout_bias")

    def as_list(self):
        return [self.method, self.d, self.r, self.extra_memory,
                repr(float(self.train_bias)), repr(float(self.heldout_bias))]


def _projection_bias(project, g):
    ng = np.linalg.norm(g)
    if ng == 0:
        raise DegenerateInputError("zero gradient in corpus")
    return float(np.linalg.norm(project(g) - g) / ng)


def bench_grid(cfg: BenchConfig, shapes):
    """The (method, d, r) rows ``run_bench`` will produce for these layer shapes."""
    small = min(min(s) for s in shapes)
    grid = []
    if all(m == n for m, n in shapes):
        grid.append(("full", max(m for m, _ in shapes), 1))
    for r in cfg.rs:
        for d in cfg.ds:
            if r <= d <= small:
                grid += [("random", d, r), ("lsp", d, r)]
    ranks = set(cfg.galore_ranks)
    for r in cfg.rs:
        ranks.update(galore_rank_for_memory(m, n, memory_estimate("lsp", m, n, r).extra,
                                            cfg.opt_factor) for m, n in shapes)
    grid += [("galore", k, 0) for k in sorted(ranks) if 1 <= k <= small]
    return grid


def run_bench(corpus: GradientCorpus, cfg: BenchConfig) -> list:
    """One row per grid entry. Biases are medians over every (layer, gradient) in the corpus.

    Projectors are fitted per layer on that layer's calibration gradients;
    GaLore bases are the top left singular vectors of the same gradients.
    """
    if not corpus.calib or not all(corpus.calib) or not all(corpus.heldout):
        raise ContractError("empty gradient corpus")
    shapes = corpus.shapes()
    rows = []
    for method, d, r in bench_grid(cfg, shapes):
        train, held, extra = [], [], 0
        for l, (m, n) in enumerate(shapes):
            if method == "galore":
                u = galore_basis(corpus.calib[l], d)
                project = lambda g, u=u: u @ (u.T @ g)  # noqa: E731
                extra += memory_estimate("galore", m, n, d, cfg.opt_factor).extra
            else:
                if method == "full":
                    pair = identity_pair(m, n)
                else:
                    pair = init_pair(m, n, d, r, np.random.SeedSequence([cfg.seed, 7, l, d, r]))
                    extra += memory_estimate("lsp", m, n, r, cfg.opt_factor).extra
                    if method == "lsp":
                        pair, _ = fit(pair, corpus.calib[l], cfg.fit)
                project = lambda g, p=pair: g + estimation_bias(p, g)  # noqa: E731
            train += [_projection_bias(project, g) for g in corpus.calib[l]]
            held += [_projection_bias(project, g) for g in corpus.heldout[l]]
        rows.append(BenchRow(method, d, r, extra, statistics.median(train),
                             statistics.median(held)))
    return rows


def write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BenchRow.FIELDS)
        for row in rows:
            w.writerow(row.as_list())


def summarize(rows, method="lsp", key="heldout_bias"):
    """``{d: value}`` for the rows of one method."""
    return {row.d: getattr(row, key) for row in rows if row.method == method}
