"""Subspace fine-tuning with learned sparse projectors.

Every step, each layer's gradient is compressed to d x d, Adam runs on the
compressed gradient, and the resulting direction is decompressed and applied
to the full weight. Every ``check_freq`` steps a gradient on a fresh random
subsample decides, per layer, whether the current projectors are still good
enough (relative bias <= alpha) or must be re-learned.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalAbort
from .projector import (FitConfig, ProjectorPair, compress, decompress, fit,
                        identity_pair, init_pair, relative_bias)
from .subspace_opt import SubspaceOptState, adam_step, reproject_state
from .numerics import spectral_norm
from .toy_models import (Batch, DenseNet, SyntheticTask, backward, evaluate,
                         example_gradient_factors, forward)

log = logging.getLogger(__name__)

REFRESH_MODES = ("fit", "random", "frozen")
DIVERGENCE_LOSS = 1e6


@dataclass
class TrainConfig:
    d: int = 32
    r: int = 4
    lr: float = 1e-3
    check_freq: int = 100
    alpha: float = 0.5
    chernoff_beta: float = 0.5
    delta: float = 0.1
    gamma_bound: float | None = None  # None: running max of per-example gradient norms
    total_steps: int = 2000
    fit: FitConfig = field(default_factory=FitConfig)
    seed: int = 0
    batch_size: int = 32
    eval_every: int = 100
    calib_size: int = 8
    refresh_mode: str = "fit"
    second_moment: str = "entrywise"
    lr_schedule: str = "constant"
    identity_projectors: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rank: int = 4  # lora / galore baselines

    def __post_init__(self):
        if isinstance(self.fit, dict):
            self.fit = FitConfig(**self.fit)
        if not (0.0 < self.alpha <= 1.0):
            raise ContractError("alpha must lie in (0, 1]")
        if self.check_freq < 1:
            raise ContractError("check_freq must be >= 1")
        if not (1 <= self.r <= self.d):
            raise ContractError("need 1 <= r <= d")
        if self.total_steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ContractError("total_steps >= 0, batch_size >= 1, eval_every >= 1 required")
        if self.refresh_mode not in REFRESH_MODES:
            raise ContractError(f"refresh_mode must be one of {REFRESH_MODES}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError("lr_schedule must be 'constant' or 'cosine'")
        if not (0 < self.delta < 1) or self.chernoff_beta <= 0:
            raise ContractError("need delta in (0, 1) and chernoff_beta > 0")

    def lr_at(self, t):
        if self.lr_schedule == "cosine" and self.total_steps:
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * t / self.total_steps))
        return self.lr


@dataclass
class CheckRecord:
    step: int
    layer: int
    relative_bias: float
    refreshed: bool
    subsample_size: int
    fit_bias: float = float("nan")
    fit_steps: int = 0
    timed_out: bool = False


@dataclass
class TrainHistory:
    method: str = "lsp"
    total_steps: int = 0
    train_loss: list = field(default_factory=list)
    eval_loss: dict = field(default_factory=dict)  # step -> loss
    checks: list = field(default_factory=list)
    refresh_steps: list = field(default_factory=list)
    ms_per_step: list = field(default_factory=list)
    periods: list = field(default_factory=list)  # per layer: [(pair, S_accum), ...]
    initial_weights: list = field(default_factory=list)
    final_weights: list = field(default_factory=list)
    aborted: str | None = None

    @property
    def final_eval_loss(self):
        if not self.eval_loss:
            return float("nan")
        return self.eval_loss[max(self.eval_loss)]

    @property
    def final_train_loss(self):
        return self.train_loss[-1] if self.train_loss else float("nan")

    def check_bias_by_step(self):
        out = {}
        for c in self.checks:
            out.setdefault(c.step, []).append(c)
        return out

    def to_csv(self, path, include_timing=False):
        """One row per step; empty cells where a quantity was not measured."""
        checks = self.check_bias_by_step()
        nan = float("nan")
        with open(path, "w", newline="\n") as fh:
            fh.write("step,train_loss,eval_loss,bias,refreshed,ms_per_step\n")
            for t, loss in enumerate(self.train_loss):
                ev = self.eval_loss.get(t, nan)
                cs = checks.get(t, [])
                bias = float(np.mean([c.relative_bias for c in cs])) if cs else nan
                refreshed = sum(c.refreshed for c in cs)
                ms = self.ms_per_step[t] if include_timing and t < len(self.ms_per_step) else nan
                fh.write(f"{t},{loss!r},{ev!r},{bias!r},{refreshed},{ms!r}\n")

    def checks_to_csv(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write("step,layer,relative_bias,refreshed,subsample_size,fit_bias,fit_steps,timed_out\n")
            for c in self.checks:
                fh.write(f"{c.step},{c.layer},{c.relative_bias!r},{int(c.refreshed)},"
                         f"{c.subsample_size},{c.fit_bias!r},{c.fit_steps},{int(c.timed_out)}\n")


def subsample_size(gamma_bound, chernoff_beta, m, n, total_steps, delta) -> int:
    """Subsample size ceil(8 gamma^2 / (3 beta^2) * ln((m + n) T / delta))."""
    if min(gamma_bound, chernoff_beta, m, n, total_steps) <= 0:
        raise ContractError("gamma, beta, m, n and total_steps must be positive")
    if not (0 < delta < 1):
        raise ContractError("delta must lie in (0, 1)")
    c = 8.0 * gamma_bound ** 2 / (3.0 * chernoff_beta ** 2)
    return int(math.ceil(c * math.log((m + n) * total_steps / delta)))


@dataclass
class ChernoffResult:
    size: int
    gamma: float
    deviations: np.ndarray  # (trials, layers) spectral norms of subsample - full gradient
    beta: float

    @property
    def holds(self):
        """Per trial: every layer's deviation is at most beta."""
        return np.all(self.deviations <= self.beta, axis=1)

    @property
    def fraction(self):
        return float(np.mean(self.holds))


def chernoff_trials(net: DenseNet, train: Batch, cfg: TrainConfig, trials=200, seed=0,
                    gamma=None) -> ChernoffResult:
    """Monte-Carlo check of the subsample bound on ``net``'s gradients.

    Each trial draws ``subsample_size`` examples i.i.d. from ``train`` and
    measures ||g_S - g||_2 per layer, g being the full-data gradient. Drawing
    with replacement is a multinomial reweighting of the per-example rank-one
    gradients, so a trial costs one weighted product per layer. ``gamma``
    defaults to ``cfg.gamma_bound`` or else the largest per-example gradient
    norm over ``train``.
    """
    factors = example_gradient_factors(net, train)
    n_ex = len(train)
    full = [h.T @ d / n_ex for h, d in factors]
    if gamma is None:
        gamma = cfg.gamma_bound
    if gamma is None:
        gamma = max(float(np.max(np.linalg.norm(h, axis=1) * np.linalg.norm(d, axis=1)))
                    for h, d in factors)
    size = max(subsample_size(gamma, cfg.chernoff_beta, m, n, max(cfg.total_steps, 1), cfg.delta)
               for m, n in net.shapes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 8]))
    dev = np.zeros((trials, len(factors)))
    for k in range(trials):
        w = rng.multinomial(size, np.full(n_ex, 1.0 / n_ex)) / size
        for l, (h, d) in enumerate(factors):
            dev[k, l] = spectral_norm(h.T @ (w[:, None] * d) - full[l])
    return ChernoffResult(size, float(gamma), dev, cfg.chernoff_beta)


@dataclass
class MaybeUpdateResult:
    pair: ProjectorPair
    state: SubspaceOptState
    refreshed: bool
    relative_bias: float
    fit_report: object = None


def maybe_update(grad_sub, pair: ProjectorPair, state: SubspaceOptState, cfg: TrainConfig,
                 calibration=(), seed=0, step=0) -> MaybeUpdateResult:
    """Keep ``pair`` if its relative bias on ``grad_sub`` is at most alpha, else re-learn it.

    The new pair is fitted on ``grad_sub`` plus the optional ``calibration``
    gradients and the Adam moments are carried over into the new subspace.
    A fit that hits its step budget is still adopted (``fit_report.timed_out``).
    """
    g = np.asarray(grad_sub, dtype=np.float64)
    if not np.any(g):
        log.info("step %d: zero subsample gradient, skipping projector check", step)
        return MaybeUpdateResult(pair, state, False, float("nan"))
    bias = relative_bias(pair, g)
    if bias <= cfg.alpha or cfg.refresh_mode == "frozen":
        return MaybeUpdateResult(pair, state, False, bias)
    new = init_pair(pair.m, pair.n, pair.d, pair.P.r, seed, birth_step=step)
    report = None
    if cfg.refresh_mode == "fit":
        targets = [g] + [c for c in calibration if np.any(c)]
        fcfg = dataclasses.replace(cfg.fit, alpha=cfg.alpha)
        new, report = fit(new, targets, fcfg)
        new = dataclasses.replace(new, birth_step=step)
    state = reproject_state(state, pair, new, cfg.second_moment)
    return MaybeUpdateResult(new, state, True, bias, report)


def effective_update(periods) -> np.ndarray:
    """Sum of decompressed per-period subspace updates, ``sum_k P_k S_k Q_k^T``."""
    if periods is None:
        raise ContractError("no subspace update log available")
    periods = list(periods)
    if not periods:
        raise ContractError("no subspace update log available")
    pair0 = periods[0][0]
    total = np.zeros((pair0.m, pair0.n))
    for pair, s in periods:
        total += decompress(pair, s)
    return total


# -- training loop skeleton shared with the baselines -----------------------

class _Loop:
    """Minibatch sampling, evaluation and history bookkeeping."""

    def __init__(self, net: DenseNet, data, cfg: TrainConfig, method):
        self.net = net
        self.train, self.test = data[0], data[1]
        self.cfg = cfg
        self.hist = TrainHistory(method=method, total_steps=cfg.total_steps)
        self.hist.initial_weights = [w.copy() for w in net.weights]
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))

    def sample(self):
        idx = self.rng.integers(0, len(self.train), size=self.cfg.batch_size)
        return self.train.take(idx)

    def run(self, step_fn):
        cfg, hist = self.cfg, self.hist
        for t in range(cfg.total_steps):
            t0 = time.perf_counter()
            loss, cache = forward(self.net, self.sample())
            if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
                hist.aborted = f"divergence at step {t}: loss={loss!r}"
                hist.final_weights = [w.copy() for w in self.net.weights]
                raise NumericalAbort(hist.aborted, partial=hist)
            grads = backward(self.net, cache)
            hist.train_loss.append(loss)
            step_fn(t, grads)
            if (t + 1) % cfg.eval_every == 0 or t == cfg.total_steps - 1:
                hist.eval_loss[t] = evaluate(self.net, self.test)
            hist.ms_per_step.append(1e3 * (time.perf_counter() - t0))
        hist.final_weights = [w.copy() for w in self.net.weights]
        return hist


def _task_data(task):
    from .toy_models import make_task
    if isinstance(task, SyntheticTask):
        return make_task(task)
    return task


def layer_dims(net: DenseNet, cfg: TrainConfig):
    """Per-layer (d, r), with d clipped to the layer's smaller side."""
    out = []
    for m, n in net.shapes:
        d = min(cfg.d, m, n)
        out.append((d, min(cfg.r, d)))
    return out


def train_lsp(net: DenseNet, task, cfg: TrainConfig) -> TrainHistory:
    """Train ``net`` in place with compressed subspace Adam updates.

    ``task`` is a :class:`SyntheticTask` or a ``(train, eval, ...)`` tuple.
    """
    data = _task_data(task)
    loop = _Loop(net, data, cfg, "lsp")
    hist = loop.hist
    n_layers = len(net.weights)
    dims = layer_dims(net, cfg)
    if cfg.identity_projectors:
        for (m, n), (d, _) in zip(net.shapes, dims):
            if not (m == n == d):
                raise ContractError("identity projectors need d == m == n on every layer")
        pairs = [identity_pair(m) for m, _ in net.shapes]
    else:
        pairs = [init_pair(m, n, d, r, np.random.SeedSequence([cfg.seed, 3, l, 0]))
                 for l, ((m, n), (d, r)) in enumerate(zip(net.shapes, dims))]
    hyper = dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    states = [SubspaceOptState.zeros(d, **hyper) for d, _ in dims]
    hist.periods = [[(p, np.zeros((p.d, p.d)))] for p in pairs]
    calib = [[] for _ in range(n_layers)]
    gamma = {"value": cfg.gamma_bound}
    n_checks = [0]
    train = data[0]

    def step(t, grads):
        lr = cfg.lr_at(t)
        for l, g in enumerate(grads):
            s, direction = adam_step(states[l], compress(pairs[l], g))
            states[l] = s
            net.add_to_layer(l, -lr * decompress(pairs[l], direction))
            hist.periods[l][-1][1][...] -= lr * direction
            if cfg.calib_size > 1:
                calib[l].append(g)
                del calib[l][:-(cfg.calib_size - 1)]
        if t % cfg.check_freq == 0:
            _check(t, grads)

    def _check(t, grads):
        k = n_checks[0]
        n_checks[0] += 1
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, k]))
        if cfg.gamma_bound is None and gamma["value"] is None:
            # first estimate from a probe batch; later checks use the running max
            probe = train.take(rng.integers(0, len(train), size=cfg.batch_size))
            _, cache = forward(net, probe)
            _, norms = backward(net, cache, per_sample_norms=True)
            gamma["value"] = float(max(np.max(x) for x in norms))
        size = max(subsample_size(gamma["value"], cfg.chernoff_beta, m, n,
                                  max(cfg.total_steps, 1), cfg.delta) for m, n in net.shapes)
        size = min(size, len(train))
        sub = train.take(rng.choice(len(train), size=size, replace=False))
        _, cache = forward(net, sub)
        sub_grads, norms = backward(net, cache, per_sample_norms=True)
        if cfg.gamma_bound is None:
            gamma["value"] = max(gamma["value"], float(max(np.max(x) for x in norms)))
        refreshed_any = False
        for l in range(n_layers):
            res = maybe_update(sub_grads[l], pairs[l], states[l], cfg, calib[l],
                               seed=np.random.SeedSequence([cfg.seed, 3, l, k + 1]), step=t)
            rec = CheckRecord(t, l, res.relative_bias, res.refreshed, size)
            if res.fit_report is not None:
                rec.fit_bias = res.fit_report.final_relative_bias
                rec.fit_steps = res.fit_report.steps
                rec.timed_out = res.fit_report.timed_out
            hist.checks.append(rec)
            if res.refreshed:
                refreshed_any = True
                pairs[l], states[l] = res.pair, res.state
                hist.periods[l].append((res.pair, np.zeros((res.pair.d, res.pair.d))))
        if refreshed_any:
            hist.refresh_steps.append(t)

    return loop.run(step)
