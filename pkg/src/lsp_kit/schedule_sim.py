"""Discrete-event model of CPU-offload training pipelines.

Four resources: device compute ("gpu"), host compute ("cpu") and the two
PCIe directions ("d2h", "h2d"). With ``duplex`` off both directions share a
single "link" resource. Every task is non-preemptive; whenever a resource
is idle it starts the highest-priority ready task. Ties are broken by task
creation order, so a trace is a pure function of (profile, policy, options).
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ContractError

POLICIES = ("swap_only", "zero", "zero_delayed", "lsp_layerwise")
RESOURCES = ("gpu", "cpu", "d2h", "h2d", "link")
PER_LAYER = ("fwd_gpu", "bwd_gpu", "upd_gpu", "fwd_cpu", "bwd_cpu", "upd_cpu",
             "grad_bytes", "delta_bytes")
UNITS = {"time": "s", "size": "bytes", "bandwidth": "bytes/s"}


@dataclass
class TimingProfile:
    """Per-layer costs of one training iteration. Scalars broadcast to every layer."""
    n_layers: int
    fwd_gpu: object
    bwd_gpu: object
    upd_gpu: object
    fwd_cpu: object
    bwd_cpu: object
    upd_cpu: object
    grad_bytes: object
    delta_bytes: object
    bandwidth_d2h: float
    bandwidth_h2d: float
    duplex: bool = True
    mem_total: float = 0.0
    mem_gpu: float = 0.0
    bytes_per_scalar: int = 8
    name: str = ""

    def __post_init__(self):
        if int(self.n_layers) != self.n_layers or self.n_layers < 1:
            raise ContractError("n_layers must be a positive integer")
        self.n_layers = int(self.n_layers)
        for k in PER_LAYER:
            v = np.asarray(getattr(self, k), dtype=np.float64)
            if v.ndim == 0:
                v = np.full(self.n_layers, float(v))
            if v.shape != (self.n_layers,):
                raise ContractError(f"{k} must be a scalar or a list of {self.n_layers} values")
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ContractError(f"{k} must be finite and >= 0")
            setattr(self, k, v)
        for k in ("bandwidth_d2h", "bandwidth_h2d"):
            v = float(getattr(self, k))
            if not (v > 0 and math.isfinite(v)):
                raise ContractError(f"{k} must be a positive finite rate (bytes/s)")
            setattr(self, k, v)
        if self.mem_total < 0 or self.mem_gpu < 0:
            raise ContractError("memory sizes must be >= 0")
        if self.bytes_per_scalar < 1:
            raise ContractError("bytes_per_scalar must be >= 1")
        self.duplex = bool(self.duplex)

    # aggregates
    @property
    def t_fwd(self):
        return float(self.fwd_gpu.sum())

    @property
    def t_bwd(self):
        return float(self.bwd_gpu.sum())

    @property
    def t_upd(self):
        return float(self.upd_cpu.sum())

    @property
    def t_apply(self):
        return float(self.upd_gpu.sum())

    @property
    def t_d2h(self):
        return float(self.grad_bytes.sum() / self.bandwidth_d2h)

    @property
    def t_h2d(self):
        return float(self.delta_bytes.sum() / self.bandwidth_h2d)

    def to_json(self):
        out = {"units": dict(UNITS)}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    def with_lsp_payload(self, d):
        """Copy with per-layer transfers shrunk to ``2 d^2`` scalars each way.

        The host update time shrinks in proportion to the payload (Adam cost is
        linear in the number of state entries). Layers that move no gradient
        keep a zero payload.
        """
        if int(d) != d or d < 1:
            raise ContractError("d must be a positive integer")
        has = self.grad_bytes > 0
        payload = np.where(has, 2.0 * d * d * self.bytes_per_scalar, 0.0)
        scale = payload / np.where(has, self.grad_bytes, 1.0)
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(grad_bytes=payload, delta_bytes=payload,
                  upd_cpu=self.upd_cpu * scale)
        return TimingProfile(**kw)


def profile_from_json(doc) -> TimingProfile:
    if not isinstance(doc, dict):
        raise ContractError("profile must be a JSON object")
    units = doc.get("units")
    if units != UNITS:
        raise ContractError(f"profile 'units' must be exactly {UNITS}")
    known = {f.name for f in fields(TimingProfile)}
    body = {k: v for k, v in doc.items() if k != "units"}
    unknown = sorted(set(body) - known)
    if unknown:
        raise ContractError(f"unknown profile key {unknown[0]!r}")
    try:
        return TimingProfile(**body)
    except TypeError as exc:
        raise ContractError(f"bad profile: {exc}") from None


def load_profile(path) -> TimingProfile:
    with open(path) as fh:
        return profile_from_json(json.load(fh))


def bundled_profile(name) -> TimingProfile:
    """Profiles shipped with the package: ``llama7b-4090`` and ``gpt2-1.3b-a1000``."""
    from importlib import resources
    fname = name if name.endswith(".json") else name + ".json"
    try:
        text = resources.files("lsp_kit").joinpath("profiles").joinpath(fname).read_text()
    except FileNotFoundError:
        raise ContractError(f"no bundled profile named {name!r}") from None
    return profile_from_json(json.loads(text))


# -- traces -----------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    resource: str
    label: str
    layer: int
    start: float
    end: float
    iteration: int = 0
    nbytes: float = 0.0


@dataclass
class ScheduleTrace:
    events: list
    iter_time: float
    policy: str = ""
    iters: int = 1
    makespan: float = 0.0
    iteration_ends: list = field(default_factory=list)

    def busy(self, resource, label=None):
        return sum(e.end - e.start for e in self.events
                   if e.resource == resource and (label is None or e.label == label))

    def resources(self):
        return sorted({e.resource for e in self.events}, key=RESOURCES.index)

    def utilization(self):
        span = self.makespan or 1.0
        return {r: self.busy(r) / span for r in self.resources()}

    def traffic_bytes(self):
        """Bytes moved over the links, per iteration."""
        return float(sum(e.nbytes for e in self.events if e.resource in ("d2h", "h2d", "link"))) / self.iters

    def check(self, tol=1e-12):
        """Raise if two events overlap on one resource or an event runs backwards."""
        by_res = {}
        for e in self.events:
            if e.end < e.start:
                raise AssertionError(f"event ends before it starts: {e}")
            by_res.setdefault(e.resource, []).append(e)
        for r, evs in by_res.items():
            evs.sort(key=lambda e: (e.start, e.end))
            for a, b in zip(evs, evs[1:]):
                if b.start < a.end - tol:
                    raise AssertionError(f"overlap on {r}: {a} and {b}")

    def to_csv(self, path, summary=None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["resource", "label", "layer", "start", "end", "iteration", "bytes"])
            for e in self.events:
                w.writerow([e.resource, e.label, e.layer, repr(e.start), repr(e.end),
                            e.iteration, repr(float(e.nbytes))])
            if summary is not None:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in summary.items()) + "\n")


# -- scheduling engine ------------------------------------------------------

@dataclass
class _Task:
    resource: str
    label: str
    layer: int
    iteration: int
    dur: float
    deps: list
    nbytes: float = 0.0
    lcfs: bool = False


class _Graph:
    def __init__(self, duplex):
        self.tasks = []
        self.duplex = duplex

    def add(self, resource, label, layer, iteration, dur, deps=(), nbytes=0.0, lcfs=False):
        if not self.duplex and resource in ("d2h", "h2d"):
            resource = "link"
        self.tasks.append(_Task(resource, label, layer, iteration, float(dur),
                                [d for d in deps if d is not None], nbytes, lcfs))
        return len(self.tasks) - 1

    def run(self):
        """List-schedule every task; returns ``(start, end)`` arrays indexed by task id."""
        n = len(self.tasks)
        waiting = [len(t.deps) for t in self.tasks]
        children = [[] for _ in range(n)]
        for i, t in enumerate(self.tasks):
            for d in t.deps:
                children[d].append(i)
        ready_at = [0.0] * n
        start, end = [math.nan] * n, [math.nan] * n
        pools = {}  # resource -> heap of (priority key, task id)
        busy_until = {}
        running = []  # heap of (end, task id)

        def push_ready(i):
            t = self.tasks[i]
            key = (0, -ready_at[i], -i) if t.lcfs else (1, ready_at[i], i)
            heapq.heappush(pools.setdefault(t.resource, []), (key, i))

        for i in range(n):
            if waiting[i] == 0:
                push_ready(i)
        now, done = 0.0, 0
        while done < n:
            for res in sorted(pools, key=RESOURCES.index):
                pool = pools[res]
                if pool and busy_until.get(res, 0.0) <= now:
                    _, i = heapq.heappop(pool)
                    start[i] = now
                    end[i] = now + self.tasks[i].dur
                    busy_until[res] = end[i]
                    heapq.heappush(running, (end[i], i))
            if not running:
                raise ContractError("task graph has a dependency cycle")
            now = running[0][0]
            while running and running[0][0] <= now:
                _, i = heapq.heappop(running)
                done += 1
                for c in children[i]:
                    waiting[c] -= 1
                    ready_at[c] = max(ready_at[c], end[i])
                    if waiting[c] == 0:
                        push_ready(c)
        return start, end


# -- policies ---------------------------------------------------------------

@dataclass
class SimOptions:
    d: int = None  # subspace width for lsp_layerwise payloads
    mode: str = "auto"  # lsp_layerwise: auto | fcfs | lcfs
    bucket: int = 1  # zero / zero_delayed: layers per transfer bucket
    duplex: bool = None  # override the profile's flag

    def __post_init__(self):
        if self.mode not in ("auto", "fcfs", "lcfs"):
            raise ContractError(f"unknown schedule mode {self.mode!r}")
        if int(self.bucket) != self.bucket or self.bucket < 1:
            raise ContractError("bucket must be a positive integer")


def _xfer(nbytes, bw):
    return nbytes / bw


def _buckets(order, size):
    return [order[i:i + size] for i in range(0, len(order), size)]


def _build_zero(g, p, iters, opt, delayed):
    L = p.n_layers
    deep_first = list(range(L - 1, -1, -1))
    apply_prev = [[None] * L, [None] * L]  # APPLY ids of iterations t-1 and t-2
    last_bwd = last_upd = None  # program order across iterations
    for t in range(iters):
        if delayed:
            gate = apply_prev[1]
        else:
            gate = [a for a in apply_prev[0] if a is not None]
        fwd, prev = [], last_bwd
        for l in range(L):
            deps = [prev] + ([gate[l]] if delayed else gate)
            prev = g.add("gpu", "fwd", l, t, p.fwd_gpu[l], deps)
            fwd.append(prev)
        bwd = [None] * L
        prev = fwd[-1]
        for l in deep_first:
            prev = bwd[l] = g.add("gpu", "bwd", l, t, p.bwd_gpu[l], [prev])
        last_bwd = prev
        offs = []
        for bk in _buckets(deep_first, opt.bucket):
            nb = float(sum(p.grad_bytes[l] for l in bk))
            offs.append(g.add("d2h", "offload", bk[-1], t, _xfer(nb, p.bandwidth_d2h),
                              [bwd[l] for l in bk] + offs[-1:], nb))
        upd = [None] * L
        prev = last_upd
        for l in deep_first:  # host update starts once every gradient has arrived
            prev = upd[l] = g.add("cpu", "upd", l, t, p.upd_cpu[l], offs + [prev])
        last_upd = prev
        apply = [None] * L
        for bk in _buckets(deep_first, opt.bucket):
            nb = float(sum(p.delta_bytes[l] for l in bk))
            up = g.add("h2d", "upload", bk[-1], t, _xfer(nb, p.bandwidth_h2d),
                       [upd[l] for l in bk], nb)
            for l in bk:
                apply[l] = g.add("gpu", "apply", l, t, p.upd_gpu[l], [up])
        apply_prev = [apply, apply_prev[0]]


def _build_swap(g, p, iters, opt):
    L = p.n_layers
    swap = max(p.mem_total - p.mem_gpu, 0.0) / L
    out_prev = [None] * L
    prev = None
    for t in range(iters):
        fwd = []
        for l in range(L):
            sw = g.add("h2d", "swap_in", l, t, _xfer(swap, p.bandwidth_h2d), [out_prev[l]], swap)
            prev = g.add("gpu", "fwd", l, t, p.fwd_gpu[l], [prev, sw])
            fwd.append(prev)
        for l in range(L - 1, -1, -1):
            prev = g.add("gpu", "bwd", l, t, p.bwd_gpu[l], [prev])
            prev = g.add("gpu", "upd", l, t, p.upd_gpu[l], [prev])
            out_prev[l] = g.add("d2h", "swap_out", l, t, _xfer(swap, p.bandwidth_d2h), [prev], swap)


def transition_layer(profile: TimingProfile, d=None) -> int:
    """Deepest layer whose pipeline can still block the next forward pass.

    ``L - (T_bwd - (o + h + u)) / max(o, h, u)`` from mean per-layer offload,
    upload and host-update times, clamped to [0, L] and floored. With ``d``
    the LSP payload sizes are used.
    """
    p = profile.with_lsp_payload(d) if d is not None else profile
    L = p.n_layers
    o = float(np.mean(p.grad_bytes)) / p.bandwidth_d2h
    h = float(np.mean(p.delta_bytes)) / p.bandwidth_h2d
    u = float(np.mean(p.upd_cpu))
    worst = max(o, h, u)
    slack = p.t_bwd - (o + h + u)
    if worst <= 0:
        return 0 if slack > 0 else L
    return int(math.floor(min(max(L - slack / worst, 0.0), L)))


def _build_lsp(g, p, iters, opt, tl):
    L = p.n_layers
    apply_prev = [None] * L
    prev = None
    for t in range(iters):
        for l in range(L):
            prev = g.add("gpu", "fwd", l, t, p.fwd_gpu[l], [prev, apply_prev[l]])
        for l in range(L - 1, -1, -1):
            if opt.mode == "auto":
                lcfs = l <= tl and tl < L
            else:
                lcfs = opt.mode == "lcfs"
            prev = g.add("gpu", "bwd", l, t, p.bwd_gpu[l], [prev])
            off = g.add("d2h", "offload", l, t, _xfer(p.grad_bytes[l], p.bandwidth_d2h), [prev],
                        p.grad_bytes[l], lcfs)
            upd = g.add("cpu", "upd", l, t, p.upd_cpu[l], [off], 0.0, lcfs)
            up = g.add("h2d", "upload", l, t, _xfer(p.delta_bytes[l], p.bandwidth_h2d), [upd],
                       p.delta_bytes[l], lcfs)
            apply_prev[l] = g.add("gpu", "apply", l, t, p.upd_gpu[l], [up], 0.0, lcfs)


def _effective(profile, opt):
    if opt.duplex is None or opt.duplex == profile.duplex:
        return profile
    kw = {f.name: getattr(profile, f.name) for f in fields(profile)}
    kw["duplex"] = opt.duplex
    return TimingProfile(**kw)


def simulate(profile: TimingProfile, policy, iters=1, options: SimOptions = None) -> ScheduleTrace:
    """Run ``iters`` iterations of ``policy``; see the module docstring for the model.

    ``iter_time`` is the makespan when ``iters == 1`` and otherwise the mean
    spacing between consecutive iteration completions after the first.
    """
    opt = options or SimOptions()
    if policy not in POLICIES:
        raise ContractError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if int(iters) != iters or iters < 1:
        raise ContractError("iters must be a positive integer")
    profile = _effective(profile, opt)
    g = _Graph(profile.duplex)
    if policy in ("zero", "zero_delayed"):
        _build_zero(g, profile, iters, opt, policy == "zero_delayed")
    elif policy == "swap_only":
        _build_swap(g, profile, iters, opt)
    else:
        if opt.d is None:
            raise ContractError("lsp_layerwise needs a subspace width d")
        p = profile.with_lsp_payload(opt.d)
        _build_lsp(g, p, iters, opt, transition_layer(p))
    start, end = g.run()
    events = [Event(t.resource, t.label, t.layer, start[i], end[i], t.iteration, t.nbytes)
              for i, t in enumerate(g.tasks)]
    events.sort(key=lambda e: (e.start, RESOURCES.index(e.resource), e.layer, e.end))
    ends = [0.0] * iters
    for e in events:
        ends[e.iteration] = max(ends[e.iteration], e.end)
    makespan = max(ends)
    it = makespan if iters == 1 else (ends[-1] - ends[0]) / (iters - 1)
    return ScheduleTrace(events, it, policy, iters, makespan, ends)


# -- closed forms -----------------------------------------------------------

def closed_form_zero(p: TimingProfile) -> float:
    """T_fwd + max(T_bwd, T_d2h) + max(T_upd, T_h2d)."""
    return p.t_fwd + max(p.t_bwd, p.t_d2h) + max(p.t_upd, p.t_h2d)


def closed_form_zero_delayed(p: TimingProfile) -> float:
    """Steady-state period when the host update of step t-1 overlaps step t.

    Forward of step t+1 waits on the deltas of step t-1, so a full non-delayed
    iteration is spread over two periods; each resource's total is also a bound.
    """
    return max(p.t_upd, p.t_d2h, p.t_h2d, p.t_fwd + p.t_bwd + p.t_apply,
               closed_form_zero(p) / 2.0)


def closed_form_lsp(p: TimingProfile, d) -> float:
    """max(T_fwd + T_bwd + T_apply + t_comm^layer + t_upd^layer, T_d2h, T_h2d, T_upd).

    Per-layer terms are those of layer 0, whose pipeline finishes last. Without
    a duplex link the two directions add up.
    """
    q = p.with_lsp_payload(d)
    layer = (q.grad_bytes[0] / q.bandwidth_d2h + q.delta_bytes[0] / q.bandwidth_h2d
             + q.upd_cpu[0])
    links = [q.t_d2h, q.t_h2d] if q.duplex else [q.t_d2h + q.t_h2d]
    return max(q.t_fwd + q.t_bwd + q.t_apply + layer, *links, q.t_upd)


def closed_form(p: TimingProfile, policy, options: SimOptions = None):
    opt = options or SimOptions()
    p = _effective(p, opt)
    if policy == "zero":
        return closed_form_zero(p)
    if policy == "zero_delayed":
        return closed_form_zero_delayed(p)
    if policy == "lsp_layerwise":
        return closed_form_lsp(p, opt.d)
    return closed_form_swap(p)


def closed_form_swap(p: TimingProfile) -> float:
    """max(device compute, link time for M_tot - M_gpu each way)."""
    s = min_communication(p)
    inn, out = s / p.bandwidth_h2d, s / p.bandwidth_d2h
    link = max(inn, out) if p.duplex else inn + out
    return max(p.t_fwd + p.t_bwd + p.t_apply, link)


def min_communication(p: TimingProfile) -> float:
    """Bytes that must cross the link per iteration when the device does all compute."""
    if p.mem_total < p.mem_gpu:
        raise ContractError("mem_total must be >= mem_gpu")
    return float(p.mem_total - p.mem_gpu)


def random_profile(rng, n_layers=(48, 128), duplex=True) -> TimingProfile:
    """A random offload profile with uniform per-layer costs.

    Ratios are drawn log-uniformly around the two bundled profiles: forward
    time is 0.03 to 1 times the per-layer gradient transfer, backward is 1.5
    to 2.5 times forward, host update 0.1 to 10 times the transfer, and the
    on-device delta apply 1% to 5% of the transfer (device memory is much
    faster than the link).
    """
    L = int(rng.integers(n_layers[0], n_layers[1] + 1))

    def lu(lo, hi):
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    grad = lu(1e7, 1e9)
    bw_d2h, bw_h2d = lu(8e9, 25e9), lu(8e9, 25e9)
    xfer = grad / bw_d2h
    fwd = xfer * lu(0.03, 1.0)
    return TimingProfile(
        n_layers=L, fwd_gpu=fwd, bwd_gpu=fwd * rng.uniform(1.5, 2.5), upd_gpu=xfer * lu(0.01, 0.05),
        fwd_cpu=fwd * 100.0, bwd_cpu=fwd * 200.0, upd_cpu=xfer * lu(0.1, 10.0),
        grad_bytes=grad, delta_bytes=grad, bandwidth_d2h=bw_d2h, bandwidth_h2d=bw_h2d,
        duplex=duplex, mem_total=grad * L * 4.5, mem_gpu=grad * L * 1.7, bytes_per_scalar=8)


def random_lsp_width(rng, profile, lo=0.01, hi=0.5):
    """A subspace width whose payload is a random fraction of the gradient."""
    frac = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return max(1, int(math.sqrt(frac * float(profile.grad_bytes[0]) / (2 * profile.bytes_per_scalar))))


def summary(trace: ScheduleTrace, profile: TimingProfile, options: SimOptions = None):
    """Flat dict of the headline numbers for one trace."""
    cf = closed_form(profile, trace.policy, options)
    out = {"policy": trace.policy, "iters": trace.iters, "iter_time": trace.iter_time,
           "closed_form": cf,
           "relative_gap": abs(trace.iter_time - cf) / trace.iter_time if trace.iter_time else 0.0}
    if trace.policy == "zero":
        out["closed_form_zero"] = cf
    if trace.policy == "lsp_layerwise":
        out["transition_layer"] = transition_layer(profile, options.d)
    for r in trace.resources():
        out[f"busy_{r}"] = trace.busy(r) / trace.iters
        out[f"util_{r}"] = trace.utilization()[r]
    out["traffic_bytes"] = trace.traffic_bytes()
    out["min_communication"] = min_communication(profile)
    return out
