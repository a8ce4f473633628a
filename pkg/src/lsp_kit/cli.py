"""Command-line entry point: ``lsp-kit {train,fit,bias-bench,sim,compare}``.

Each command reads an optional JSON config, applies flag overrides, validates
everything before doing any work, and writes its artifacts into a fresh
output directory. Exit codes: 0 ok, 2 config error, 3 numeric abort, 4 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .baselines import memory_estimate, train_baseline
from .bench import BenchConfig, gradient_corpus, run_bench, write_rows
from .errors import ConfigError, ContractError, NumericalAbort
from .numerics import save_matrix_csv
from .projector import FitConfig, fit, init_pair, mean_relative_bias, save_projector
from .schedule_sim import (POLICIES, SimOptions, bundled_profile, load_profile, simulate,
                           summary)
from .toy_models import SyntheticTask, init_net, make_task
from .trainer import TrainConfig, train_lsp

log = logging.getLogger("lsp_kit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("train", "fit", "bias-bench", "sim", "compare")
METHODS = ("lsp", "full", "lora", "galore")


# -- config schema ----------------------------------------------------------

@dataclasses.dataclass
class CorpusConfig:
    warmup_steps: int = 200
    lr: float = 3e-3
    n_calib: int = 8
    n_heldout: int = 16
    batch_size: int = 32


@dataclasses.dataclass
class SimConfig:
    profile: str = "llama7b-4090"
    policy: str = "zero"
    iters: int = 1
    d: int | None = None
    mode: str = "auto"
    bucket: int = 1
    duplex: bool | None = None


_TYPES = {"int": (int,), "float": (int, float), "bool": (bool,), "str": (str,), "list": (list,)}
_NESTED = {"fit": FitConfig}


def _check_type(value, annotation, key):
    names = [a.strip() for a in str(annotation).split("|")]
    if value is None and "None" in names:
        return
    for name in names:
        ok = _TYPES.get(name)
        if ok and isinstance(value, ok) and not (isinstance(value, bool) and name in ("int", "float")):
            return
    raise ConfigError(f"key {key!r}: expected {annotation}, got {type(value).__name__}", key)


def build(cls, doc, prefix):
    """Instantiate dataclass ``cls`` from a JSON object, rejecting unknown keys."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"key {prefix!r} must be an object", prefix)
    allowed = {f.name: f for f in dataclasses.fields(cls) if f.name != "seed"}
    kw = {}
    for k, v in doc.items():
        key = f"{prefix}.{k}"
        if k not in allowed:
            raise ConfigError(f"unknown key {key!r}", key)
        if k in _NESTED:
            kw[k] = build(_NESTED[k], v, key)
            continue
        _check_type(v, allowed[k].type, key)
        kw[k] = v
    try:
        return cls(**kw)
    except ContractError as exc:
        raise ConfigError(f"invalid {prefix!r}: {exc}", prefix) from None


_TOP = {
    "train": {"command", "seed", "out", "method", "task", "train", "timing", "plots"},
    "fit": {"command", "seed", "out", "task", "corpus", "layer", "d", "r", "fit"},
    "bias-bench": {"command", "seed", "out", "task", "corpus", "bench"},
    "sim": {"command", "seed", "out", "sim", "plots"},
    "compare": {"command", "seed", "out", "methods", "task", "train", "overrides", "plots"},
}


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _set(doc, dotted, value):
    if value is None:
        return
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"key {p!r} must be an object", p)
    node[parts[-1]] = value


def merge_flags(command, doc, args):
    """Apply command-line overrides to the config document (flags win)."""
    doc = json.loads(json.dumps(doc))  # deep copy
    _set(doc, "seed", args.seed)
    _set(doc, "out", args.out)
    if command in ("train", "compare"):
        _set(doc, "train.d", args.d)
        _set(doc, "train.r", args.r)
        _set(doc, "train.alpha", args.alpha)
        _set(doc, "train.check_freq", args.check_freq)
        if args.identity_proj:
            _set(doc, "train.identity_projectors", True)
        if command == "train":
            _set(doc, "method", args.method)
        elif args.method:
            doc["methods"] = [m.strip() for m in args.method.split(",")]
    elif command == "fit":
        _set(doc, "d", args.d)
        _set(doc, "r", args.r)
        _set(doc, "fit.alpha", args.alpha)
    elif command == "bias-bench":
        if args.d is not None:
            _set(doc, "bench.ds", [args.d])
        if args.r is not None:
            _set(doc, "bench.rs", [args.r])
        _set(doc, "bench.fit.alpha", args.alpha)
    elif command == "sim":
        _set(doc, "sim.profile", args.profile)
        _set(doc, "sim.policy", args.policy)
        _set(doc, "sim.d", args.d)
        _set(doc, "sim.iters", args.iters)
        if args.no_duplex:
            _set(doc, "sim.duplex", False)
    return doc


@dataclasses.dataclass
class Run:
    command: str
    seed: int
    out: str
    doc: dict
    parts: dict


def validate(command, doc) -> Run:
    allowed = _TOP[command]
    for k in doc:
        if k not in allowed:
            raise ConfigError(f"unknown key {k!r}", k)
    if doc.get("command", command) != command:
        raise ConfigError(f"key 'command': config is for {doc['command']!r}, not {command!r}",
                          "command")
    seed = doc.get("seed", 0)
    _check_type(seed, "int", "seed")
    if seed < 0:
        raise ConfigError("seed must be >= 0", "seed")
    out = doc.get("out", f"lsp-kit-{command}")
    _check_type(out, "str", "out")
    parts = {}
    if "task" in allowed:
        parts["task"] = build(SyntheticTask, doc.get("task"), "task")
        parts["task"].seed = seed
    if "train" in allowed:
        tc = build(TrainConfig, doc.get("train"), "train")
        parts["train"] = dataclasses.replace(tc, seed=seed)
    for flag in ("timing", "plots"):
        if flag in allowed:
            v = doc.get(flag, flag == "plots")
            _check_type(v, "bool", flag)
            parts[flag] = v
    if command == "train":
        method = doc.get("method", "lsp")
        if method not in METHODS:
            raise ConfigError(f"key 'method': expected one of {METHODS}, got {method!r}", "method")
        parts["method"] = method
    elif command == "compare":
        methods = doc.get("methods", ["full", "lsp"])
        _check_type(methods, "list", "methods")
        for m in methods:
            if m not in METHODS:
                raise ConfigError(f"key 'methods': unknown method {m!r}", "methods")
        if not methods or len(set(methods)) != len(methods):
            raise ConfigError("key 'methods' must list distinct methods", "methods")
        over = doc.get("overrides", {})
        if not isinstance(over, dict):
            raise ConfigError("key 'overrides' must be an object", "overrides")
        cfgs = {}
        for m in methods:
            extra = over.get(m, {})
            base = dataclasses.asdict(parts["train"])
            base.pop("seed")
            base["fit"] = {k: v for k, v in base["fit"].items() if k != "seed"}
            for k, v in (extra or {}).items():
                if k == "fit" and isinstance(v, dict):
                    base["fit"].update(v)
                else:
                    base[k] = v
            cfgs[m] = dataclasses.replace(build(TrainConfig, base, f"overrides.{m}"), seed=seed)
        for m in over:
            if m not in methods:
                raise ConfigError(f"key 'overrides.{m}': method not in 'methods'", f"overrides.{m}")
        parts["configs"] = cfgs
        parts["methods"] = methods
    elif command == "fit":
        parts["corpus"] = build(CorpusConfig, doc.get("corpus"), "corpus")
        fc = build(FitConfig, doc.get("fit"), "fit")
        parts["fit"] = fc
        for k, default in (("layer", 0), ("d", 32), ("r", 4)):
            v = doc.get(k, default)
            _check_type(v, "int", k)
            parts[k] = v
        if not 0 <= parts["layer"] < parts["task"].n_layers:
            raise ConfigError(f"key 'layer' must lie in [0, {parts['task'].n_layers})", "layer")
        if not 1 <= parts["r"] <= parts["d"]:
            raise ConfigError("need 1 <= r <= d", "r")
    elif command == "bias-bench":
        parts["corpus"] = build(CorpusConfig, doc.get("corpus"), "corpus")
        parts["bench"] = dataclasses.replace(build(BenchConfig, doc.get("bench"), "bench"), seed=seed)
    elif command == "sim":
        sc = build(SimConfig, doc.get("sim"), "sim")
        if sc.policy not in POLICIES:
            raise ConfigError(f"key 'sim.policy': expected one of {POLICIES}", "sim.policy")
        if sc.policy == "lsp_layerwise" and sc.d is None:
            raise ConfigError("key 'sim.d' is required for lsp_layerwise", "sim.d")
        if sc.iters < 1:
            raise ConfigError("key 'sim.iters' must be >= 1", "sim.iters")
        try:
            parts["options"] = SimOptions(d=sc.d, mode=sc.mode, bucket=sc.bucket, duplex=sc.duplex)
            parts["profile"] = _resolve_profile(sc.profile)
        except ContractError as exc:
            raise ConfigError(f"key 'sim': {exc}", "sim") from None
        parts["sim"] = sc
    return Run(command, seed, out, doc, parts)


def _resolve_profile(name):
    if os.path.exists(name):
        return load_profile(name)
    return bundled_profile(os.path.basename(name))


# -- artifacts --------------------------------------------------------------

def _make_out(path):
    if os.path.exists(path):
        raise FileExistsError(f"output directory {path!r} already exists; refusing to overwrite")
    os.makedirs(path)


def _content_hash(doc):
    body = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def _write_json(path, obj):
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if dataclasses.is_dataclass(v):
        return dataclasses.asdict(v)
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _metadata(run, extra=None):
    # the output location is not an input, so reruns into another directory match
    inputs = {k: v for k, v in run.doc.items() if k != "out"}
    meta = {"command": run.command, "seed": run.seed, "version": __version__,
            "config": inputs, "input_hash": _content_hash(inputs)}
    meta.update(extra or {})
    return meta


def _threads():
    raw = os.environ.get("LSP_KIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"LSP_KIT_THREADS must be an integer, got {raw!r}", "LSP_KIT_THREADS") from None
    if n < 1:
        raise ConfigError("LSP_KIT_THREADS must be >= 1", "LSP_KIT_THREADS")
    return n


# -- commands ---------------------------------------------------------------

def _train_one(method, task, cfg):
    net = init_net(task, np.random.SeedSequence([cfg.seed, 11]))
    data = make_task(task)
    if method == "lsp":
        return train_lsp(net, data, cfg)
    return train_baseline(method, net, data, cfg)


def _extra_memory(method, task, cfg):
    shapes = task.layer_shapes()
    if method == "lsp":
        net_dims = [(min(cfg.d, m, n), min(cfg.r, cfg.d, m, n)) for m, n in shapes]
        return sum(memory_estimate("lsp", m, n, r).extra for (m, n), (_, r) in zip(shapes, net_dims))
    k = cfg.rank
    return sum(memory_estimate(method, m, n, 0 if method == "full" else min(k, m, n)).extra
               for m, n in shapes)


def _write_history(out, hist, timing, prefix=""):
    hist.to_csv(os.path.join(out, f"{prefix}history.csv"), include_timing=timing)
    if hist.checks:
        hist.checks_to_csv(os.path.join(out, f"{prefix}checks.csv"))


def cmd_train(run: Run):
    p = run.parts
    _make_out(run.out)
    try:
        hist = _train_one(p["method"], p["task"], p["train"])
    except NumericalAbort as exc:
        if exc.partial is not None:
            _write_history(run.out, exc.partial, p["timing"])
        _write_json(os.path.join(run.out, "run.json"), _metadata(run, {"aborted": str(exc)}))
        raise
    _write_history(run.out, hist, p["timing"])
    for l, w in enumerate(hist.final_weights):
        save_matrix_csv(os.path.join(run.out, f"weights_{l}.csv"), w)
    _write_json(os.path.join(run.out, "run.json"), _metadata(run, {
        "method": p["method"], "final_train_loss": hist.final_train_loss,
        "final_eval_loss": hist.final_eval_loss, "refresh_steps": hist.refresh_steps,
        "extra_memory": _extra_memory(p["method"], p["task"], p["train"])}))
    if p["plots"]:
        from .plotting import loss_curves
        loss_curves({p["method"]: hist}, os.path.join(run.out, "loss.png"))
    print(f"final_train_loss={hist.final_train_loss!r} final_eval_loss={hist.final_eval_loss!r}")


def cmd_fit(run: Run):
    p = run.parts
    task, cc = p["task"], p["corpus"]
    _make_out(run.out)
    corpus = gradient_corpus(task, run.seed, cc.warmup_steps, cc.lr, cc.n_calib, cc.n_heldout,
                             cc.batch_size)
    l = p["layer"]
    cal, held = corpus.calib[l], corpus.heldout[l]
    m, n = cal[0].shape
    d = min(p["d"], m, n)
    r = min(p["r"], d)
    pair0 = init_pair(m, n, d, r, np.random.SeedSequence([run.seed, 7, l, d, r]))
    pair, report = fit(pair0, cal, p["fit"])
    report.to_csv(os.path.join(run.out, "fit_curve.csv"))
    save_projector(os.path.join(run.out, "P.txt"), pair.P)
    save_projector(os.path.join(run.out, "Q.txt"), pair.Q)
    res = {"layer": l, "d": d, "r": r, "steps": report.steps, "success": report.success,
           "timed_out": report.timed_out, "stalled": report.stalled,
           "train_bias_init": mean_relative_bias(pair0, cal),
           "train_bias": mean_relative_bias(pair, cal),
           "heldout_bias_init": mean_relative_bias(pair0, held),
           "heldout_bias": mean_relative_bias(pair, held)}
    _write_json(os.path.join(run.out, "run.json"), _metadata(run, res))
    print(" ".join(f"{k}={v!r}" for k, v in res.items()))


def cmd_bias_bench(run: Run):
    p = run.parts
    cc = p["corpus"]
    _make_out(run.out)
    corpus = gradient_corpus(p["task"], run.seed, cc.warmup_steps, cc.lr, cc.n_calib,
                             cc.n_heldout, cc.batch_size)
    rows = run_bench(corpus, p["bench"])
    write_rows(os.path.join(run.out, "bench.csv"), rows)
    _write_json(os.path.join(run.out, "run.json"), _metadata(run, {"rows": len(rows)}))
    from .plotting import bias_vs_width
    bias_vs_width(rows, os.path.join(run.out, "bias_vs_d.png"))
    for row in rows:
        print(",".join(str(x) for x in row.as_list()))


def cmd_sim(run: Run):
    p = run.parts
    sc, prof, opt = p["sim"], p["profile"], p["options"]
    _make_out(run.out)
    trace = simulate(prof, sc.policy, sc.iters, opt)
    trace.check()
    summ = summary(trace, prof, opt)
    trace.to_csv(os.path.join(run.out, "trace.csv"), summ)
    _write_json(os.path.join(run.out, "summary.json"), _metadata(run, {"summary": summ}))
    if p["plots"]:
        from .plotting import gantt
        gantt(trace, os.path.join(run.out, "gantt.png"))
    for k, v in summ.items():
        print(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")


def cmd_compare(run: Run):
    p = run.parts
    methods, task = p["methods"], p["task"]
    _make_out(run.out)
    jobs = [(m, task, p["configs"][m]) for m in methods]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            hists = list(pool.map(_train_one, *zip(*jobs)))
    else:
        hists = [_train_one(*j) for j in jobs]
    rows = []
    with open(os.path.join(run.out, "compare.csv"), "w", newline="\n") as fh:
        fh.write("method,final_train_loss,final_eval_loss,refreshes,extra_memory\n")
        for m, h in zip(methods, hists):
            extra = _extra_memory(m, task, p["configs"][m])
            fh.write(f"{m},{h.final_train_loss!r},{h.final_eval_loss!r},"
                     f"{len(h.refresh_steps)},{extra}\n")
            rows.append((m, h))
            _write_history(run.out, h, False, prefix=f"{m}_")
    _write_json(os.path.join(run.out, "run.json"), _metadata(run, {
        "final_eval_loss": {m: h.final_eval_loss for m, h in rows}}))
    if p["plots"]:
        from .plotting import loss_curves
        loss_curves(dict(rows), os.path.join(run.out, "train_loss.png"))
        loss_curves(dict(rows), os.path.join(run.out, "eval_loss.png"), key="eval")
    for m, h in rows:
        print(f"{m}: final_train_loss={h.final_train_loss!r} final_eval_loss={h.final_eval_loss!r}")


HANDLERS = {"train": cmd_train, "fit": cmd_fit, "bias-bench": cmd_bias_bench,
            "sim": cmd_sim, "compare": cmd_compare}


def parser():
    ap = argparse.ArgumentParser(prog="lsp-kit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (must not exist)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "compare"):
            sp.add_argument("--method", help="method (compare: comma-separated list)")
            sp.add_argument("--identity-proj", action="store_true",
                            help="identity projectors (needs d equal to every layer width)")
        if name in ("train", "compare", "fit", "bias-bench"):
            sp.add_argument("--r", type=int)
            sp.add_argument("--alpha", type=float)
        if name in ("train", "compare"):
            sp.add_argument("--check-freq", type=int)
        if name == "sim":
            sp.add_argument("--profile", help="profile JSON path or bundled profile name")
            sp.add_argument("--policy", choices=POLICIES)
            sp.add_argument("--iters", type=int)
            sp.add_argument("--no-duplex", action="store_true")
        sp.add_argument("--d", type=int)
        sp.set_defaults(**{k: None for k in ("method", "r", "alpha", "check_freq", "profile",
                                             "policy", "iters")},
                        identity_proj=False, no_duplex=False)
    return ap


def main(argv=None):
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        doc = merge_flags(args.command, load_config(args.config), args)
        run = validate(args.command, doc)
        _threads()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        HANDLERS[args.command](run)
    except NumericalAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
