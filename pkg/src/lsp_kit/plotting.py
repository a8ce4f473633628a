"""Report figures: schedule Gantt charts, bias-vs-width curves and loss curves.

Everything renders with the Agg backend to PNG files with the software tag
stripped, so repeated runs produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}
_COLORS = {"fwd": "tab:blue", "bwd": "tab:orange", "offload": "tab:green", "upd": "tab:red",
           "upload": "tab:purple", "apply": "tab:brown", "swap_in": "tab:cyan",
           "swap_out": "tab:olive"}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def gantt(trace, path, title=None):
    """One lane per resource, one bar per event."""
    lanes = trace.resources()
    fig, ax = plt.subplots(figsize=(10, 1 + 0.6 * len(lanes)))
    for y, res in enumerate(lanes):
        for e in trace.events:
            if e.resource == res and e.end > e.start:
                ax.barh(y, e.end - e.start, left=e.start, height=0.8,
                        color=_COLORS.get(e.label, "gray"), edgecolor="none")
    ax.set_yticks(range(len(lanes)), lanes)
    ax.invert_yaxis()
    ax.set_xlabel("time (s)")
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for lab, c in _COLORS.items()
               if any(e.label == lab for e in trace.events)]
    labels = [lab for lab in _COLORS if any(e.label == lab for e in trace.events)]
    ax.legend(handles, labels, loc="upper right", fontsize="small", ncol=len(labels))
    ax.set_title(title or f"{trace.policy}: {trace.iter_time:.4g} s / iteration")
    fig.tight_layout()
    _save(fig, path)


def bias_vs_width(rows, path):
    """Held-out relative bias against subspace width, one line per method."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, marker in (("lsp", "o"), ("random", "s"), ("galore", "^")):
        pts = sorted((r.d, r.heldout_bias) for r in rows if r.method == method)
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=marker, label=method)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("d (GaLore: rank)")
    ax.set_ylabel("median held-out relative bias")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def loss_curves(histories, path, key="train"):
    """``histories`` maps a label to a TrainHistory."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, h in histories.items():
        if key == "train":
            ax.plot(range(len(h.train_loss)), h.train_loss, label=label, linewidth=0.8)
        else:
            steps = sorted(h.eval_loss)
            ax.plot(steps, [h.eval_loss[s] for s in steps], marker=".", label=label)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(f"{key} loss")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
