"""Small bias-free feed-forward nets with hand-written backprop, plus synthetic tasks.

Layer ``l`` maps ``h -> act_l(h @ W_l)`` with ``W_l`` of shape (fan_in, fan_out).
The mse loss sums squared errors over outputs and averages over the batch;
softmax_ce averages the cross entropy over the batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalAbort

ACTIVATIONS = ("tanh", "relu", "none")
LOSSES = ("mse", "softmax_ce")


def _act(kind, z):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(kind, z, h):
    if kind == "tanh":
        return 1.0 - h * h
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class DenseNet:
    weights: list
    activations: list
    loss_kind: str = "mse"
    version: int = 0

    def __post_init__(self):
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        if len(self.weights) != len(self.activations):
            raise ContractError("need one activation per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ContractError(f"unknown activation {a!r}")
        if self.loss_kind not in LOSSES:
            raise ContractError(f"unknown loss {self.loss_kind!r}")
        for w0, w1 in zip(self.weights, self.weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ContractError(f"layer shapes {w0.shape} and {w1.shape} do not chain")

    @property
    def shapes(self):
        return [w.shape for w in self.weights]

    @property
    def n_in(self):
        return self.weights[0].shape[0]

    @property
    def n_out(self):
        return self.weights[-1].shape[1]

    def copy(self):
        return DenseNet([w.copy() for w in self.weights], list(self.activations), self.loss_kind)

    def add_to_layer(self, layer, delta):
        """In-place ``W_layer += delta``; invalidates earlier forward caches."""
        self.weights[layer] += delta
        self.version += 1

    def set_weights(self, weights):
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.version += 1


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray  # (B, n_out) floats, or (B,) integer labels

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ContractError("inputs must be a non-empty (batch, n_in) array")
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise ContractError("inputs and targets disagree on batch size")

    def __len__(self):
        return self.inputs.shape[0]

    def take(self, idx):
        return Batch(self.inputs[idx], self.targets[idx])


@dataclass
class ForwardCache:
    hs: list  # layer inputs h_0 .. h_L (h_L = output)
    zs: list
    batch: Batch
    version: int
    net_id: int


def forward(net: DenseNet, batch: Batch):
    """Mean loss over the batch and the cache needed by :func:`backward`."""
    if batch.inputs.shape[1] != net.n_in:
        raise ContractError(f"input width {batch.inputs.shape[1]} != net input {net.n_in}")
    h = batch.inputs
    hs, zs = [h], []
    for w, a in zip(net.weights, net.activations):
        z = h @ w
        h = _act(a, z)
        zs.append(z)
        hs.append(h)
    if not np.all(np.isfinite(h)):
        raise NumericalAbort("non-finite activations in forward pass")
    loss = _loss(net.loss_kind, h, batch.targets)
    return loss, ForwardCache(hs, zs, batch, net.version, id(net))


def _softmax(o):
    e = np.exp(o - o.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _loss(kind, out, targets):
    b = out.shape[0]
    if kind == "mse":
        if targets.shape != out.shape:
            raise ContractError(f"target shape {targets.shape} != output shape {out.shape}")
        r = out - targets
        return float(np.sum(r * r) / b)
    labels = np.asarray(targets, dtype=np.int64)
    o = out - out.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(o), axis=1))
    return float(np.mean(logz - o[np.arange(b), labels]))


def _backprop(net, cache):
    if cache.net_id != id(net) or cache.version != net.version:
        raise ContractError("stale forward cache: weights changed since forward()")
    out = cache.hs[-1]
    b = out.shape[0]
    if net.loss_kind == "mse":
        dout = 2.0 * (out - cache.batch.targets) / b
    else:
        dout = _softmax(out)
        dout[np.arange(b), np.asarray(cache.batch.targets, dtype=np.int64)] -= 1.0
        dout /= b
    grads = [None] * len(net.weights)
    dzs = [None] * len(net.weights)
    dh = dout
    for l in range(len(net.weights) - 1, -1, -1):
        dzs[l] = dh * _act_grad(net.activations[l], cache.zs[l], cache.hs[l + 1])
        grads[l] = cache.hs[l].T @ dzs[l]
        if l:
            dh = dzs[l] @ net.weights[l].T
    return grads, dzs


def backward(net: DenseNet, cache: ForwardCache, per_sample_norms=False):
    """Gradients of the mean loss with respect to every weight matrix.

    With ``per_sample_norms`` also returns, for each layer, the spectral norm
    of every per-example gradient (each one is rank one, so the norm is a
    product of two vector norms).
    """
    grads, dzs = _backprop(net, cache)
    if not per_sample_norms:
        return grads
    b = cache.hs[0].shape[0]
    norms = [b * np.linalg.norm(h, axis=1) * np.linalg.norm(dz, axis=1)
             for h, dz in zip(cache.hs, dzs)]
    return grads, norms


def example_gradient_factors(net: DenseNet, batch: Batch):
    """Per layer ``(H, D)`` with example i's own gradient equal to ``outer(H[i], D[i])``."""
    _, cache = forward(net, batch)
    _, dzs = _backprop(net, cache)
    b = len(batch)
    return [(h, b * dz) for h, dz in zip(cache.hs, dzs)]


def loss_and_grads(net, batch):
    loss, cache = forward(net, batch)
    return loss, backward(net, cache)


def evaluate(net, batch):
    return forward(net, batch)[0]


# -- synthetic tasks --------------------------------------------------------

@dataclass
class SyntheticTask:
    kind: str = "teacher_student_regression"
    n_in: int = 64
    hidden: int = 64
    n_out: int = 64
    n_layers: int = 3
    activation: str = "tanh"
    n_train: int = 4096
    n_eval: int = 1024
    noise_std: float = 0.1
    n_classes: int = 10
    class_sep: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("teacher_student_regression", "gaussian_classification"):
            raise ContractError(f"unknown task kind {self.kind!r}")
        for name in ("n_in", "hidden", "n_out", "n_layers", "n_train", "n_eval", "n_classes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ContractError("noise_std must be >= 0")

    @property
    def out_dim(self):
        return self.n_out if self.kind == "teacher_student_regression" else self.n_classes

    @property
    def loss_kind(self):
        return "mse" if self.kind == "teacher_student_regression" else "softmax_ce"

    def layer_shapes(self):
        dims = [self.n_in] + [self.hidden] * (self.n_layers - 1) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))

    def noise_floor(self):
        """Expected per-example mse of the teacher itself on noisy targets."""
        return self.n_out * self.noise_std ** 2


def init_net(task: SyntheticTask, seed) -> DenseNet:
    rng = np.random.default_rng(seed)
    ws = [rng.standard_normal(s) / np.sqrt(s[0]) for s in task.layer_shapes()]
    acts = [task.activation] * (task.n_layers - 1) + ["none"]
    return DenseNet(ws, acts, task.loss_kind)


def make_task(task: SyntheticTask):
    """Return ``(train, eval, teacher)``. The teacher is None for classification."""
    rng = np.random.default_rng(np.random.SeedSequence([task.seed, 0x7A5C]))
    n = task.n_train + task.n_eval
    if task.kind == "teacher_student_regression":
        teacher = init_net(task, np.random.SeedSequence([task.seed, 0x7EAC]))
        x = rng.standard_normal((n, task.n_in))
        h = x
        for w, a in zip(teacher.weights, teacher.activations):
            h = _act(a, h @ w)
        y = h + task.noise_std * rng.standard_normal(h.shape)
    else:
        teacher = None
        means = task.class_sep * rng.standard_normal((task.n_classes, task.n_in))
        y = rng.integers(0, task.n_classes, size=n)
        x = means[y] + rng.standard_normal((n, task.n_in))
    train = Batch(x[:task.n_train], y[:task.n_train])
    test = Batch(x[task.n_train:], y[task.n_train:])
    return train, test, teacher


def save_dataset_csv(path, data: Batch):
    x, y = data.inputs, data.targets
    labels = y.ndim == 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = [f"x{i}" for i in range(x.shape[1])]
        head += ["label"] if labels else [f"y{j}" for j in range(y.shape[1])]
        w.writerow(head)
        for xi, yi in zip(x, y):
            row = [repr(float(v)) for v in xi]
            row += [str(int(yi))] if labels else [repr(float(v)) for v in yi]
            w.writerow(row)


def load_dataset_csv(path) -> Batch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    nx = sum(1 for h in head if h.startswith("x"))
    arr = np.array([[float(v) for v in r] for r in body])
    x = arr[:, :nx]
    if head[-1] == "label":
        return Batch(x, arr[:, nx].astype(np.int64))
    return Batch(x, arr[:, nx:])
