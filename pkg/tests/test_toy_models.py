import numpy as np
import pytest
from hypothesis import given, strategies as st

from lsp_kit.errors import ContractError, NumericalAbort
from lsp_kit.toy_models import (ACTIVATIONS, Batch, DenseNet, SyntheticTask, backward, evaluate,
                                example_gradient_factors, forward, init_net, load_dataset_csv,
                                loss_and_grads, make_task, save_dataset_csv)


def _net(rng, dims, acts, loss_kind):
    ws = [rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(dims, dims[1:])]
    return DenseNet(ws, list(acts), loss_kind)


def _batch(rng, n_in, n_out, loss_kind, b=5):
    x = rng.standard_normal((b, n_in))
    y = rng.standard_normal((b, n_out)) if loss_kind == "mse" else rng.integers(0, n_out, b)
    return Batch(x, y)


def test_identity_layer_has_zero_loss(rng):
    x = rng.standard_normal((4, 3))
    net = DenseNet([np.eye(3)], ["none"])
    assert forward(net, Batch(x, x))[0] == 0.0


def test_zero_net_zero_targets():
    net = DenseNet([np.zeros((3, 4)), np.zeros((4, 2))], ["tanh", "none"])
    assert evaluate(net, Batch(np.ones((2, 3)), np.zeros((2, 2)))) == 0.0


def test_forward_matches_scalar_recomputation():
    w1 = np.array([[0.5, -1.0], [2.0, 0.25]])
    w2 = np.array([[1.5], [-0.75]])
    net = DenseNet([w1, w2], ["tanh", "none"])
    x = np.array([[1.0, -2.0], [0.5, 0.0]])
    y = np.array([[0.3], [-0.1]])
    total = 0.0
    for i in range(2):
        h = [np.tanh(x[i, 0] * w1[0, j] + x[i, 1] * w1[1, j]) for j in range(2)]
        o = h[0] * w2[0, 0] + h[1] * w2[1, 0]
        total += (o - y[i, 0]) ** 2
    assert evaluate(net, Batch(x, y)) == pytest.approx(total / 2, rel=1e-14)


def test_softmax_ce_value():
    net = DenseNet([np.zeros((2, 3))], ["none"], "softmax_ce")
    assert evaluate(net, Batch(np.ones((4, 2)), np.array([0, 1, 2, 0]))) == pytest.approx(np.log(3))


def _fd_grads(net, batch, h=1e-6):
    out = []
    for l, w in enumerate(net.weights):
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            vals = []
            for sign in (1, -1):
                probe = net.copy()
                probe.weights[l][idx] += sign * h
                vals.append(evaluate(probe, batch))
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        out.append(fd)
    return out


@pytest.mark.parametrize("act", ACTIVATIONS)
@pytest.mark.parametrize("loss_kind", ["mse", "softmax_ce"])
def test_backward_matches_finite_differences(act, loss_kind):
    rng = np.random.default_rng(hash((act, loss_kind)) % 2**32)
    net = _net(rng, [4, 5, 3], [act, "none"], loss_kind)
    batch = _batch(rng, 4, 3, loss_kind)
    _, grads = loss_and_grads(net, batch)
    for g, fd in zip(grads, _fd_grads(net, batch)):
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


def test_linear_mse_gradient_closed_form(rng):
    x, y = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    w = rng.standard_normal((4, 3))
    _, (g,) = loss_and_grads(DenseNet([w], ["none"]), Batch(x, y))
    assert np.allclose(g, 2 * x.T @ (x @ w - y) / 6, atol=1e-13)


def test_zero_gradient_at_exact_fit(rng):
    x = rng.standard_normal((5, 3))
    w = rng.standard_normal((3, 2))
    _, (g,) = loss_and_grads(DenseNet([w], ["none"]), Batch(x, x @ w))
    assert not np.any(g)


def test_stale_cache_is_rejected(rng):
    net = _net(rng, [3, 3], ["none"], "mse")
    _, cache = forward(net, _batch(rng, 3, 3, "mse"))
    net.add_to_layer(0, np.ones((3, 3)))
    with pytest.raises(ContractError):
        backward(net, cache)
    with pytest.raises(ContractError):
        backward(net.copy(), cache)


def test_per_sample_norms_and_factors(rng):
    net = _net(rng, [4, 6, 3], ["tanh", "none"], "mse")
    batch = _batch(rng, 4, 3, "mse", b=7)
    _, cache = forward(net, batch)
    grads, norms = backward(net, cache, per_sample_norms=True)
    factors = example_gradient_factors(net, batch)
    for l, (h, d) in enumerate(factors):
        per = [np.outer(h[i], d[i]) for i in range(7)]
        assert np.allclose(sum(per) / 7, grads[l], atol=1e-13)
        own = [loss_and_grads(net, batch.take([i]))[1][l] for i in range(7)]
        assert np.allclose(per, own, atol=1e-13)
        assert np.allclose(norms[l], [np.linalg.norm(p, 2) for p in per], rtol=1e-10)


def test_forward_errors(rng):
    net = _net(rng, [3, 2], ["none"], "mse")
    with pytest.raises(ContractError):
        forward(net, _batch(rng, 4, 2, "mse"))
    with pytest.raises(NumericalAbort):
        forward(DenseNet([np.full((3, 2), np.inf)], ["none"]), _batch(rng, 3, 2, "mse"))
    with pytest.raises(ContractError):
        DenseNet([np.zeros((3, 2)), np.zeros((3, 2))], ["tanh", "none"])
    with pytest.raises(ContractError):
        DenseNet([np.zeros((3, 2))], ["sigmoid"])


@pytest.mark.parametrize("kind", ["teacher_student_regression", "gaussian_classification"])
def test_make_task_is_deterministic(kind):
    task = SyntheticTask(kind=kind, n_train=50, n_eval=20)
    a, b = make_task(task), make_task(task)
    assert np.array_equal(a[0].inputs, b[0].inputs) and np.array_equal(a[1].targets, b[1].targets)
    assert len(a[0]) == 50 and len(a[1]) == 20
    other = make_task(SyntheticTask(kind=kind, n_train=50, n_eval=20, seed=1))
    assert not np.array_equal(a[0].inputs, other[0].inputs)


def test_noiseless_teacher_is_a_perfect_student():
    task = SyntheticTask(noise_std=0.0, n_train=64, n_eval=64)
    _, test, teacher = make_task(task)
    assert evaluate(teacher, test) == 0.0


@given(st.integers(1, 5), st.integers(1, 9), st.integers(1, 9))
def test_task_layer_shapes_chain(n_layers, hidden, n_out):
    task = SyntheticTask(n_in=3, hidden=hidden, n_out=n_out, n_layers=n_layers)
    net = init_net(task, 0)
    assert net.shapes == task.layer_shapes()
    assert net.n_in == 3 and net.n_out == n_out


def test_full_adam_reaches_noise_floor():
    from lsp_kit.baselines import train_baseline
    from lsp_kit.trainer import TrainConfig
    task = SyntheticTask()
    hist = train_baseline("full", init_net(task, 0), task, TrainConfig(total_steps=2000))
    assert hist.final_eval_loss <= task.noise_floor()


@pytest.mark.parametrize("kind", ["teacher_student_regression", "gaussian_classification"])
def test_dataset_csv_roundtrip(tmp_path, kind):
    train, _, _ = make_task(SyntheticTask(kind=kind, n_in=4, n_out=3, n_train=10, n_eval=2))
    save_dataset_csv(tmp_path / "d.csv", train)
    back = load_dataset_csv(tmp_path / "d.csv")
    assert np.array_equal(back.inputs, train.inputs)
    assert np.array_equal(back.targets, train.targets)
    assert back.targets.dtype == train.targets.dtype
