import numpy as np
import pytest
from hypothesis import given, strategies as st

from lsp_kit.baselines import (galore_basis, galore_project, galore_rank_for_memory,
                               memory_estimate, train_baseline)
from lsp_kit.errors import ContractError
from lsp_kit.projector import FitConfig, fit, init_pair, relative_bias
from lsp_kit.toy_models import SyntheticTask, init_net
from lsp_kit.trainer import TrainConfig

SMALL = SyntheticTask(n_in=16, hidden=16, n_out=16, n_train=512, n_eval=128)


# -- GaLore projection ------------------------------------------------------

def test_full_rank_projection_reconstructs(rng):
    g = rng.standard_normal((7, 5))
    p, low = galore_project(g, 5)
    assert np.linalg.norm(p @ low - g) <= 1e-8


def test_rank_one_gradient_is_exact(rng):
    g = np.outer(rng.standard_normal(6), rng.standard_normal(4))
    p, low = galore_project(g, 1)
    assert np.allclose(p @ low, g, atol=1e-12)


def test_eckart_young_residual(rng):
    g = rng.standard_normal((16, 16))
    p, low = galore_project(g, 4)
    s = np.linalg.svd(g, compute_uv=False)
    assert np.linalg.norm(p @ low - g) == pytest.approx(np.sqrt(np.sum(s[4:] ** 2)), abs=1e-8)


def test_svd_beats_fitted_lsp_on_its_own_matrix(rng):
    g = rng.standard_normal((16, 16))
    d = 4
    p, low = galore_project(g, d)
    svd_bias = np.linalg.norm(p @ low - g) / np.linalg.norm(g)
    pair, _ = fit(init_pair(16, 16, d, 2, 0), [g], FitConfig(alpha=1e-3, max_steps=300,
                                                            timeout_steps=300))
    assert svd_bias <= relative_bias(pair, g)


def test_galore_basis_spans_both_gradients(rng):
    a, b = np.outer(rng.standard_normal(6), rng.standard_normal(4)), \
        np.outer(rng.standard_normal(6), rng.standard_normal(4))
    u = galore_basis([a, b], 2)
    for g in (a, b):
        assert np.allclose(u @ (u.T @ g), g, atol=1e-12)


def test_galore_rank_errors(rng):
    with pytest.raises(ContractError):
        galore_project(rng.standard_normal((4, 3)), 4)
    with pytest.raises(ContractError):
        galore_project(rng.standard_normal((4, 3)), 0)


# -- memory model -----------------------------------------------------------

def test_lsp_memory_worked_example():
    est = memory_estimate("lsp", 2048, 2048, 4)
    assert est.total == 4_210_688
    assert est.total == est.weight_count + est.projector_count + est.opt_state_count


@given(st.integers(1, 5000), st.integers(1, 5000), st.integers(1, 64), st.integers(1, 6))
def test_memory_formulas(m, n, r, b):
    mn = m * n
    assert memory_estimate("full", m, n, r, b).total == (1 + b) * mn
    assert memory_estimate("lora", m, n, r, b).total == mn + b * (m + n) * r
    assert memory_estimate("galore", m, n, r, b).total == mn + (m + b * n) * r
    assert memory_estimate("lsp", m, n, r, b).total == mn + (m + n) * r
    for method in ("full", "lora", "galore", "lsp"):
        assert isinstance(memory_estimate(method, m, n, r, b).total, int)


@given(st.integers(1, 5000), st.integers(1, 5000), st.integers(1, 64))
def test_memory_ordering(m, n, r):
    lsp, galore, lora = (memory_estimate(k, m, n, r).total for k in ("lsp", "galore", "lora"))
    assert lsp < galore < lora
    assert lora - lsp == 2 * (m + n) * r


def test_rank_zero_degenerates():
    for method in ("lsp", "lora", "galore"):
        assert memory_estimate(method, 30, 20, 0).total == 600
    assert memory_estimate("full", 30, 20, 0).total == 4 * 600


def test_memory_errors():
    with pytest.raises(ContractError):
        memory_estimate("adafactor", 4, 4, 1)
    with pytest.raises(ContractError):
        memory_estimate("lsp", 0, 4, 1)
    with pytest.raises(ContractError):
        memory_estimate("lsp", 4.5, 4, 1)


def test_equal_memory_galore_rank():
    extra = memory_estimate("lsp", 64, 64, 4).extra
    k = galore_rank_for_memory(64, 64, extra)
    assert memory_estimate("galore", 64, 64, k).extra <= extra
    assert memory_estimate("galore", 64, 64, k + 1).extra > extra


# -- training ---------------------------------------------------------------

def test_full_rank_lora_matches_full_adam():
    cfg = TrainConfig(lr=3e-3, total_steps=1000, rank=16)
    full = train_baseline("full", init_net(SMALL, 0), SMALL, cfg)
    lora = train_baseline("lora", init_net(SMALL, 0), SMALL, cfg)
    assert abs(lora.final_eval_loss - full.final_eval_loss) <= 0.05 * full.final_eval_loss


def test_full_rank_galore_tracks_full_adam():
    cfg = TrainConfig(lr=3e-3, total_steps=100, rank=16, check_freq=50)
    full = train_baseline("full", init_net(SMALL, 0), SMALL, cfg)
    galore = train_baseline("galore", init_net(SMALL, 0), SMALL, cfg)
    assert np.max(np.abs(np.subtract(full.train_loss, galore.train_loss))) <= 1e-8


def test_lora_keeps_base_weights_until_b_moves():
    net = init_net(SMALL, 0)
    w0 = [w.copy() for w in net.weights]
    cfg = TrainConfig(lr=1e-3, total_steps=1, rank=2)
    train_baseline("lora", net, SMALL, cfg)
    # first step: B was zero so A's gradient is zero; only B moves, and dW = A_0 dB^T has rank <= r
    for w, w_init in zip(net.weights, w0):
        s = np.linalg.svd(w - w_init, compute_uv=False)
        assert np.sum(s > 1e-12 * max(s[0], 1e-300)) <= 2


def test_galore_refreshes_every_check():
    cfg = TrainConfig(lr=1e-3, total_steps=50, rank=2, check_freq=20)
    hist = train_baseline("galore", init_net(SMALL, 0), SMALL, cfg)
    assert hist.refresh_steps == [0, 20, 40]


def test_unknown_baseline():
    with pytest.raises(ContractError):
        train_baseline("sgd", init_net(SMALL, 0), SMALL, TrainConfig(total_steps=1))
