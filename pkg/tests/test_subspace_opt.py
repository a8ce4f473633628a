import numpy as np
import pytest
from hypothesis import given, strategies as st

from lsp_kit.errors import ContractError, NumericalAbort
from lsp_kit.projector import (ProjectorPair, SparseProjector, identity_pair, init_pair,
                               to_dense)
from lsp_kit.subspace_opt import (SubspaceOptState, adam_step, load_state, reproject_state,
                                  save_state)


def _scalar_adam(gs, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        out.append((m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps))
    return out


def test_zero_grad_at_step_zero():
    s0 = SubspaceOptState.zeros(3)
    s1, delta = adam_step(s0, np.zeros((3, 3)))
    assert not np.any(delta) and not np.any(s1.M) and not np.any(s1.V)
    assert s1.step == 1


def test_first_step_with_unit_gradient():
    _, delta = adam_step(SubspaceOptState.zeros((1, 1)), np.ones((1, 1)))
    assert delta[0, 0] == pytest.approx(1 / (1 + 1e-8), rel=1e-15)


def test_constant_gradient_converges_to_sign(rng):
    g = rng.standard_normal((4, 4))
    s = SubspaceOptState.zeros(4)
    for _ in range(1000):
        s, delta = adam_step(s, g)
    assert np.abs(delta - np.sign(g)).max() <= 1e-3


@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_matches_scalar_reference(seed, steps):
    rng = np.random.default_rng(seed)
    gs = rng.standard_normal((steps, 2, 3))
    s = SubspaceOptState.zeros((2, 3))
    for g in gs:
        s, delta = adam_step(s, g)
    for i in range(2):
        for j in range(3):
            assert delta[i, j] == pytest.approx(_scalar_adam(gs[:, i, j])[-1], rel=1e-12, abs=1e-14)
    assert np.all(s.V >= 0)


def test_adam_errors():
    s = SubspaceOptState.zeros(2)
    with pytest.raises(ContractError):
        adam_step(s, np.zeros((3, 3)))
    with pytest.raises(NumericalAbort):
        adam_step(s, [[np.nan, 0], [0, 0]])
    with pytest.raises(ContractError):
        SubspaceOptState.zeros(2, beta1=1.0)


def _random_state(rng, d):
    return SubspaceOptState(rng.standard_normal((d, d)), rng.random((d, d)), 7)


def test_reproject_identity_is_noop(rng):
    s = _random_state(rng, 5)
    out = reproject_state(s, identity_pair(5), identity_pair(5))
    assert np.array_equal(out.M, s.M) and np.array_equal(out.V, s.V) and out.step == 7


def test_reproject_zero_state_stays_zero():
    s = SubspaceOptState.zeros(4)
    out = reproject_state(s, init_pair(9, 7, 4, 2, 0), init_pair(9, 7, 4, 3, 1))
    assert not np.any(out.M) and not np.any(out.V)


@given(st.integers(0, 2**32 - 1), st.sampled_from(["entrywise", "matrix"]))
def test_reproject_matches_dense_oracle(seed, mode):
    rng = np.random.default_rng(seed)
    old, new = init_pair(9, 7, 4, 2, seed), init_pair(9, 7, 4, 3, seed + 1)
    s = _random_state(rng, 4)
    tp = to_dense(new.P).T @ to_dense(old.P)
    tq = to_dense(old.Q).T @ to_dense(new.Q)
    sq = (lambda x: x * x) if mode == "entrywise" else (lambda x: x @ x)
    out = reproject_state(s, old, new, mode)
    assert np.allclose(out.M, tp @ s.M @ tq, atol=1e-12)
    assert np.allclose(out.V, np.maximum(sq(tp) @ s.V @ sq(tq.T).T, 0), atol=1e-12)
    assert np.all(out.V >= 0)


def test_orthonormal_pair_mapped_to_itself(rng):
    # a permutation-with-signs is both orthonormal and (6, 1)-sparse
    perm = rng.permutation(6)
    signs = rng.choice([-1.0, 1.0], size=6)
    p = SparseProjector(6, 6, 1, perm[:, None], signs[:, None])
    pair = ProjectorPair(p, p)
    s = _random_state(rng, 6)
    out = reproject_state(s, pair, pair)
    assert np.allclose(out.M, s.M, atol=1e-15) and np.allclose(out.V, s.V, atol=1e-15)


def test_reproject_errors(rng):
    s = _random_state(rng, 4)
    with pytest.raises(ContractError):
        reproject_state(s, init_pair(8, 8, 4, 2, 0), init_pair(8, 8, 3, 2, 0))
    with pytest.raises(ContractError):
        reproject_state(s, init_pair(8, 8, 4, 2, 0), init_pair(8, 9, 4, 2, 0))
    with pytest.raises(ContractError):
        reproject_state(s, init_pair(8, 8, 4, 2, 0), init_pair(8, 8, 4, 2, 1), "cubed")


def test_checkpoint_roundtrip(tmp_path, rng):
    s = SubspaceOptState(rng.standard_normal((3, 3)), rng.random((3, 3)), 42, 0.8, 0.99, 1e-6)
    save_state(tmp_path, s)
    back = load_state(tmp_path)
    assert back.step == 42 and (back.beta1, back.beta2, back.eps) == (0.8, 0.99, 1e-6)
    assert np.array_equal(back.M, s.M) and np.array_equal(back.V, s.V)
