import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sideinfo.checks import (
    naive_direct,
    naive_irrelevance,
    naive_multitask,
    naive_multiview_corr,
    naive_multiview_pred,
    naive_pairwise,
    naive_supervised,
    naive_transform_fixed,
    naive_transform_pairs,
)
from sideinfo.models import LinearMap, LogisticHead, MlpStack, init_parameters
from sideinfo.numeric import Rng
from sideinfo.patterns import (
    NoMatchingPairsWarning,
    PairIndex,
    PatternSpec,
    Sigma,
    add_grads,
    irrelevance_penalty,
    loss_direct,
    loss_multitask,
    loss_multiview_corr,
    loss_multiview_pred,
    loss_pairwise,
    loss_supervised,
    loss_transform_fixed,
    loss_transform_pairs,
)

IDENT1 = LinearMap([[1.0]])
LN2 = math.log(2.0)


def _lin(rng, i, o, bias=True):
    return init_parameters(LinearMap.zeros(i, o, bias=bias), rng)


def _mlp(rng, i, o):
    m = MlpStack.zeros([i, 5, o])
    init_parameters(m, rng)
    for layer in m.layers:
        layer.bias[...] = rng.uniform(-0.5, 0.5, layer.bias.shape)
    return m


# ---------------------------------------------------------------- pattern settings / validation

def test_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        PatternSpec("direct", w_main=0.6, w_side=0.6)
    with pytest.raises(ValueError):
        PatternSpec("direct", w_main=1.2, w_side=-0.2)


@pytest.mark.parametrize("margin", [0.0, -1.0, math.inf, math.nan])
def test_margin_must_be_finite_positive(margin):
    with pytest.raises(ValueError):
        Sigma("margin", margin)


def test_unknown_kinds():
    with pytest.raises(ValueError):
        PatternSpec("label-distance")
    with pytest.raises(ValueError):
        Sigma("cauchy")


# ---------------------------------------------------------------- supervised

def test_supervised_uninformative_is_ln2():
    psi = LogisticHead([0.0], 0.0)
    v, _ = loss_supervised(psi, IDENT1, np.ones((4, 1)), [0, 1, 1, 0])
    assert v == pytest.approx(LN2, abs=1e-15)


def test_supervised_perfect_prediction_clamped():
    psi = LogisticHead([1000.0])
    v, _ = loss_supervised(psi, IDENT1, np.array([[1.0], [-1.0]]), [1, 0])
    assert 0 <= v <= 1e-11


def test_supervised_matches_naive():
    rng = Rng(0)
    phi, psi = _lin(rng.fork("phi"), 3, 2), LogisticHead(rng.standard_normal(2), 0.1)
    x, y = rng.standard_normal((7, 3)), (rng.uniform01(7) < 0.5).astype(float)
    assert loss_supervised(psi, phi, x, y)[0] == pytest.approx(naive_supervised(psi, phi, x, y), abs=1e-12)


def test_supervised_empty_batch():
    with pytest.raises(ValueError):
        loss_supervised(LogisticHead([0.0]), IDENT1, np.zeros((0, 1)), [])


def test_supervised_label_check():
    with pytest.raises(ValueError):
        loss_supervised(LogisticHead([0.0]), IDENT1, np.zeros((2, 1)), [0, 2])


# ---------------------------------------------------------------- direct / multi-task

def test_direct_identity_zero():
    x = Rng(0).standard_normal((5, 3))
    assert loss_direct(LinearMap(np.eye(3)), x, x)[0] == 0.0


def test_direct_hand_arithmetic():
    assert loss_direct(LinearMap([[2.0]]), [[1.0]], [[1.0]])[0] == 1.0


def test_direct_matches_naive():
    rng = Rng(1)
    phi = _lin(rng, 4, 2)
    x, z = rng.standard_normal((6, 4)), rng.standard_normal((6, 2))
    assert loss_direct(phi, x, z)[0] == pytest.approx(naive_direct(phi, x, z), abs=1e-12)


def test_direct_dimension_mismatch():
    with pytest.raises(ValueError):
        loss_direct(LinearMap(np.eye(2)), np.zeros((3, 2)), np.zeros((3, 3)))


def test_multitask_identity_zero():
    x = Rng(0).standard_normal((5, 2))
    assert loss_multitask(LinearMap(np.eye(2)), LinearMap(np.eye(2)), x, x)[0] == 0.0


def test_multitask_hand_arithmetic():
    assert loss_multitask(LinearMap([[0.0]]), IDENT1, [[1.0]], [[2.0]])[0] == 4.0


def test_multitask_matches_naive_and_reaches_both_maps():
    rng = Rng(2)
    phi, beta = _mlp(rng.fork("phi"), 4, 2), _lin(rng.fork("beta"), 2, 3)
    x, z = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    v, g = loss_multitask(beta, phi, x, z)
    assert v == pytest.approx(naive_multitask(beta, phi, x, z), abs=1e-12)
    assert set(g) == {"phi", "beta"}


# ---------------------------------------------------------------- multi-view

def test_multiview_pointwise_equal_zero():
    z = Rng(0).standard_normal((5, 2))
    assert loss_multiview_corr(LinearMap(np.eye(2)), LinearMap(np.eye(2)), z, z)[0] == 0.0


def test_multiview_collapse_is_free_without_penalty():
    x, z = Rng(0).standard_normal((5, 3)), Rng(1).standard_normal((5, 2))
    assert loss_multiview_corr(LinearMap.zeros(2, 1), LinearMap.zeros(3, 1), x, z)[0] == 0.0


def test_multiview_collapse_penalized():
    x, z = Rng(0).standard_normal((5, 3)), Rng(1).standard_normal((5, 2))
    # both views have variance 0: penalty gamma * (0 - 1)^2 per view
    v, _ = loss_multiview_corr(LinearMap.zeros(2, 1), LinearMap.zeros(3, 1), x, z, gamma=1.0)
    assert v == pytest.approx(2.0)


def test_multiview_matches_naive_gamma1():
    rng = Rng(3)
    phi, beta = _lin(rng.fork("phi"), 4, 2), _lin(rng.fork("beta"), 3, 2)
    x, z = rng.standard_normal((8, 4)), rng.standard_normal((8, 3))
    got = loss_multiview_corr(beta, phi, x, z, gamma=1.0)[0]
    assert got == pytest.approx(naive_multiview_corr(beta, phi, x, z, gamma=1.0), abs=1e-12)


def test_multiview_batch_of_one_with_penalty():
    with pytest.raises(ValueError):
        loss_multiview_corr(LinearMap.zeros(1, 1), LinearMap.zeros(1, 1), [[1.0]], [[1.0]], gamma=1.0)


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_multiview_scale_coupling(seed, c):
    rng = Rng(seed)
    phi, beta = _lin(rng.fork("phi"), 4, 2), _lin(rng.fork("beta"), 3, 2)
    x, z = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    base = loss_multiview_corr(beta, phi, x, z)[0]
    scaled = loss_multiview_corr(LinearMap(c * beta.weight, c * beta.bias), LinearMap(c * phi.weight, c * phi.bias),
                                 x, z)[0]
    assert scaled == pytest.approx(c * c * base, rel=1e-10, abs=1e-12)


def test_multiview_pred_perfect():
    psi = LogisticHead([1000.0])
    v, _ = loss_multiview_pred(psi, IDENT1, [[1.0], [-1.0]], [1, 0])
    assert v <= 1e-11


def test_multiview_pred_zero_output():
    v, _ = loss_multiview_pred(LogisticHead([0.0], 0.0), LinearMap.zeros(2, 1), np.ones((3, 2)), [0, 1, 0])
    assert v == pytest.approx(LN2)


def test_multiview_pred_matches_naive():
    rng = Rng(4)
    psi, beta = LogisticHead(rng.standard_normal(2), 0.2), _lin(rng, 3, 2)
    z, y = rng.standard_normal((5, 3)), np.array([0, 1, 1, 0, 1.0])
    assert loss_multiview_pred(psi, beta, z, y)[0] == pytest.approx(naive_multiview_pred(psi, beta, z, y), abs=1e-12)


def test_multiview_pred_missing_labels():
    with pytest.raises(ValueError):
        loss_multiview_pred(LogisticHead([0.0]), IDENT1, [[1.0]], None)


def test_joint_psi_gradient_is_sum_of_paths():
    """Finite differences of (main + pred) w.r.t. the shared psi equal the sum of each path's gradient."""
    rng = Rng(5)
    phi, beta = _lin(rng.fork("phi"), 4, 2), _lin(rng.fork("beta"), 3, 2)
    psi = LogisticHead(rng.standard_normal(2), 0.3)
    x, z = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    y = np.array([0, 1, 0, 1, 1, 0.0])

    def total():
        return loss_supervised(psi, phi, x, y)[0] + loss_multiview_pred(psi, beta, z, y)[0]

    g = add_grads(loss_supervised(psi, phi, x, y)[1], loss_multiview_pred(psi, beta, z, y)[1])
    for name, arr in psi.params().items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-6
            up = total()
            flat[i] = orig - 1e-6
            down = total()
            flat[i] = orig
            assert (up - down) / 2e-6 == pytest.approx(np.asarray(g["psi"][name]).reshape(-1)[i], abs=1e-8)


# ---------------------------------------------------------------- pairwise

def test_pairwise_similar_hand():
    pairs = PairIndex.from_lists([(0, 1)], [True])
    assert loss_pairwise(IDENT1, [[1.0], [3.0]], pairs, Sigma())[0] == 4.0


def test_pairwise_dissimilar_margin_hand():
    pairs = PairIndex.from_lists([(0, 1)], [False])
    assert loss_pairwise(IDENT1, [[0.0], [1.0]], pairs, Sigma("margin", 2.0))[0] == 1.0


@pytest.mark.parametrize("kind", ["margin", "exp-neg-dist", "gaussian"])
def test_pairwise_six_pairs_naive(kind):
    rng = Rng(6).fork(kind)
    phi = _mlp(rng, 4, 2)
    x = rng.standard_normal((6, 4))
    pairs = PairIndex.from_lists([(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)],
                                 [True, False, False, True, False, False])
    sig = Sigma(kind, 2.0)
    assert loss_pairwise(phi, x, pairs, sig)[0] == pytest.approx(naive_pairwise(phi, x, pairs, sig), abs=1e-12)


def test_margin_gradient_vanishes_at_boundary():
    m = 2.0
    pairs = PairIndex.from_lists([(0, 1)], [False])
    x = np.array([[0.0], [math.sqrt(m)]])
    _, g = loss_pairwise(LinearMap([[1.0]]), x, pairs, Sigma("margin", m))
    assert g["phi"]["weight"][0, 0] == 0.0
    # just outside the margin the loss is flat, so the one-sided difference is 0 too
    outside = loss_pairwise(LinearMap([[1.0 + 1e-6]]), x, pairs, Sigma("margin", m))[0]
    assert outside == 0.0


@pytest.mark.parametrize("pairs,exc", [([(0, 5)], IndexError), ([(1, 1)], ValueError)])
def test_pairwise_index_errors(pairs, exc):
    with pytest.raises(exc):
        loss_pairwise(IDENT1, np.zeros((3, 1)), PairIndex.from_lists(pairs, [True]), Sigma())


def test_pairwise_zero_pairs():
    with pytest.raises(ValueError):
        loss_pairwise(IDENT1, np.zeros((3, 1)), PairIndex.from_lists(np.zeros((0, 2)), []), Sigma())


@given(st.integers(0, 10_000), st.sampled_from(["margin", "exp-neg-dist", "gaussian"]), st.booleans())
def test_pairwise_swap_symmetry(seed, kind, similar):
    rng = Rng(seed)
    phi = _lin(rng, 3, 2)
    x = rng.standard_normal((4, 3))
    a = loss_pairwise(phi, x, PairIndex.from_lists([(0, 2), (1, 3)], [similar, not similar]), Sigma(kind))[0]
    b = loss_pairwise(phi, x, PairIndex.from_lists([(2, 0), (3, 1)], [similar, not similar]), Sigma(kind))[0]
    assert a == pytest.approx(b, abs=1e-14)


# ---------------------------------------------------------------- transformation

def test_transform_fixed_identity_zero():
    rng = Rng(0)
    x0, x1 = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    assert loss_transform_fixed(LinearMap(np.eye(2)), x0, x1, x1 - x0)[0] == pytest.approx(0.0, abs=1e-30)


def test_transform_fixed_hand():
    assert loss_transform_fixed(IDENT1, [[0.0]], [[1.0]], [[3.0]])[0] == 4.0


def test_transform_fixed_sign_convention():
    # z encodes the forward change phi(x_next) - phi(x_t)
    assert loss_transform_fixed(IDENT1, [[0.0]], [[1.0]], [[1.0]])[0] == 0.0
    assert loss_transform_fixed(IDENT1, [[0.0]], [[1.0]], [[-1.0]])[0] == 4.0


def test_transform_fixed_naive():
    rng = Rng(7)
    phi = _mlp(rng, 3, 2)
    x0, x1, z = rng.standard_normal((6, 3)), rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
    assert loss_transform_fixed(phi, x0, x1, z)[0] == pytest.approx(naive_transform_fixed(phi, x0, x1, z), abs=1e-12)


def test_transform_misaligned():
    with pytest.raises(ValueError):
        loss_transform_fixed(IDENT1, np.zeros((3, 1)), np.zeros((2, 1)), np.zeros((3, 1)))


def test_transform_pairs_identical_deltas():
    x0 = np.array([[0.0], [5.0]])
    x1 = x0 + 1.0
    assert loss_transform_pairs(IDENT1, x0, x1, [[1.0], [1.0]])[0] == 0.0


def test_transform_pairs_hand():
    # deltas 1 and 3 under equal z
    assert loss_transform_pairs(IDENT1, [[0.0], [0.0]], [[1.0], [3.0]], [[7.0], [7.0]])[0] == 4.0


def test_transform_pairs_continuous_naive():
    rng = Rng(8)
    phi = _lin(rng, 3, 2)
    x0, x1, z = rng.standard_normal((5, 3)), rng.standard_normal((5, 3)), rng.standard_normal((5, 1))
    got = loss_transform_pairs(phi, x0, x1, z, continuous=True)[0]
    assert got == pytest.approx(naive_transform_pairs(phi, x0, x1, z, continuous=True), abs=1e-12)


def test_transform_pairs_no_match_warns():
    with pytest.warns(NoMatchingPairsWarning):
        v, g = loss_transform_pairs(IDENT1, [[0.0], [0.0]], [[1.0], [3.0]], [[1.0], [2.0]])
    assert v == 0.0 and not g["phi"]["weight"].any()


def test_transform_pairs_needs_two():
    with pytest.raises(ValueError):
        loss_transform_pairs(IDENT1, [[0.0]], [[1.0]], [[1.0]])


# ---------------------------------------------------------------- irrelevance

def test_irrelevance_orthogonal():
    assert irrelevance_penalty(LogisticHead([1.0, 0.0]), LinearMap([[0.0, 1.0]]))[0] == 0.0


def test_irrelevance_parallel():
    assert irrelevance_penalty(LogisticHead([1.0, 0.0]), LinearMap([[1.0, 0.0]]))[0] == 1.0


def test_irrelevance_random_3x2_naive():
    rng = Rng(9)
    psi, beta = LogisticHead(rng.standard_normal(2), 0.5), LinearMap(rng.standard_normal((3, 2)), np.ones(3))
    assert irrelevance_penalty(psi, beta)[0] == pytest.approx(naive_irrelevance(psi, beta), abs=1e-12)


def test_irrelevance_rejects_nonlinear():
    with pytest.raises(TypeError):
        irrelevance_penalty(LogisticHead([1.0, 0.0]), MlpStack.zeros([2, 3, 2]))


# ---------------------------------------------------------------- naive references

def test_naive_references_hand_values():
    assert naive_direct(LinearMap([[2.0]]), [[1.0]], [[1.0]]) == 1.0
    assert naive_pairwise(IDENT1, np.array([[1.0], [3.0]]), PairIndex.from_lists([(0, 1)], [True]), Sigma()) == 4.0
    assert naive_transform_fixed(IDENT1, [[0.0]], [[1.0]], [[3.0]]) == 4.0
    assert naive_irrelevance(LogisticHead([1.0, 0.0]), LinearMap([[1.0, 0.0]])) == 1.0


# ---------------------------------------------------------------- invariants

@given(st.integers(0, 10_000), st.sampled_from(["margin", "exp-neg-dist", "gaussian"]))
def test_every_loss_nonnegative(seed, kind):
    rng = Rng(seed)
    phi, psi = _lin(rng.fork("phi"), 3, 2), LogisticHead(rng.standard_normal(2), 0.0)
    x, xn = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    z2, z3 = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
    y = (rng.uniform01(5) < 0.5).astype(float)
    pairs = PairIndex.from_lists([(0, 1), (2, 3), (4, 0)], [True, False, False])
    values = [
        loss_supervised(psi, phi, x, y)[0],
        loss_direct(phi, x, z2)[0],
        loss_multitask(_lin(rng.fork("b1"), 2, 3), phi, x, z3)[0],
        loss_multiview_corr(_lin(rng.fork("b2"), 3, 2), phi, x, z3, gamma=0.5)[0],
        loss_multiview_pred(psi, _lin(rng.fork("b3"), 3, 2), z3, y)[0],
        loss_pairwise(phi, x, pairs, Sigma(kind))[0],
        loss_transform_fixed(phi, x, xn, z2)[0],
        loss_transform_pairs(phi, x, xn, z2, Sigma(kind), continuous=True)[0],
        irrelevance_penalty(psi, _lin(rng.fork("b4"), 2, 3))[0],
    ]
    assert all(v >= 0 for v in values)


@given(st.integers(0, 10_000))
def test_squared_error_zero_iff_equal(seed):
    rng = Rng(seed)
    phi = _lin(rng, 3, 2)
    x = rng.standard_normal((4, 3))
    s = phi.forward(x)
    assert loss_direct(phi, x, s)[0] == 0.0
    z = s.copy()
    z[rng.integers(4, 1)[0], 0] += 1e-3
    assert loss_direct(phi, x, z)[0] > 0.0
