import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from affine_divergence import divergence as V
from affine_divergence import layers as L
from affine_divergence.tensor import Rng

X34 = np.array([[3.0, 4.0]])
G12 = np.array([[1.0, -2.0]])


def layer(kind, n=2, out=2, seed=0, cfg=None):
    return V.random_layer(kind, n, out, Rng(seed), cfg)


# -- single-sample divergence ----------------------------------------------------

def test_affine_divergence_hand_example():
    rep = V.measure_effective_update(layer("affine"), X34, G12)
    assert np.allclose(rep.effective, [[26.0, -52.0]], rtol=1e-4)
    assert rep.passed and rep.residual < 1e-4
    assert np.allclose(rep.ratio.filled(np.nan), 26.0, rtol=1e-4)


def test_norm_like_doubles_the_step():
    rep = V.measure_effective_update(layer("norm_like"), X34, G12)
    assert np.allclose(rep.effective, 2 * G12, rtol=1e-4) and rep.passed


def test_norm_like_half_eta_gives_ideal_step():
    rep = V.measure_effective_update(layer("norm_like", cfg=L.CorrectionConfig(lr_multiplier=0.5)), X34, G12)
    assert np.allclose(rep.effective, G12, rtol=1e-4) and rep.passed


def test_affine_like_gives_ideal_step():
    rep = V.measure_effective_update(layer("affine_like"), X34, G12)
    assert np.allclose(rep.effective, G12, rtol=1e-4) and rep.passed


@pytest.mark.parametrize("kind", ["affine_like", "norm_like"])
def test_alpha_beta_reweighted_forms_match_their_mixing(kind):
    cfg = L.CorrectionConfig(alpha=0.7, beta=0.3)
    rng = Rng(1)
    rep = V.measure_effective_update(layer(kind, 5, 3, 1, cfg), rng.normal((3, 5)), rng.normal((3, 3)))
    assert rep.passed, rep.residual


@pytest.mark.parametrize("kind", ["affine", "affine_like", "norm_like"])
def test_random_trials_pass(kind):
    reps = V.divergence_trials(kind, 12)
    assert all(r.passed for r in reps)
    assert [r.n for r in reps[:3]] == [2, 8, 64]


def test_residual_is_reported_not_hidden():
    rep = V.measure_effective_update(layer("affine"), X34, G12, tol=1e-30)
    assert not rep.passed and rep.residual > 0


def test_ratio_masks_tiny_ideal_entries():
    rep = V.measure_effective_update(layer("affine"), X34, np.array([[0.0, 1.0]]))
    assert rep.ratio.mask.tolist() == [[True, False]]


# -- eta dependence ----------------------------------------------------------------

@pytest.mark.parametrize("kind", ["affine", "affine_like", "norm_like"])
def test_effective_update_is_exactly_linear_in_parameters(kind):
    # every map here is linear in (W, b) at fixed x, so there is no O(eta) truncation term:
    # the finite-difference quotient equals the closed form up to round-off only
    res, slope = V.eta_scaling(kind, etas=(1e-7, 1e-6, 1e-5, 1e-4, 1e-2, 1.0))
    assert np.all(res < 1e-4)
    assert slope < 0
    assert res[-1] < 1e-12


# -- mixing matrices ---------------------------------------------------------------

def test_mixing_examples():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert V.mixing_matrix(x, "raw").M.tolist() == [[2.0, 1.0], [1.0, 2.0]]
    assert np.allclose(V.mixing_matrix(x, "affine_like").M, [[1.0, 0.5], [0.5, 1.0]], rtol=1e-15)
    assert np.allclose(V.mixing_matrix(x, "norm_like").M, [[2.0, 1.0], [1.0, 2.0]], rtol=1e-15)


def test_mixing_zero_sample_norm_like():
    with pytest.raises(L.ZeroInputNorm):
        V.mixing_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]), "norm_like")


@given(st.integers(0, 10**6), st.integers(1, 9), st.integers(1, 6))
def test_mixing_decomposition_and_dominance(seed, B, n):
    x = Rng(seed).normal((B, n)) * 3
    raw = V.mixing_matrix(x, "raw")
    assert np.array_equal(raw.diagonal + 0, np.diag(raw.M)) and np.array_equal(np.diag(raw.off_diagonal), np.zeros(B))
    assert np.array_equal(np.diag(raw.diagonal) + raw.off_diagonal, raw.M)
    assert np.array_equal(raw.M, raw.M.T)
    for kind, d in (("affine_like", 1.0), ("norm_like", 2.0)):
        mix = V.mixing_matrix(x, kind)
        assert np.allclose(mix.diagonal, d, rtol=1e-12)
        assert np.all(np.abs(mix.off_diagonal) <= d * (1 + 1e-12))


@pytest.mark.parametrize("kind", ["affine", "affine_like", "norm_like"])
@pytest.mark.parametrize("B", [2, 4, 8])
def test_batched_effective_update_is_mixed(kind, B):
    reps = V.divergence_trials(kind, 6, B=B, seed=B)
    assert all(r.passed for r in reps)
    if kind != "affine":
        target = 1.0 if kind == "affine_like" else 2.0
        assert all(np.allclose(r.mixing.diagonal, target, rtol=1e-4) for r in reps)


@pytest.mark.parametrize("kind", ["raw", "affine_like", "norm_like"])
def test_interference_grows_with_batch_size(kind):
    means = []
    for B in (2, 4, 8, 16, 32):
        vals = [V.mixing_matrix(Rng(5, B, t).normal((B, 8)), kind).interference for t in range(200)]
        means.append(np.mean(vals))
    assert all(b >= a for a, b in zip(means, means[1:])), means


# -- backward formulas -----------------------------------------------------------

def test_affine_input_grad_is_gW():
    lay = layer("affine", 3, 2, 4)
    lay.forward(np.ones((1, 3)))
    g = np.array([[1.0, 2.0]])
    assert np.array_equal(lay.backward(g), g @ lay.params["W"])


@pytest.mark.parametrize("kind", ["affine", "affine_like", "norm_like"])
def test_verify_backward_formulas(kind):
    rep = V.verify_backward_formulas(kind, trials=10)
    assert rep.passed, rep
    assert rep.max_analytic_gap < 1e-8 and rep.max_fd_error < 1e-6


def test_backward_geometry_contrast():
    al = V.backward_geometry("affine_like")
    nl = V.backward_geometry("norm_like")
    assert al["ok"] and nl["ok"]
    assert abs(nl["small_norm_slope"] + 1) <= 0.1
    assert nl["grad_norms"][0] / nl["ref_norm"] > 100
    assert al["grad_norms"].max() <= al["bound"].max()


def test_central_difference_helper():
    x = np.array([1.0, 2.0])
    assert np.allclose(V.central_difference(lambda v: float(v @ v), x), 2 * x, rtol=1e-9)


# -- attention ---------------------------------------------------------------------

def test_attention_scalar_example():
    one = np.ones((1, 1))
    delta = V.attention_step_delta(one, one, one, one, 0.01)
    assert abs(delta.item() - (-0.02 + 0.0001)) < 1e-15
    first, second = V.attention_update_terms(one, one, one, one)
    assert abs(-0.01 * first.item() + 1e-4 * second.item() - delta.item()) < 1e-15


def test_attention_zero_gradient():
    rng = Rng(6)
    X, WQ, WK = rng.normal((3, 4)), rng.normal((2, 4)), rng.normal((2, 4))
    assert not V.attention_step_delta(X, WQ, WK, np.zeros((3, 3)), 0.1).any()


def test_attention_scores_definition():
    rng = Rng(7)
    X, WQ, WK = rng.normal((3, 4)), rng.normal((2, 4)), rng.normal((2, 4))
    Y = V.attention_scores(X, WQ, WK)
    ref = [[(WK @ X[s]) @ (WQ @ X[t]) for s in range(3)] for t in range(3)]
    assert np.allclose(Y, ref, rtol=1e-13)


def test_attention_second_order_scaling():
    rep = V.attention_divergence_check(trials=10)
    assert rep.passed and np.all(np.abs(rep.ratios - 4) <= 0.5)
    assert rep.second_order_gap < 1e-8
    assert rep.masked == 0


def test_attention_residual_is_exactly_quadratic():
    rng = Rng(8)
    X, WQ, WK, g = rng.normal((2, 3)), rng.normal((2, 3)), rng.normal((2, 3)), rng.normal((2, 2))
    first, second = V.attention_update_terms(X, WQ, WK, g)
    for eta in (0.5, 0.1):
        delta = V.attention_step_delta(X, WQ, WK, g, eta)
        assert np.allclose(delta, -eta * first + eta * eta * second, rtol=1e-12, atol=1e-12)


def test_attention_round_off_trials_are_masked(monkeypatch):
    # inputs scaled to ~1e-8 make the eta^2 term ~1e-30 relative: no signal left
    real = Rng.normal
    monkeypatch.setattr(Rng, "normal", lambda self, shape: 1e-8 * real(self, shape))
    rep = V.attention_divergence_check(t=1, d=1, n=1, trials=3)
    assert rep.masked == 3 and not rep.passed


def test_attention_literal_key_term_is_not_first_order_exact():
    lit = V.attention_divergence_check(trials=10, literal=True)
    assert not lit.passed and np.all(np.abs(lit.checked - 2) < 0.2)


def test_attention_size_guard():
    with pytest.raises(L.ConfigurationError):
        V.attention_divergence_check(t=5)


# -- gradient-only policies ------------------------------------------------------------

def test_global_policy_gives_ideal_step():
    rep = V.lr_policy_check("global", layer("affine"), X34, G12)
    assert rep.passed and np.allclose(rep.effective, G12, rtol=1e-4)


def test_local_policy_splits_step_in_halves():
    rep = V.lr_policy_check("local", layer("affine"), X34, G12)
    assert rep.passed
    assert np.allclose(rep.weight_part, G12 / 2, rtol=1e-4) and np.allclose(rep.bias_part, G12 / 2, rtol=1e-4)


def test_policy_guards():
    with pytest.raises(L.ConfigurationError):
        V.lr_policy_check("global", layer("affine"), np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(L.ZeroInputNorm):
        V.lr_policy_check("local", layer("affine"), np.zeros((1, 2)), G12)
    with pytest.raises(ValueError):
        V.lr_policy_check("local", layer("affine_like"), X34, G12)


# -- csv ---------------------------------------------------------------------------

def test_report_csv():
    reps = V.divergence_trials("affine", 2, B=3)
    buf = io.StringIO()
    V.write_report_csv([r.row() for r in reps], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "kind,B,n,eta,residual,diag_mean,offdiag_norm"
    assert len(lines) == 3 and lines[1].startswith("affine,3,2,1e-06,")
