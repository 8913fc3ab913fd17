"""Acceptance criteria, one test each, each printing a single PASS/FAIL/SKIP line.

Criteria 8 and 9 need the CIFAR-10 binary files under DATA_DIR (or ./data).
Criterion 9 also needs AD_LONG_ACCEPTANCE=1; it takes hours.
"""
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from affine_divergence import conv as C
from affine_divergence import data as D
from affine_divergence import divergence as V
from affine_divergence import experiment as X
from affine_divergence import layers as L
from affine_divergence.tensor import Rng
from gradcheck import layer_grad_errors
from oracles import central_grad, loop_conv, rel_err, scalar_sqnorm


@pytest.fixture
def report(capsys):
    def emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] criterion {label}: {'PASS' if ok else 'FAIL'} - {detail}")
    return emit


def skip_line(capsys, label, reason):
    with capsys.disabled():
        print(f"\n[acceptance] criterion {label}: SKIP - {reason}")
    pytest.skip(reason)


def cifar_or_skip(capsys, label):
    try:
        return D.load_cifar10(os.environ.get("DATA_DIR"))
    except FileNotFoundError as e:
        skip_line(capsys, label, f"CIFAR-10 not available ({e})")


# 1 ---------------------------------------------------------------------------

def _single_sample_trials(kind, trials, seed):
    """Finite-difference effective update against the scalar closed form."""
    out = []
    for t in range(trials):
        rng = Rng(seed, t)
        n = (2, 8, 64)[t % 3]
        layer = V.random_layer(kind, n, 4, rng)
        x, g = rng.normal((1, n)), rng.normal((1, 4))
        eff = V.effective_update(layer, x, g, eta=1e-6)
        factor = {"affine": scalar_sqnorm(x[0]) + 1.0, "affine_like": 1.0, "norm_like": 2.0}[kind]
        out.append(rel_err(eff, factor * g))
    return np.array(out)


def test_criterion_1_affine_divergence_identity(report):
    start = time.perf_counter()
    res = _single_sample_trials("affine", 100, seed=1)
    elapsed = time.perf_counter() - start
    ok = bool(np.all(res < 1e-4)) and elapsed < 10
    report("1 (identity)", ok, f"effective = g (|x|^2 + 1) on {int(np.sum(res < 1e-4))}/100 trials "
           f"(n in 2, 8, 64; eta=1e-6), max relative residual {res.max():.2e}, {elapsed:.2f}s")
    assert ok


def test_criterion_1_residual_linear_in_eta(report):
    etas = (1e-7, 1e-6, 1e-5)
    slopes = []
    for seed in range(10):
        _, slope = V.eta_scaling("affine", etas=etas, seed=seed)
        slopes.append(slope)
    slope = float(np.median(slopes))
    ok = abs(slope - 1.0) <= 0.25
    report("1 (eta scaling)", ok, f"median log-log slope of residual vs eta over {etas} is {slope:+.2f} "
           "(linear scaling needs +1; the layer output is exactly linear in (W, b), so the "
           "finite-difference residual is pure round-off and falls as 1/eta)")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_criterion_2_correction_exactness(report):
    start = time.perf_counter()
    al = _single_sample_trials("affine_like", 100, seed=2)
    nl = _single_sample_trials("norm_like", 100, seed=3)
    elapsed = time.perf_counter() - start
    ok = bool(np.all(al < 1e-4) and np.all(nl < 1e-4)) and elapsed < 10
    report(2, ok, f"affine-like effective = g on {int(np.sum(al < 1e-4))}/100 (max {al.max():.2e}), "
           f"norm-like effective = 2g on {int(np.sum(nl < 1e-4))}/100 (max {nl.max():.2e}), {elapsed:.2f}s")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_criterion_3_batched_mixing(report):
    start = time.perf_counter()
    total = good = dominated = checked = 0
    for kind in ("affine", "affine_like", "norm_like"):
        for B in (2, 4, 8):
            for r in V.divergence_trials(kind, 20, B=B, seed=100 + B):
                total += 1
                good += r.residual < 1e-4
                if kind != "affine":
                    checked += 1
                    dominated += X.offdiag_dominated(r.mixing)
    elapsed = time.perf_counter() - start
    ok = good == total and dominated == checked and elapsed < 30
    report(3, ok, f"effective = M g on {good}/{total} random batches (B in 2,4,8); "
           f"|off-diag| <= diag on {dominated}/{checked} corrected batches, {elapsed:.2f}s")
    assert ok


# 4 ---------------------------------------------------------------------------

def _dense(cls, cfg=L.DEFAULT_CORRECTION):
    def make(rng):
        p = L.AffineParams(rng.normal((3, 5)), rng.normal(3))
        return cls(5, 3, params=p, cfg=cfg), rng.normal((4, 5)), rng.normal((4, 3))
    return make


def _plain(cls, shape=(4, 5)):
    def make(rng):
        return cls(), rng.normal(shape), rng.normal(shape)
    return make


def _conv(factory):
    def make(rng):
        spec = C.ConvSpec(2, 2, 2, 2, int(rng.integers(1, 3)), 1)
        params = C.ConvParams(rng.normal((2, 2, 2, 2)), rng.normal(2))
        x = rng.normal((2, 2, 4, 4))
        out, _ = C.conv_forward(spec, params, x)
        return factory(spec, params), x, rng.normal(out.shape)
    return make


def _pool(cls):
    def make(rng):
        x = rng.normal((2, 3, 3, 3))
        out = cls().forward(x)
        return cls(), x, rng.normal(out.shape)
    return make


EVERY_LAYER = {
    "affine": _dense(L.Affine),
    "affine_like": _dense(L.AffineLike),
    "norm_like": _dense(L.NormLike),
    "norm_like_half": _dense(L.NormLike, L.CorrectionConfig(lr_multiplier=0.5)),
    "batchnorm": _plain(L.BatchNorm),
    "layernorm": _plain(L.LayerNorm),
    "rmsnorm": _plain(L.RMSNorm),
    "l2norm": _plain(L.L2Norm),
    "tanh": _plain(L.Tanh),
    "leaky_relu": _plain(L.LeakyReLU),
    "isotropic_tanh": _plain(L.IsotropicTanh),
    "identity": _plain(L.Identity),
    "conv": _conv(lambda s, p: C.Conv2D(s, params=p)),
    "patchnorm_affine_like": _conv(lambda s, p: C.PatchNormConv(s, "affine_like", params=p)),
    "patchnorm_norm_like": _conv(lambda s, p: C.PatchNormConv(s, "norm_like", params=p)),
    "global_avg_pool": _pool(C.GlobalAvgPool),
    "flatten": _pool(C.Flatten),
}


def test_criterion_4_gradient_checks(report):
    start = time.perf_counter()
    worst = {}
    for name, make in EVERY_LAYER.items():
        worst[name] = 0.0
        for t in range(50):
            layer, x, g = make(Rng(400, t))
            worst[name] = max(worst[name], max(layer_grad_errors(layer, x, g).values()))
    xent = 0.0
    for t in range(50):
        rng = Rng(401, t)
        logits, labels = rng.normal((4, 6)), rng.integers(0, 6, 4)
        _, g = L.softmax_cross_entropy(logits, labels)
        xent = max(xent, rel_err(g, central_grad(lambda z: L.softmax_cross_entropy(z, labels)[0], logits)))
    worst["softmax_cross_entropy"] = xent
    elapsed = time.perf_counter() - start
    bad = [k for k, v in worst.items() if not v < 1e-6]
    ok = not bad and elapsed < 60
    report(4, ok, f"{len(worst)} layers x 50 trials, max relative error {max(worst.values()):.2e} "
           f"({max(worst, key=worst.get)}), failing: {bad or 'none'}, {elapsed:.2f}s")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_criterion_5_conv_equivalence(report):
    start = time.perf_counter()
    worst = worst_1x1 = 0.0
    for t in range(50):
        rng = Rng(500, t)
        Cin, Cout, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        H, W = int(rng.integers(k, 8)), int(rng.integers(k, 8))
        spec = C.ConvSpec(Cin, Cout, k, k, s, p)
        params = C.ConvParams(rng.normal((Cout, Cin, k, k)), rng.normal(Cout))
        x = rng.normal((Cin, H, W))
        y, _ = C.conv_forward(spec, params, x)
        ref = loop_conv(x, params.W, params.b, s, p)
        worst = max(worst, float(np.max(np.abs(y - ref)) / np.max(np.abs(ref))))

        spec1 = C.ConvSpec(Cin, Cout, 1, 1)
        p1 = C.ConvParams(rng.normal((Cout, Cin, 1, 1)), rng.normal(Cout))
        y1, _ = C.patchnorm_forward(spec1, p1, x, "affine_like")
        z = np.empty_like(y1)
        for i in range(H):
            for j in range(W):
                out, _ = L.affine_like_forward(L.AffineParams(p1.W[:, :, 0, 0], p1.b), x[:, i, j][None])
                z[:, i, j] = out[0]
        worst_1x1 = max(worst_1x1, float(np.max(np.abs(y1 - z)) / np.max(np.abs(z))))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and worst_1x1 < 1e-12 and elapsed < 30
    report(5, ok, f"unroll+matmul vs nested-loop conv max relative error {worst:.2e}; "
           f"1x1 PatchNorm vs pixelwise affine-like {worst_1x1:.2e} (50 trials, tol 1e-12), {elapsed:.2f}s")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_criterion_6_attention_second_order(report):
    start = time.perf_counter()
    ratios, masked = [], 0
    for t, d, n in ((1, 1, 1), (2, 3, 2), (3, 4, 2), (4, 4, 4), (4, 2, 3)):
        rep = V.attention_divergence_check(t=t, d=d, n=n, eta=1e-2, trials=10, seed=600 + t)
        ratios.extend(rep.checked.tolist())
        masked += rep.masked
    elapsed = time.perf_counter() - start
    ratios = np.array(ratios)
    ok = ratios.size >= 45 and bool(np.all(np.abs(ratios - 4.0) <= 0.5)) and elapsed < 5
    report(6, ok, f"residual ratio when eta halves: min {ratios.min():.4f}, max {ratios.max():.4f} "
           f"over {ratios.size} toys (t, d, n <= 4; {masked} with an eta^2 term below round-off "
           f"excluded), {elapsed:.2f}s")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_criterion_7_backward_geometry(report):
    start = time.perf_counter()
    radii = np.logspace(-3, 3, 61)
    al_ok, nl_slopes, growth = True, [], []
    for seed in range(5):
        al = V.backward_geometry("affine_like", radii=radii, seed=seed)
        nl = V.backward_geometry("norm_like", radii=radii, seed=seed)
        al_ok &= al["ok"]
        growth.append(al["max_growth"])
        nl_slopes.append(nl["small_norm_slope"])
    elapsed = time.perf_counter() - start
    nl_ok = all(abs(s + 1.0) <= 0.1 for s in nl_slopes)
    ok = al_ok and nl_ok and elapsed < 10
    report(7, ok, f"affine-like dX within its closed-form bound at every radius (max growth over |x|=1: "
           f"{max(growth):.2f}); norm-like small-norm slopes {min(nl_slopes):+.3f}..{max(nl_slopes):+.3f}, "
           f"{elapsed:.2f}s")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_criterion_8_desk_scale_training(report, capsys):
    train, test = cifar_or_skip(capsys, 8)
    base = X.ExperimentConfig(arch=(3072, 32, 10), activation="tanh", eta=0.001, batch_size=32,
                              epochs=10, repeats=3)
    jobs = int(os.environ.get("AD_JOBS", "1"))
    res = {}
    for norm in ("none", "affine_correction"):
        recs = X.run_repeats(replace(base, normaliser=norm), train, test, jobs)
        res[norm] = X.mean_se([r.test_acc[-1] for r in recs])
    (m0, s0), (m1, s1) = res["none"], res["affine_correction"]
    ok = m1 - m0 >= 2.0 and m1 - s1 > m0 + s0
    report(8, ok, f"final test accuracy affine_correction {m1:.2f} +- {s1:.2f} vs none {m0:.2f} +- {s0:.2f} "
           f"(gap {m1 - m0:+.2f} points)")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_criterion_9_table_reproduction(report, capsys):
    if os.environ.get("AD_LONG_ACCEPTANCE") != "1":
        skip_line(capsys, 9, "long-running; set AD_LONG_ACCEPTANCE=1 to run (hours)")
    train, test = cifar_or_skip(capsys, 9)
    jobs = int(os.environ.get("AD_JOBS", "1"))
    grid = [8, 16, 32, 64, 128]
    out = {}
    for norm in ("affine_correction", "l2_half"):
        cfg = X.ExperimentConfig(arch=(3072, 32, 10), normaliser=norm, activation="tanh", eta=0.001,
                                 epochs=100, repeats=5)
        rows, fit = X.run_sweep(cfg, "batch_size", grid, train, test, jobs)
        out[norm] = (float(np.mean([r["test_acc"] for r in rows])), fit)
    avg, fit = out["affine_correction"]
    ok = fit.slope < 0 and out["l2_half"][1].slope < 0 and abs(avg - 50.56) <= 3.0
    report(9, ok, f"affine_correction avg {avg:.2f} (target 50.56 +- 3), slope {fit.slope:.3e} +- "
           f"{fit.slope_se:.1e}; l2_half slope {out['l2_half'][1].slope:.3e}")
    assert ok


# 10 --------------------------------------------------------------------------

def test_criterion_10_cloud_properties(report):
    start = time.perf_counter()
    _, rms = X.cloud_points("rmsnorm", 1000, seed=10)
    _, l2 = X.cloud_points("l2", 1000, seed=10)
    _, ln = X.cloud_points("layernorm", 1000, seed=10)
    _, al = X.cloud_points("affine_like", 1000, seed=10)
    r_rms = np.linalg.norm(rms, axis=1)
    r_l2 = np.linalg.norm(l2, axis=1)
    r_al = np.linalg.norm(al, axis=1)
    clusters = {tuple(np.round(p, 9)) for p in ln}
    checks = {
        "rmsnorm radius sqrt(2)": np.allclose(r_rms, np.sqrt(2), rtol=1e-12),
        "l2 radius 1": np.allclose(r_l2, 1.0, rtol=1e-12),
        "layernorm two points": clusters == {(-1.0, 1.0), (1.0, -1.0)},
        "affine-like radii < 1": bool(np.all(r_al < 1.0)),
        "affine-like spread > 0.05": float(np.std(r_al, ddof=1)) > 0.05,
    }
    elapsed = time.perf_counter() - start
    ok = all(checks.values()) and elapsed < 5
    report(10, ok, ", ".join(f"{k}: {'ok' if v else 'no'}" for k, v in checks.items())
           + f", affine-like radius std {np.std(r_al, ddof=1):.3f}, {elapsed:.2f}s")
    assert ok
