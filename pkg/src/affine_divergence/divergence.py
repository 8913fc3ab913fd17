"""Ideal versus effective representation updates, measured numerically.

The ideal update of a layer output ``z`` is its loss gradient ``g``.  The
effective update is what a parameter step actually does to ``z`` for the
same input: step the parameters with the gradients implied by ``g``, run
the forward pass again, and take ``(z - z') / eta``.  For affine-family
layers this equals ``M @ g`` for a batch mixing matrix ``M`` that depends
only on the inputs; the closed forms live in :func:`mixing_matrix`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .layers import Affine, AffineLike, ConfigurationError, CorrectionConfig, NormLike
from .optim import gradient_only_policy
from .tensor import DTYPE, NonFiniteError, Rng

DEFAULT_ETA = 1e-6
DEFAULT_TOL = 1e-4
RATIO_MASK = 1e-12
ATTENTION_FLOOR = 1e-10

LAYER_CLASSES = {"affine": Affine, "affine_like": AffineLike, "norm_like": NormLike}


@dataclass
class MixingMatrix:
    M: np.ndarray
    diagonal: np.ndarray = field(init=False)
    off_diagonal: np.ndarray = field(init=False)

    def __post_init__(self):
        self.diagonal = np.diag(self.M).copy()
        self.off_diagonal = self.M - np.diag(self.diagonal)

    @property
    def interference(self):
        """Mean over samples of the summed |off-diagonal| weight on other samples."""
        return float(np.abs(self.off_diagonal).sum(axis=1).mean())


def mixing_matrix(x, kind: str = "raw", cfg: CorrectionConfig | None = None) -> MixingMatrix:
    """Gram-like matrix M with effective update = M @ g for a batch ``x`` of shape (B, n).

    raw:         x_b . x_k + 1
    affine_like: (x_b . x_k + 1) / (s_b s_k),  s = sqrt(|x|^2 + 1)
    norm_like:   xhat_b . xhat_k + 1  (diagonal 2)

    With ``cfg`` the alpha/beta reweighted forms are used instead.
    """
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    gram = x @ x.T
    if kind == "raw":
        return MixingMatrix(gram + 1.0)
    cfg = cfg or CorrectionConfig()
    a = cfg.alpha
    sq = np.diag(gram)
    if kind == "affine_like":
        beta = 1.0 if cfg.beta is None else cfg.beta
        s = np.sqrt(a * a * sq + beta * beta)
        return MixingMatrix((a * a * gram + beta * beta) / np.outer(s, s))
    if kind == "norm_like":
        norms = np.sqrt(sq)
        if np.any(norms <= cfg.eps):
            raise L.ZeroInputNorm("zero-norm sample in norm-like mixing matrix")
        if cfg.beta is None:
            return MixingMatrix(gram / np.outer(norms, norms) + 1.0)
        beta = cfg.beta
        s = norms * abs(a) / np.sqrt(1.0 - beta * beta)
        return MixingMatrix(a * a * gram / np.outer(s, s) + beta * beta)
    raise ValueError(f"unknown mixing kind {kind!r}")


_MIXING_KIND = {"affine": "raw", "affine_like": "affine_like", "norm_like": "norm_like"}


@dataclass
class DivergenceReport:
    kind: str
    ideal: np.ndarray
    effective: np.ndarray
    predicted: np.ndarray
    residual: float
    eta_used: float
    tol: float = DEFAULT_TOL
    mixing: MixingMatrix | None = None
    n: int | None = None

    @property
    def ratio(self):
        mask = np.abs(self.ideal) < RATIO_MASK
        safe = np.where(mask, 1.0, self.ideal)
        return np.ma.masked_array(self.effective / safe, mask=mask)

    @property
    def passed(self):
        return bool(self.residual < self.tol)

    def row(self):
        B, n = self.ideal.shape[0], self.n
        if self.mixing is not None:
            diag_mean = float(self.mixing.diagonal.mean())
            off = self.mixing.interference
        else:
            diag_mean, off = float("nan"), float("nan")
        return {"kind": self.kind, "B": B, "n": n, "eta": self.eta_used,
                "residual": self.residual, "diag_mean": diag_mean, "offdiag_norm": off}


def relative_residual(effective, predicted):
    denom = np.max(np.abs(predicted))
    if denom == 0:
        return float(np.max(np.abs(effective)))
    return float(np.max(np.abs(effective - predicted)) / denom)


def effective_update(layer: L.Layer, x, g, eta: float = DEFAULT_ETA, multipliers=None):
    """(z - z') / eta after one plain gradient step on a clone of ``layer``.

    ``multipliers`` maps parameter names to LR factors (default: the layer's
    own ``lr_multiplier`` for every parameter).
    """
    probe = layer.clone()
    z = probe.forward(x)
    probe.backward(g)
    if multipliers is None:
        multipliers = {name: layer.lr_multiplier for name in probe.params}
    stepped = {name: p - eta * multipliers.get(name, 1.0) * probe.grads[name]
               for name, p in probe.params.items()}
    after = layer.clone()
    after.apply_update(stepped)
    z_new = after.forward(x)
    eff = (z - z_new) / eta
    if not np.all(np.isfinite(eff)):
        raise NonFiniteError("effective update is not finite")
    return eff


def measure_effective_update(layer: L.Layer, x, g, eta: float = DEFAULT_ETA,
                             tol: float = DEFAULT_TOL) -> DivergenceReport:
    """Compare the finite-difference effective update with its closed form."""
    if layer.kind not in _MIXING_KIND:
        raise ValueError(f"no closed-form mixing for layer kind {layer.kind!r}")
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    g = np.atleast_2d(np.asarray(g, dtype=DTYPE))
    eff = effective_update(layer, x, g, eta)
    mix = mixing_matrix(x, _MIXING_KIND[layer.kind], getattr(layer, "cfg", None))
    predicted = layer.lr_multiplier * (mix.M @ g)
    return DivergenceReport(kind=layer.kind, ideal=g, effective=eff, predicted=predicted,
                            residual=relative_residual(eff, predicted), eta_used=eta,
                            tol=tol, mixing=mix, n=x.shape[1])


def random_layer(kind: str, n: int, out: int, rng: Rng, cfg: CorrectionConfig | None = None):
    params = L.AffineParams(rng.normal((out, n)), rng.normal(out))
    cls = LAYER_CLASSES[kind]
    return cls(n, out, params=params, cfg=cfg or CorrectionConfig())


def divergence_trials(kind: str, trials: int, n_values=(2, 8, 64), B: int = 1, out: int = 4,
                      eta: float = DEFAULT_ETA, seed: int = 0, tol: float = DEFAULT_TOL):
    """Random (W, b, x, g) trials, cycling through input widths ``n_values``."""
    reports = []
    for t in range(trials):
        rng = Rng(seed, t)
        n = n_values[t % len(n_values)]
        layer = random_layer(kind, n, out, rng)
        x = rng.normal((B, n))
        g = rng.normal((B, out))
        reports.append(measure_effective_update(layer, x, g, eta, tol))
    return reports


def eta_scaling(kind: str, etas=(1e-7, 1e-6, 1e-5), n: int = 8, B: int = 1, seed: int = 0):
    """Residual of one random instance at each eta, plus the log-log slope."""
    rng = Rng(seed, 12345)
    layer = random_layer(kind, n, 4, rng)
    x, g = rng.normal((B, n)), rng.normal((B, 4))
    res = np.array([measure_effective_update(layer, x, g, eta).residual for eta in etas])
    floor = np.maximum(res, np.finfo(DTYPE).tiny)
    slope = float(np.polyfit(np.log(etas), np.log(floor), 1)[0])
    return res, slope


# -- backward-pass closed forms ----------------------------------------------

def closed_form_input_grad(kind: str, W, b, x, g):
    """Input gradient of one sample evaluated index by index from the printed formulas."""
    W, b, x, g = (np.asarray(v, dtype=DTYPE) for v in (W, b, x, g))
    out, n = W.shape
    sq = sum(x[j] * x[j] for j in range(n))
    dx = np.zeros(n)
    if kind == "affine":
        for k in range(n):
            dx[k] = sum(g[i] * W[i, k] for i in range(out))
    elif kind == "norm_like":
        r = np.sqrt(sq)
        Wx = [sum(W[i, j] * x[j] for j in range(n)) for i in range(out)]
        for k in range(n):
            dx[k] = sum(g[i] * (W[i, k] / r - Wx[i] * x[k] / r ** 3) for i in range(out))
    elif kind == "affine_like":
        s = np.sqrt(sq + 1.0)
        y = [(sum(W[i, j] * x[j] for j in range(n)) + b[i]) / s for i in range(out)]
        for k in range(n):
            dx[k] = sum(g[i] * (W[i, k] / s - y[i] * x[k] / (sq + 1.0)) for i in range(out))
    else:
        raise ValueError(kind)
    return dx


def central_difference(f, x, h: float = 1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def input_grad_norm_sweep(kind: str, radii, W, b, direction, g):
    """|dL/dx| along x = r * direction for each radius r."""
    u = np.asarray(direction, dtype=DTYPE)
    u = u / np.linalg.norm(u)
    layer = LAYER_CLASSES[kind](W.shape[1], W.shape[0], params=L.AffineParams(W, b))
    norms, outputs = [], []
    for r in radii:
        z = layer.forward((r * u)[None])
        norms.append(np.linalg.norm(layer.backward(g[None])))
        outputs.append(z[0])
    return np.array(norms), np.array(outputs)


def affine_like_input_grad_bound(radii, W, g, outputs):
    """Triangle bound on the affine-like input gradient: |gW|/s + |y||g| r / s^2."""
    radii = np.asarray(radii, dtype=DTYPE)
    s2 = radii ** 2 + 1.0
    gW = np.linalg.norm(g @ W)
    return gW / np.sqrt(s2) + np.linalg.norm(outputs, axis=1) * np.linalg.norm(g) * radii / s2


@dataclass
class BackwardReport:
    kind: str
    trials: int
    max_analytic_gap: float
    max_fd_error: float
    sweep: dict = field(default_factory=dict)

    @property
    def passed(self):
        ok = self.max_analytic_gap < 1e-8 and self.max_fd_error < 1e-6
        return ok and self.sweep.get("ok", True)


def verify_backward_formulas(kind: str, trials: int = 20, seed: int = 0, n: int = 5, out: int = 3):
    """Implemented dX against the closed forms (separate code path) and finite differences."""
    gap = fd = 0.0
    for t in range(trials):
        rng = Rng(seed, 7, t)
        W, b = rng.normal((out, n)), rng.normal(out)
        x, g = rng.normal(n), rng.normal(out)
        layer = LAYER_CLASSES[kind](n, out, params=L.AffineParams(W, b))
        layer.forward(x[None])
        dx = layer.backward(g[None])[0]
        gap = max(gap, rel_error(dx, closed_form_input_grad(kind, W, b, x, g)))

        def probe(xv):
            return float(layer.clone().forward(xv[None])[0] @ g)

        fd = max(fd, rel_error(dx, central_difference(probe, x)))
    report = BackwardReport(kind, trials, gap, fd)
    if kind in ("affine_like", "norm_like"):
        report.sweep = backward_geometry(kind, seed=seed)
    return report


def backward_geometry(kind: str, radii=None, seed: int = 0, n: int = 6, out: int = 4):
    """Input-gradient growth over |x| in [1e-3, 1e3].

    affine_like: every |dX(r)| obeys the triangle bound of its closed form, and
    the growth over |dX(1)| never exceeds that bound's ratio.
    norm_like: the log-log slope of |dX| against r at small r is about -1.
    """
    radii = np.logspace(-3, 3, 61) if radii is None else np.asarray(radii)
    rng = Rng(seed, 99)
    W, b = rng.normal((out, n)), rng.normal(out)
    u, g = rng.normal(n), rng.normal(out)
    norms, outputs = input_grad_norm_sweep(kind, radii, W, b, u, g)
    ref = norms[np.argmin(np.abs(radii - 1.0))]
    result = {"radii": radii, "grad_norms": norms, "ref_norm": float(ref)}
    if kind == "affine_like":
        bound = affine_like_input_grad_bound(radii, W, g, outputs)
        growth = norms / ref
        allowed = bound / ref
        result.update(bound=bound, max_growth=float(growth.max()),
                      ok=bool(np.all(norms <= bound * (1 + 1e-12)) and np.all(growth <= allowed * (1 + 1e-12))))
    else:
        small = radii <= 1e-1
        slope = float(np.polyfit(np.log(radii[small]), np.log(norms[small]), 1)[0])
        result.update(small_norm_slope=slope, ok=bool(abs(slope + 1.0) <= 0.1))
    return result


# -- attention ---------------------------------------------------------------

def attention_scores(X, WQ, WK):
    """Y_ts = (W_K x_s) . (W_Q x_t), i.e. X WQ^T WK X^T."""
    return X @ WQ.T @ WK @ X.T


def attention_grads(X, WQ, WK, g):
    dWQ = np.einsum("ts,np,tm,sp->nm", g, WK, X, X)
    dWK = np.einsum("ts,nq,tq,sm->nm", g, WQ, X, X)
    dX = (np.einsum("ns,ip,im,sp->nm", g, WK, WQ, X)
          + np.einsum("tn,im,iq,tq->nm", g, WK, WQ, X))
    return dWQ, dWK, dX


def attention_update_terms(X, WQ, WK, g, literal: bool = False):
    """First- and second-order coefficients of Y' - Y in eta.

    Y' = Y - eta * X A X^T + eta^2 * X C X^T with
    A = WQ^T WQ G + G WK^T WK,  C = G WK^T WQ G,  G = X^T g X.
    ``literal=True`` uses G^T in the key term instead, which coincides with
    the above only for symmetric g.
    """
    G = X.T @ g @ X
    Q2, K2 = WQ.T @ WQ, WK.T @ WK
    A = Q2 @ G + (G.T @ K2 if literal else G @ K2)
    C = G @ WK.T @ WQ @ G
    return X @ A @ X.T, X @ C @ X.T


@dataclass
class AttentionReport:
    ratios: np.ndarray  # nan where the eta^2 term is below round-off
    second_order_gap: float
    eta: float

    @property
    def masked(self):
        return int(np.sum(np.isnan(self.ratios)))

    @property
    def checked(self):
        return self.ratios[~np.isnan(self.ratios)]

    @property
    def passed(self):
        r = self.checked
        return bool(r.size > 0 and np.all(np.abs(r - 4.0) <= 0.5))


def attention_step_delta(X, WQ, WK, g, eta):
    dWQ, dWK, _ = attention_grads(X, WQ, WK, g)
    return attention_scores(X, WQ - eta * dWQ, WK - eta * dWK) - attention_scores(X, WQ, WK)


def attention_divergence_check(t: int = 3, d: int = 4, n: int = 2, eta: float = 1e-2,
                               trials: int = 10, seed: int = 0, literal: bool = False):
    """Residual after removing the first-order term, at eta and eta/2, for random toys.

    Y is bilinear in (WQ, WK), so the residual is exactly eta^2 X C X^T and the
    ratio is 4 up to round-off.  Trials whose eta^2 term at eta/2 is below
    ATTENTION_FLOOR * |Y| carry no signal above double precision and get a nan ratio.
    """
    if max(t, d, n) > 4:
        raise ConfigurationError("attention check is meant for toy sizes t, d, n <= 4")
    ratios, gap = [], 0.0
    for k in range(trials):
        rng = Rng(seed, 31, k)
        X, WQ, WK = rng.normal((t, d)), rng.normal((n, d)), rng.normal((n, d))
        g = rng.normal((t, t))
        first, second = attention_update_terms(X, WQ, WK, g, literal)
        res = []
        for e in (eta, eta / 2):
            delta = attention_step_delta(X, WQ, WK, g, e)
            r = delta + e * first
            if not np.all(np.isfinite(r)):
                raise NonFiniteError("attention residual is not finite")
            res.append(np.linalg.norm(r))
            gap = max(gap, rel_error(r, e * e * second))
        floor = ATTENTION_FLOOR * np.linalg.norm(attention_scores(X, WQ, WK))
        ratios.append(res[0] / res[1] if np.linalg.norm(second) * (eta / 2) ** 2 > floor else np.nan)
    return AttentionReport(np.array(ratios), gap, eta)


# -- gradient-only corrections -----------------------------------------------

@dataclass
class PolicyReport:
    policy: str
    effective: np.ndarray
    weight_part: np.ndarray
    bias_part: np.ndarray
    ideal: np.ndarray
    residual: float

    @property
    def passed(self):
        return self.residual < DEFAULT_TOL


def lr_policy_check(policy: str, layer: L.Layer, x, g, eta: float = DEFAULT_ETA) -> PolicyReport:
    """Apply a gradient-only LR policy to a standard affine layer and measure the result."""
    if layer.kind != "affine":
        raise ValueError("gradient-only policies apply to the standard affine layer")
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    g = np.atleast_2d(np.asarray(g, dtype=DTYPE))
    mult = gradient_only_policy(policy, x)
    eff = effective_update(layer, x, g, eta, mult)
    w_part = effective_update(layer, x, g, eta, {"W": mult["W"], "b": 0.0})
    b_part = effective_update(layer, x, g, eta, {"W": 0.0, "b": mult["b"]})
    return PolicyReport(policy, eff, w_part, b_part, g, relative_residual(eff, g))


# -- csv ---------------------------------------------------------------------

CSV_FIELDS = ["kind", "B", "n", "eta", "residual", "diag_mean", "offdiag_norm"]


def write_report_csv(rows, path_or_file):
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in CSV_FIELDS})
    finally:
        if own:
            fh.close()
