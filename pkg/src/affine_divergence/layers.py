"""Affine-family layers with hand-derived backward passes.

Three parameterised maps share the ``(W, b)`` parameterisation:

* ``affine``      z = W x + b
* ``affine_like`` z = (W x + b) / sqrt(|x|^2 + 1)
* ``norm_like``   z = W x / |x| + b

The corrected forms make the parameter step propagate to a representation
step equal to (affine-like) or twice (norm-like) the loss gradient at z.

Everything operates on batches: inputs are ``(B, n)`` arrays, outputs
``(B, out)``.  Parameterless normalisers and activations accept any array
whose leading axis is the batch.
"""
from __future__ import annotations

import copy
import io
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, DimensionError, Rng, check_finite

# Inside the square root of the baseline normalisers only.
NORMALISER_EPS = 1e-5


class ZeroInputNorm(ArithmeticError):
    """Input norm at or below the guard threshold of a norm-like map."""


class ConfigurationError(ValueError):
    pass


@dataclass
class AffineParams:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=DTYPE)
        self.b = np.asarray(self.b, dtype=DTYPE)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError(f"inconsistent W {self.W.shape} and b {self.b.shape}")

    @property
    def in_features(self):
        return self.W.shape[1]

    @property
    def out_features(self):
        return self.W.shape[0]


@dataclass
class ForwardCache:
    x: np.ndarray
    z: np.ndarray
    s: np.ndarray | None = None
    W: np.ndarray | None = None
    norms: np.ndarray | None = None


@dataclass(frozen=True)
class CorrectionConfig:
    """Reweighting of the corrected maps.

    ``beta=None`` selects the base forms (sqrt(|x|^2+1) and |x|).  With a
    ``beta`` given, the affine-like scale is sqrt(alpha^2 |x|^2 + beta^2)
    and the norm-like scale is sqrt(alpha^2 |x|^2 / (1 - beta^2)).
    """

    alpha: float = 1.0
    beta: float | None = None
    lr_multiplier: float = 1.0
    eps: float = 1e-12

    def __post_init__(self):
        if self.beta is not None and not -1.0 < self.beta < 1.0:
            raise ConfigurationError(f"beta must lie in (-1, 1), got {self.beta}")


DEFAULT_CORRECTION = CorrectionConfig()


def init_affine(in_features: int, out_features: int, rng: Rng) -> AffineParams:
    """Fan-in uniform weights in [-1/sqrt(in), 1/sqrt(in)], zero bias."""
    bound = 1.0 / np.sqrt(in_features)
    W = rng.uniform((out_features, in_features), -bound, bound)
    return AffineParams(W, np.zeros(out_features))


def _check_input(p: AffineParams, X):
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[1] != p.in_features:
        raise DimensionError(f"input {X.shape} does not match W {p.W.shape}")
    return X


def _check_grad(cache: ForwardCache, g):
    g = np.asarray(g, dtype=DTYPE)
    if g.shape != cache.z.shape:
        raise DimensionError(f"gradient {g.shape} does not match output {cache.z.shape}")
    return g


# -- standard affine ---------------------------------------------------------

def affine_forward(p: AffineParams, X):
    X = _check_input(p, X)
    z = X @ p.W.T + p.b
    return check_finite(z, "affine output"), ForwardCache(x=X, z=z, W=p.W)


def affine_backward(cache: ForwardCache, g):
    g = _check_grad(cache, g)
    return g.T @ cache.x, g.sum(axis=0), g @ cache.W


# -- affine-like correction --------------------------------------------------

def _affine_like_coeffs(cfg: CorrectionConfig):
    return cfg.alpha, (1.0 if cfg.beta is None else cfg.beta)


def affine_like_forward(p: AffineParams, X, cfg: CorrectionConfig = DEFAULT_CORRECTION):
    X = _check_input(p, X)
    a, beta = _affine_like_coeffs(cfg)
    s = np.sqrt(a * a * np.einsum("bj,bj->b", X, X) + beta * beta)
    z = (a * (X @ p.W.T) + beta * p.b) / s[:, None]
    return check_finite(z, "affine-like output"), ForwardCache(x=X, z=z, s=s, W=p.W)


def affine_like_backward(cache: ForwardCache, g, cfg: CorrectionConfig = DEFAULT_CORRECTION):
    g = _check_grad(cache, g)
    a, beta = _affine_like_coeffs(cfg)
    X, s, z = cache.x, cache.s, cache.z
    u = g / s[:, None]
    dW = a * (u.T @ X)
    db = beta * u.sum(axis=0)
    gz = np.einsum("bi,bi->b", g, z)
    dX = a * (u @ cache.W) - (a * a * gz / (s * s))[:, None] * X
    return dW, db, dX


# -- norm-like correction ----------------------------------------------------

def _norm_like_scale(X, cfg: CorrectionConfig):
    norms = np.sqrt(np.einsum("bj,bj->b", X, X))
    bad = np.flatnonzero(norms <= cfg.eps)
    if bad.size:
        raise ZeroInputNorm(
            f"sample(s) {bad.tolist()} have |x| <= {cfg.eps}; the norm-like map is singular there"
        )
    if cfg.beta is None:
        return norms, norms, 1.0
    s = norms * abs(cfg.alpha) / np.sqrt(1.0 - cfg.beta ** 2)
    return s, norms, cfg.beta


def norm_like_forward(p: AffineParams, X, cfg: CorrectionConfig = DEFAULT_CORRECTION):
    X = _check_input(p, X)
    s, norms, beta = _norm_like_scale(X, cfg)
    z = cfg.alpha * (X @ p.W.T) / s[:, None] + beta * p.b
    cache = ForwardCache(x=X, z=z, s=s, W=p.W, norms=norms)
    return check_finite(z, "norm-like output"), cache


def norm_like_backward(cache: ForwardCache, g, cfg: CorrectionConfig = DEFAULT_CORRECTION):
    g = _check_grad(cache, g)
    beta = 1.0 if cfg.beta is None else cfg.beta
    a = cfg.alpha
    X, s, norms = cache.x, cache.s, cache.norms
    u = g / s[:, None]
    dW = a * (u.T @ X)
    db = beta * g.sum(axis=0)
    gWx = np.einsum("bi,bi->b", u, X @ cache.W.T)
    dX = a * (u @ cache.W - (gWx / norms ** 2)[:, None] * X)
    return dW, db, dX


# -- parameterless normalisers -----------------------------------------------

def _flat(X):
    X = np.asarray(X, dtype=DTYPE)
    return X.reshape(X.shape[0], -1)


def _batch_axes(X):
    # per-feature statistics for (B, n); per-channel over (batch, spatial) for (B, C, H, W)
    return (0,) if X.ndim == 2 else (0,) + tuple(range(2, X.ndim))


def batchnorm_forward(X, eps: float = NORMALISER_EPS, stats=None):
    """Standardise over the batch.  ``stats=(mean, var)`` overrides batch statistics."""
    X = np.asarray(X, dtype=DTYPE)
    axes = _batch_axes(X)
    if stats is None:
        if X.shape[0] < 2:
            raise ConfigurationError("batchnorm needs a batch of at least 2 samples")
        mu = X.mean(axis=axes, keepdims=True)
        var = X.var(axis=axes, keepdims=True)
    else:
        mu, var = stats
    sigma = np.sqrt(var + eps)
    xhat = (X - mu) / sigma
    return xhat, {"xhat": xhat, "sigma": sigma, "axes": axes, "mu": mu, "var": var}


def batchnorm_backward(cache, g):
    xhat, sigma, axes = cache["xhat"], cache["sigma"], cache["axes"]
    gm = g.mean(axis=axes, keepdims=True)
    gx = (g * xhat).mean(axis=axes, keepdims=True)
    return (g - gm - xhat * gx) / sigma


def layernorm_forward(X, eps: float = NORMALISER_EPS):
    X = np.asarray(X, dtype=DTYPE)
    F = _flat(X)
    if F.shape[1] < 2:
        raise ConfigurationError("layernorm needs at least 2 features")
    mu = F.mean(axis=1, keepdims=True)
    sigma = np.sqrt(F.var(axis=1, keepdims=True) + eps)
    xhat = (F - mu) / sigma
    return xhat.reshape(X.shape), {"xhat": xhat, "sigma": sigma}


def layernorm_backward(cache, g):
    xhat, sigma = cache["xhat"], cache["sigma"]
    G = _flat(g)
    out = (G - G.mean(axis=1, keepdims=True)
           - xhat * (G * xhat).mean(axis=1, keepdims=True)) / sigma
    return out.reshape(g.shape)


def _sample_norms(F, eps):
    norms = np.sqrt(np.einsum("bj,bj->b", F, F))[:, None]
    if np.any(norms <= eps):
        raise ZeroInputNorm("zero-norm sample in normaliser input")
    return norms


def l2norm_forward(X, eps: float = 1e-12, gain: float = 1.0):
    X = np.asarray(X, dtype=DTYPE)
    F = _flat(X)
    norms = _sample_norms(F, eps)
    y = gain * F / norms
    return y.reshape(X.shape), {"x": F, "norms": norms, "gain": gain}


def l2norm_backward(cache, g):
    F, norms, gain = cache["x"], cache["norms"], cache["gain"]
    G = _flat(g)
    gx = np.einsum("bj,bj->b", G, F)[:, None]
    out = gain * (G / norms - gx * F / norms ** 3)
    return out.reshape(g.shape)


def rmsnorm_forward(X, eps: float = 1e-12):
    """sqrt(n) x / |x| per sample; no epsilon inside the norm."""
    n = _flat(X).shape[1]
    return l2norm_forward(X, eps=eps, gain=np.sqrt(n))


rmsnorm_backward = l2norm_backward


# -- activations -------------------------------------------------------------

def isotropic_tanh(X):
    """tanh(|x|) x/|x| per sample, with the x = 0 limit taken as 0."""
    X = np.asarray(X, dtype=DTYPE)
    F = _flat(X)
    r = np.sqrt(np.einsum("bj,bj->b", F, F))[:, None]
    ratio = _tanh_over_r(r)
    return (ratio * F).reshape(X.shape)


def _tanh_over_r(r):
    small = r < 1e-4
    safe = np.where(small, 1.0, r)
    return np.where(small, 1.0 - r * r / 3.0, np.tanh(safe) / safe)


def isotropic_tanh_backward(X, g):
    X = np.asarray(X, dtype=DTYPE)
    F, G = _flat(X), _flat(g)
    r = np.sqrt(np.einsum("bj,bj->b", F, F))[:, None]
    ratio = _tanh_over_r(r)
    small = r < 1e-4
    safe = np.where(small, 1.0, r)
    sech2 = 1.0 - np.tanh(r) ** 2
    # (sech^2 r - tanh(r)/r) / r^2, series -2/3 near 0
    radial = np.where(small, -2.0 / 3.0, (sech2 - ratio) / safe ** 2)
    out = ratio * G + radial * np.einsum("bj,bj->b", G, F)[:, None] * F
    return out.reshape(np.shape(g))


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy and its gradient w.r.t. the logits (with the 1/B factor)."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    probs = np.exp(shifted - log_z[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / B


# -- stateful layer objects --------------------------------------------------

class Layer:
    """Differentiable map with an explicit forward cache.

    ``forward`` stores what ``backward`` needs; ``backward`` fills ``grads``
    and returns the input gradient.  Parameters change only through
    :meth:`apply_update`.
    """

    kind = "layer"
    lr_multiplier = 1.0

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, X):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def apply_update(self, params: dict[str, np.ndarray]):
        for name, value in params.items():
            if name not in self.params:
                raise KeyError(f"{type(self).__name__} has no parameter {name!r}")
            if value.shape != self.params[name].shape:
                raise DimensionError(f"{name}: {value.shape} vs {self.params[name].shape}")
            self.params[name] = np.array(value, dtype=DTYPE)

    def clone(self):
        return copy.deepcopy(self)

    def describe(self):
        return self.kind


class _AffineFamily(Layer):
    def __init__(self, in_features, out_features, rng: Rng | None = None,
                 params: AffineParams | None = None, cfg: CorrectionConfig = DEFAULT_CORRECTION):
        super().__init__()
        if params is None:
            if rng is None:
                raise ValueError("need either params or an rng for initialisation")
            params = init_affine(in_features, out_features, rng)
        self.params = {"W": params.W, "b": params.b}
        self.cfg = cfg
        self.lr_multiplier = cfg.lr_multiplier
        self._cache = None

    @property
    def affine_params(self):
        return AffineParams(self.params["W"], self.params["b"])

    def describe(self):
        W = self.params["W"]
        return f"{self.kind}({W.shape[1]}->{W.shape[0]})"


class Affine(_AffineFamily):
    kind = "affine"

    def forward(self, X):
        z, self._cache = affine_forward(self.affine_params, X)
        return z

    def backward(self, g):
        dW, db, dX = affine_backward(self._cache, g)
        self.grads = {"W": dW, "b": db}
        return dX


class AffineLike(_AffineFamily):
    kind = "affine_like"

    def forward(self, X):
        z, self._cache = affine_like_forward(self.affine_params, X, self.cfg)
        return z

    def backward(self, g):
        dW, db, dX = affine_like_backward(self._cache, g, self.cfg)
        self.grads = {"W": dW, "b": db}
        return dX


class NormLike(_AffineFamily):
    kind = "norm_like"

    def forward(self, X):
        z, self._cache = norm_like_forward(self.affine_params, X, self.cfg)
        return z

    def backward(self, g):
        dW, db, dX = norm_like_backward(self._cache, g, self.cfg)
        self.grads = {"W": dW, "b": db}
        return dX


class BatchNorm(Layer):
    """Parameterless batch standardisation.

    Training uses batch statistics and tracks running averages; evaluation
    uses the running averages.
    """

    kind = "batchnorm"

    def __init__(self, momentum: float = 0.1, eps: float = NORMALISER_EPS):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.running = None
        self._cache = None

    def forward(self, X):
        # a size-1 training batch (e.g. a partial final batch) falls back to running stats
        self._batch_stats = self.training and (np.shape(X)[0] >= 2 or self.running is None)
        if self._batch_stats:
            y, self._cache = batchnorm_forward(X, self.eps)
            mu, var = self._cache["mu"], self._cache["var"]
            if self.running is None:
                self.running = (mu.copy(), var.copy())
            else:
                m = self.momentum
                self.running = ((1 - m) * self.running[0] + m * mu,
                                (1 - m) * self.running[1] + m * var)
            return y
        if self.running is None:
            y, self._cache = batchnorm_forward(X, self.eps)
            self._batch_stats = True
            return y
        y, self._cache = batchnorm_forward(X, self.eps, stats=self.running)
        return y

    def backward(self, g):
        if not self._batch_stats:
            return g / self._cache["sigma"]
        return batchnorm_backward(self._cache, g)


class LayerNorm(Layer):
    kind = "layernorm"

    def forward(self, X):
        y, self._cache = layernorm_forward(X)
        return y

    def backward(self, g):
        return layernorm_backward(self._cache, g)


class RMSNorm(Layer):
    kind = "rmsnorm"

    def forward(self, X):
        y, self._cache = rmsnorm_forward(X)
        return y

    def backward(self, g):
        return rmsnorm_backward(self._cache, g)


class L2Norm(Layer):
    kind = "l2norm"

    def forward(self, X):
        y, self._cache = l2norm_forward(X)
        return y

    def backward(self, g):
        return l2norm_backward(self._cache, g)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, X):
        self._y = np.tanh(X)
        return self._y

    def backward(self, g):
        return g * (1.0 - self._y ** 2)


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, alpha: float = 0.01):
        super().__init__()
        self.alpha = alpha

    def forward(self, X):
        self._pos = X > 0
        return np.where(self._pos, X, self.alpha * X)

    def backward(self, g):
        return np.where(self._pos, g, self.alpha * g)


class IsotropicTanh(Layer):
    kind = "isotropic_tanh"

    def forward(self, X):
        self._x = np.asarray(X, dtype=DTYPE)
        return isotropic_tanh(self._x)

    def backward(self, g):
        return isotropic_tanh_backward(self._x, g)


class Identity(Layer):
    kind = "identity"

    def forward(self, X):
        return X

    def backward(self, g):
        return g


# -- parameter dumps ---------------------------------------------------------

_PARAM_MAGIC = b"ADPARAM\x01"


def dump_params(params: dict[str, np.ndarray]) -> bytes:
    """Flat binary dump: per entry a name, a shape header and row-major float64 values."""
    buf = io.BytesIO()
    buf.write(_PARAM_MAGIC)
    buf.write(struct.pack("<I", len(params)))
    for name, value in params.items():
        value = np.asarray(value, dtype="<f8")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        buf.write(value.tobytes())
    return buf.getvalue()


def load_params(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:8]) != _PARAM_MAGIC:
        raise ValueError("not a parameter dump")
    pos = 8
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + klen]).decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        n = int(np.prod(shape))
        out[name] = np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * n
    if pos != len(blob):
        raise ValueError("trailing bytes in parameter dump")
    return out
