"""Convolution by explicit patch unrolling, PatchNorm, and pooling.

Unrolling turns a ``C x H x W`` input into a ``P x E`` patch matrix
(``P`` output positions, ``E = C * kh * kw``), after which convolution is
the batched affine map ``y_p = W x_p + b`` over patches.  PatchNorm applies
the affine-like or norm-like correction to each patch separately.

Zero padding only.  Arrays may be a single ``C x H x W`` sample or an
``N x C x H x W`` batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import layers
from .layers import ConfigurationError, CorrectionConfig, DEFAULT_CORRECTION, Layer
from .tensor import DTYPE, DimensionError, Rng, check_finite


class ZeroPatchNorm(ArithmeticError):
    """A receptive field with norm at or below the guard under norm-like PatchNorm."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    @property
    def patch_size(self):
        return self.in_channels * self.kernel_h * self.kernel_w

    def output_hw(self, H, W):
        oh = (H + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (W + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh <= 0 or ow <= 0:
            raise ConfigurationError(f"{self} gives non-positive output for a {H}x{W} input")
        return oh, ow


@dataclass
class ConvParams:
    W: np.ndarray  # (out, C, kh, kw)
    b: np.ndarray  # (out,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=DTYPE)
        self.b = np.asarray(self.b, dtype=DTYPE)
        if self.W.ndim != 4 or self.b.shape != (self.W.shape[0],):
            raise DimensionError(f"inconsistent conv W {self.W.shape} and b {self.b.shape}")

    @property
    def matrix(self):
        return self.W.reshape(self.W.shape[0], -1)


def init_conv(spec: ConvSpec, rng: Rng) -> ConvParams:
    bound = 1.0 / np.sqrt(spec.patch_size)
    W = rng.uniform((spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w), -bound, bound)
    return ConvParams(W, np.zeros(spec.out_channels))


@dataclass
class PatchMatrix:
    """Unrolled patches of one sample.

    ``source[p, e]`` is the flat index into the ``C x H x W`` input that
    ``patches[p, e]`` was copied from, or -1 for a zero-padding entry.
    """

    patches: np.ndarray
    source: np.ndarray
    out_hw: tuple[int, int]


@lru_cache(maxsize=64)
def _provenance(spec: ConvSpec, C: int, H: int, W: int):
    if C != spec.in_channels:
        raise DimensionError(f"input has {C} channels, spec expects {spec.in_channels}")
    oh, ow = spec.output_hw(H, W)
    c, ki, kj = np.meshgrid(np.arange(C), np.arange(spec.kernel_h), np.arange(spec.kernel_w), indexing="ij")
    c, ki, kj = c.ravel(), ki.ravel(), kj.ravel()
    pi, pj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = pi.ravel()[:, None] * spec.stride + ki[None, :] - spec.padding
    cols = pj.ravel()[:, None] * spec.stride + kj[None, :] - spec.padding
    inside = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    src = np.where(inside, (c[None, :] * H + rows) * W + cols, -1)
    src.setflags(write=False)
    return src, (oh, ow)


def _as_batch(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected C x H x W or N x C x H x W, got {x.shape}")
    return x, False


def unroll(x, spec: ConvSpec) -> PatchMatrix:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3:
        raise DimensionError(f"unroll takes a single C x H x W sample, got {x.shape}")
    src, out_hw = _provenance(spec, *x.shape)
    flat = np.append(x.ravel(), 0.0)
    return PatchMatrix(patches=flat[src], source=src.copy(), out_hw=out_hw)


def unroll_batch(x, spec: ConvSpec):
    """Patches for a batch as an ``(N, P, E)`` array plus the provenance map."""
    xb, _ = _as_batch(x)
    N = xb.shape[0]
    src, out_hw = _provenance(spec, *xb.shape[1:])
    flat = np.concatenate([xb.reshape(N, -1), np.zeros((N, 1))], axis=1)
    return flat[:, src], src, out_hw


def fold_gradient(dpatches, src, in_shape):
    """Scatter ``(N, P, E)`` patch gradients back to ``(N, C, H, W)``, summing repeats."""
    N = dpatches.shape[0]
    size = int(np.prod(in_shape))
    idx = np.where(src < 0, size, src)
    offsets = (np.arange(N) * (size + 1))[:, None, None]
    flat = np.bincount((idx[None] + offsets).ravel(), weights=dpatches.ravel(),
                       minlength=N * (size + 1))
    return flat.reshape(N, size + 1)[:, :size].reshape((N,) + tuple(in_shape))


def _to_spatial(y, N, out_hw):
    # (N, P, out) -> (N, out, oh, ow)
    return y.reshape(N, out_hw[0], out_hw[1], -1).transpose(0, 3, 1, 2)


def _from_spatial(g):
    N, D = g.shape[:2]
    return g.transpose(0, 2, 3, 1).reshape(N, -1, D)


def _check_out_grad(cache, g, squeeze):
    g = np.asarray(g, dtype=DTYPE)
    if squeeze and g.ndim == 3:
        g = g[None]
    if g.shape != cache["out_shape"]:
        raise DimensionError(f"gradient {g.shape} does not match output {cache['out_shape']}")
    return _from_spatial(g)


def _finish_dx(cache, dP):
    dX = fold_gradient(dP, cache["src"], cache["in_shape"])
    return dX[0] if cache["squeeze"] else dX


def conv_forward(spec: ConvSpec, params: ConvParams, x):
    xb, squeeze = _as_batch(x)
    P, src, out_hw = unroll_batch(xb, spec)
    y = P @ params.matrix.T + params.b
    out = check_finite(_to_spatial(y, xb.shape[0], out_hw), "conv output")
    cache = {"patches": P, "src": src, "in_shape": xb.shape[1:], "Wm": params.matrix,
             "W_shape": params.W.shape, "out_shape": out.shape, "squeeze": squeeze}
    return (out[0] if squeeze else out), cache


def conv_backward(cache, g):
    G = _check_out_grad(cache, g, cache["squeeze"])
    P = cache["patches"]
    dWm = np.einsum("npd,npe->de", G, P)
    db = G.sum(axis=(0, 1))
    dX = _finish_dx(cache, G @ cache["Wm"])
    return dWm.reshape(cache["W_shape"]), db, dX


def direct_conv(spec: ConvSpec, params: ConvParams, x):
    """Sliding-window convolution with explicit loops; the reference for the unrolled path."""
    xb, squeeze = _as_batch(x)
    N, C, H, W = xb.shape
    p, s = spec.padding, spec.stride
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    Ho, Wo = spec.output_hw(H, W)
    out = np.empty((N, spec.out_channels, Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            win = xp[:, :, i * s:i * s + spec.kernel_h, j * s:j * s + spec.kernel_w]
            out[:, :, i, j] = np.tensordot(win, params.W, axes=([1, 2, 3], [1, 2, 3])) + params.b
    return out[0] if squeeze else out


def patch_scale(norm_sq, variant, eps=1e-12, strict=False):
    """Per-patch factor t_p; zero patches under norm_like get t = 0 unless ``strict``."""
    if variant == "affine_like":
        return 1.0 / np.sqrt(norm_sq + 1.0)
    if variant != "norm_like":
        raise ValueError(f"unknown PatchNorm variant {variant!r}")
    norms = np.sqrt(norm_sq)
    zero = norms <= eps
    if strict and np.any(zero):
        raise ZeroPatchNorm(f"{int(zero.sum())} patch(es) with norm <= {eps}")
    return np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, norms))


def patchnorm_forward(spec: ConvSpec, params: ConvParams, x, variant: str = "affine_like",
                      eps: float = 1e-12, strict: bool = False):
    """PatchNorm convolution.

    affine_like: y_p = t_p (W x_p + b), t_p = 1/sqrt(|x_p|^2 + 1)
    norm_like:   y_p = t_p W x_p + b,   t_p = 1/|x_p|
    """
    xb, squeeze = _as_batch(x)
    P, src, out_hw = unroll_batch(xb, spec)
    t = patch_scale(np.einsum("npe,npe->np", P, P), variant, eps, strict)
    lin = P @ params.matrix.T
    if variant == "affine_like":
        y = t[..., None] * (lin + params.b)
    else:
        y = t[..., None] * lin + params.b
    out = check_finite(_to_spatial(y, xb.shape[0], out_hw), "patchnorm output")
    cache = {"patches": P, "src": src, "in_shape": xb.shape[1:], "Wm": params.matrix,
             "W_shape": params.W.shape, "out_shape": out.shape, "squeeze": squeeze,
             "t": t, "y": y, "variant": variant}
    return (out[0] if squeeze else out), cache


def patchnorm_backward(cache, g):
    G = _check_out_grad(cache, g, cache["squeeze"])
    P, t, Wm = cache["patches"], cache["t"], cache["Wm"]
    U = G * t[..., None]
    dWm = np.einsum("npd,npe->de", U, P)
    if cache["variant"] == "affine_like":
        db = U.sum(axis=(0, 1))
        gy = np.einsum("npd,npd->np", G, cache["y"])
        dP = U @ Wm - (gy * t * t)[..., None] * P
    else:
        db = G.sum(axis=(0, 1))
        gWx = np.einsum("npd,npd->np", U, P @ Wm.T)
        dP = U @ Wm - (gWx * t * t)[..., None] * P
    return dWm.reshape(cache["W_shape"]), db, _finish_dx(cache, dP)


def global_average_pool(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim not in (3, 4):
        raise DimensionError(f"expected C x H x W or N x C x H x W, got {x.shape}")
    return x.mean(axis=(-2, -1))


def global_average_pool_backward(g, in_shape):
    H, W = in_shape[-2:]
    return np.broadcast_to(np.asarray(g)[..., None, None] / (H * W), in_shape).copy()


# -- layer objects -----------------------------------------------------------

class Conv2D(Layer):
    kind = "conv"

    def __init__(self, spec: ConvSpec, rng: Rng | None = None, params: ConvParams | None = None,
                 cfg: CorrectionConfig = DEFAULT_CORRECTION):
        super().__init__()
        params = params if params is not None else init_conv(spec, rng)
        self.spec = spec
        self.params = {"W": params.W, "b": params.b}
        self.cfg = cfg
        self.lr_multiplier = cfg.lr_multiplier

    @property
    def conv_params(self):
        return ConvParams(self.params["W"], self.params["b"])

    def forward(self, X):
        y, self._cache = conv_forward(self.spec, self.conv_params, X)
        return y

    def backward(self, g):
        dW, db, dX = conv_backward(self._cache, g)
        self.grads = {"W": dW, "b": db}
        return dX

    def describe(self):
        s = self.spec
        return f"{self.kind}({s.in_channels}->{s.out_channels},k{s.kernel_h}x{s.kernel_w},s{s.stride},p{s.padding})"


class PatchNormConv(Conv2D):
    def __init__(self, spec: ConvSpec, variant: str = "affine_like", rng: Rng | None = None,
                 params: ConvParams | None = None, cfg: CorrectionConfig = DEFAULT_CORRECTION,
                 strict: bool = False):
        super().__init__(spec, rng, params, cfg)
        self.variant = variant
        self.strict = strict
        self.kind = f"patchnorm_{variant}"

    def forward(self, X):
        y, self._cache = patchnorm_forward(self.spec, self.conv_params, X, self.variant,
                                           self.cfg.eps, self.strict)
        return y

    def backward(self, g):
        dW, db, dX = patchnorm_backward(self._cache, g)
        self.grads = {"W": dW, "b": db}
        return dX


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, X):
        self._shape = np.shape(X)
        return global_average_pool(X)

    def backward(self, g):
        return global_average_pool_backward(g, self._shape)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, X):
        self._shape = np.shape(X)
        return np.reshape(X, (self._shape[0], -1))

    def backward(self, g):
        return np.reshape(g, self._shape)


def affine_like_patch_reference(params: ConvParams, patches):
    """Affine-like correction of a plain ``(P, E)`` patch matrix via the dense layer code."""
    z, _ = layers.affine_like_forward(layers.AffineParams(params.matrix, params.b), patches)
    return z
