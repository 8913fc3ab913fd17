"""SGD and Adam over nested parameter trees, plus gradient-only LR policies.

A parameter tree maps a layer id to that layer's ``{name: array}`` dict.
Steps are functional: they return new trees and never modify their inputs.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .layers import ConfigurationError, ZeroInputNorm, dump_params, load_params
from .tensor import DTYPE, DimensionError

ParamTree = dict[str, dict[str, np.ndarray]]


@dataclass
class SgdConfig:
    eta: float = 0.001
    per_layer_multiplier: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")


@dataclass
class AdamConfig:
    eta: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    per_layer_multiplier: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("beta1 and beta2 must lie in [0, 1)")


def _check_shapes(params: ParamTree, grads: ParamTree):
    for lid, group in grads.items():
        if lid not in params:
            raise KeyError(f"gradient for unknown layer {lid!r}")
        for name, g in group.items():
            p = params[lid][name]
            if np.shape(g) != p.shape:
                raise DimensionError(f"{lid}.{name}: gradient {np.shape(g)} vs parameter {p.shape}")


def _multiplier(cfg, lid, name, policy):
    m = cfg.per_layer_multiplier.get(lid, 1.0)
    if policy is not None and lid in policy:
        m = m * policy[lid].get(name, 1.0)
    return m


def sgd_step(params: ParamTree, grads: ParamTree, cfg: SgdConfig, policy=None) -> ParamTree:
    """theta' = theta - eta * m_layer * grad.

    ``policy`` optionally supplies extra per-parameter multipliers, e.g. from
    :func:`gradient_only_policy`, keyed like the parameter tree.
    """
    _check_shapes(params, grads)
    out = {}
    for lid, group in params.items():
        new = {}
        for name, p in group.items():
            g = grads.get(lid, {}).get(name)
            if g is None:
                new[name] = p
                continue
            step = cfg.eta * _multiplier(cfg, lid, name, policy)
            new[name] = p - step * np.asarray(g, dtype=DTYPE)
        out[lid] = new
    return out


@dataclass
class AdamState:
    t: int = 0
    m: ParamTree = field(default_factory=dict)
    v: ParamTree = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamTree, grads: ParamTree, cfg: AdamConfig):
    """Bias-corrected Adam.  Returns ``(new_params, new_state)``."""
    _check_shapes(params, grads)
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params, new_m, new_v = {}, {}, {}
    for lid, group in params.items():
        new_params[lid], new_m[lid], new_v[lid] = {}, {}, {}
        for name, p in group.items():
            g = grads.get(lid, {}).get(name)
            m_prev = state.m.get(lid, {}).get(name, np.zeros_like(p))
            v_prev = state.v.get(lid, {}).get(name, np.zeros_like(p))
            if g is None:
                new_params[lid][name], new_m[lid][name], new_v[lid][name] = p, m_prev, v_prev
                continue
            g = np.asarray(g, dtype=DTYPE)
            m = b1 * m_prev + (1 - b1) * g
            v = b2 * v_prev + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            lr = cfg.eta * _multiplier(cfg, lid, name, None)
            new_params[lid][name] = p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
            new_m[lid][name], new_v[lid][name] = m, v
    return new_params, AdamState(t=t, m=new_m, v=new_v)


# -- snapshots ---------------------------------------------------------------

_SNAPSHOT_MAGIC = b"ADOPTIM"
SNAPSHOT_VERSION = 1


def _flatten(prefix, tree):
    return {f"{prefix}/{lid}/{name}": arr for lid, group in tree.items() for name, arr in group.items()}


def _unflatten(flat, prefix):
    tree: ParamTree = {}
    for key, arr in flat.items():
        head, lid, name = key.split("/", 2)
        if head == prefix:
            tree.setdefault(lid, {})[name] = arr
    return tree


def save_snapshot(state: AdamState | None, params: ParamTree) -> bytes:
    """Binary snapshot: magic, version, step count, then a parameter dump."""
    flat = _flatten("p", params)
    if state is not None:
        flat.update(_flatten("m", state.m))
        flat.update(_flatten("v", state.v))
    t = -1 if state is None else state.t
    buf = io.BytesIO()
    buf.write(_SNAPSHOT_MAGIC)
    buf.write(struct.pack("<Hq", SNAPSHOT_VERSION, t))
    buf.write(dump_params(flat))
    return buf.getvalue()


def load_snapshot(blob: bytes):
    if not blob.startswith(_SNAPSHOT_MAGIC):
        raise ValueError("not an optimizer snapshot")
    off = len(_SNAPSHOT_MAGIC)
    version, t = struct.unpack_from("<Hq", blob, off)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    flat = load_params(blob[off + struct.calcsize("<Hq"):])
    params = _unflatten(flat, "p")
    state = None if t < 0 else AdamState(t=t, m=_unflatten(flat, "m"), v=_unflatten(flat, "v"))
    return state, params


# -- gradient-only corrections -----------------------------------------------

def gradient_only_policy(kind: str, x) -> dict[str, float]:
    """Per-parameter LR multipliers that remove the affine divergence.

    ``global``: every parameter scaled by 1/(|x|^2 + 1); single sample only,
    since batched gradients are already summed over samples before any
    sample-wise rescaling could be applied.
    ``local``: weights scaled by 1/(2|x|^2), bias by 1/2.  For a batch the
    mean squared norm is used.
    """
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    sq = np.einsum("bj,bj->b", x, x)
    if kind == "global":
        if x.shape[0] != 1:
            raise ConfigurationError(
                "the global sample-wise learning rate needs per-sample Jacobians; "
                "it is only defined for batch size 1"
            )
        m = 1.0 / (sq[0] + 1.0)
        return {"W": m, "b": m}
    if kind == "local":
        mean_sq = float(sq.mean())
        if mean_sq == 0.0:
            raise ZeroInputNorm("weight learning rate 1/(2|x|^2) is singular at x = 0")
        return {"W": 1.0 / (2.0 * mean_sq), "b": 0.5}
    raise ValueError(f"unknown gradient-only policy {kind!r}")
