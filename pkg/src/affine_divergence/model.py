"""Sequential networks and the named architecture builders used by the runner.

Every normaliser is attached to every weight layer, output layer included.
Parameterless normalisers (batch/layer/RMS) are placed directly in front of
a plain affine or conv layer; the structural corrections replace the layer.
"""
from __future__ import annotations

import numpy as np

from . import layers as L
from .conv import Conv2D, ConvSpec, Flatten, GlobalAvgPool, PatchNormConv
from .layers import ConfigurationError, CorrectionConfig
from .tensor import Rng

MLP_NORMALISERS = ("none", "batchnorm", "layernorm", "rmsnorm", "l2_full", "l2_half", "affine_correction")
CONV_NORMALISERS = ("none", "batchnorm", "layernorm", "rmsnorm", "l2_full", "l2_half",
                    "patchnorm_affine", "patchnorm_l2", "patchnorm_l2_half")
NORMALISERS = tuple(dict.fromkeys(MLP_NORMALISERS + CONV_NORMALISERS))
ACTIVATIONS = ("tanh", "leaky_relu", "isotropic_tanh", "none")
CONV_PRESETS = ("gap-net", "reduce-net")
INIT_SCHEME = "uniform_fan_in_zero_bias/v1"

_PRE_NORM = {"batchnorm": L.BatchNorm, "layernorm": L.LayerNorm, "rmsnorm": L.RMSNorm}
HALF = CorrectionConfig(lr_multiplier=0.5)


class Sequential:
    def __init__(self, layers: list[L.Layer]):
        self.layers = list(layers)
        self.ids = [f"{i}:{layer.kind}" for i, layer in enumerate(self.layers)]

    def forward(self, X):
        for layer in self.layers:
            X = layer.forward(X)
        return X

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def train(self, flag: bool = True):
        for layer in self.layers:
            layer.training = flag
        return self

    def eval(self):
        return self.train(False)

    def param_tree(self):
        return {lid: dict(layer.params) for lid, layer in zip(self.ids, self.layers) if layer.params}

    def grad_tree(self):
        return {lid: dict(layer.grads) for lid, layer in zip(self.ids, self.layers) if layer.params}

    def multipliers(self):
        return {lid: layer.lr_multiplier for lid, layer in zip(self.ids, self.layers) if layer.params}

    def apply_tree(self, tree):
        for lid, layer in zip(self.ids, self.layers):
            if lid in tree:
                layer.apply_update(tree[lid])

    def predict(self, X, batch_size: int = 1000):
        self.eval()
        out = [self.forward(X[i:i + batch_size]) for i in range(0, len(X), batch_size)]
        self.train()
        return np.concatenate(out)

    def describe(self):
        return " -> ".join(layer.describe() for layer in self.layers)


def activation_layer(name: str) -> L.Layer:
    if name == "tanh":
        return L.Tanh()
    if name == "leaky_relu":
        return L.LeakyReLU(0.01)
    if name == "isotropic_tanh":
        return L.IsotropicTanh()
    if name == "none":
        return L.Identity()
    raise ConfigurationError(f"unknown activation {name!r}; choose from {', '.join(ACTIVATIONS)}")


def dense_block(normaliser: str, n_in: int, n_out: int, rng: Rng) -> list[L.Layer]:
    if normaliser == "none":
        return [L.Affine(n_in, n_out, rng)]
    if normaliser in _PRE_NORM:
        return [_PRE_NORM[normaliser](), L.Affine(n_in, n_out, rng)]
    if normaliser in ("l2_full", "patchnorm_l2"):
        return [L.NormLike(n_in, n_out, rng)]
    if normaliser in ("l2_half", "patchnorm_l2_half"):
        return [L.NormLike(n_in, n_out, rng, cfg=HALF)]
    if normaliser in ("affine_correction", "patchnorm_affine"):
        return [L.AffineLike(n_in, n_out, rng)]
    raise ConfigurationError(f"unknown normaliser {normaliser!r}; choose from {', '.join(NORMALISERS)}")


def build_mlp(arch, normaliser: str = "none", activation: str = "tanh", rng: Rng | None = None) -> Sequential:
    """Fully connected net, e.g. ``arch=[3072, 32, 10]``; no activation after the output layer."""
    arch = [int(a) for a in arch]
    if len(arch) < 2 or min(arch) < 1:
        raise ConfigurationError(f"arch needs at least two positive widths, got {arch}")
    if normaliser not in MLP_NORMALISERS:
        raise ConfigurationError(f"unknown normaliser {normaliser!r} for a dense net; "
                                 f"choose from {', '.join(MLP_NORMALISERS)}")
    activation_layer(activation)
    rng = rng or Rng(0)
    out = []
    for i, (a, b) in enumerate(zip(arch[:-1], arch[1:])):
        out += dense_block(normaliser, a, b, rng.spawn(i))
        if i < len(arch) - 2:
            out.append(activation_layer(activation))
    return Sequential(out)


def conv_block(normaliser: str, spec: ConvSpec, rng: Rng) -> list[L.Layer]:
    if normaliser == "none":
        return [Conv2D(spec, rng)]
    if normaliser in _PRE_NORM:
        return [_PRE_NORM[normaliser](), Conv2D(spec, rng)]
    if normaliser == "l2_full":
        return [L.L2Norm(), Conv2D(spec, rng)]
    if normaliser == "l2_half":
        return [L.L2Norm(), Conv2D(spec, rng, cfg=HALF)]
    if normaliser == "patchnorm_affine":
        return [PatchNormConv(spec, "affine_like", rng)]
    if normaliser == "patchnorm_l2":
        return [PatchNormConv(spec, "norm_like", rng)]
    if normaliser == "patchnorm_l2_half":
        return [PatchNormConv(spec, "norm_like", rng, cfg=HALF)]
    raise ConfigurationError(f"unknown normaliser {normaliser!r}; choose from {', '.join(CONV_NORMALISERS)}")


def _conv_specs(preset: str, channels: int):
    c = channels
    if preset == "gap-net":
        return [ConvSpec(3, c, 3, 3, 1, 1), ConvSpec(c, 2 * c, 3, 3, 2, 1), ConvSpec(2 * c, 2 * c, 3, 3, 2, 1)]
    if preset == "reduce-net":
        # 32 -> 16 -> 8 -> 4 -> 1
        return [ConvSpec(3, c, 4, 4, 2, 1), ConvSpec(c, 2 * c, 4, 4, 2, 1),
                ConvSpec(2 * c, 2 * c, 4, 4, 2, 1), ConvSpec(2 * c, 2 * c, 4, 4, 1, 0)]
    raise ConfigurationError(f"unknown conv preset {preset!r}; choose from {', '.join(CONV_PRESETS)}")


def build_conv(preset: str = "gap-net", normaliser: str = "none", activation: str = "tanh",
               rng: Rng | None = None, channels: int = 16, classes: int = 10) -> Sequential:
    """Small conv nets for 3x32x32 input.

    ``gap-net`` ends in global average pooling, ``reduce-net`` shrinks the
    spatial extent to 1x1 with strided convs.  Both finish with a dense layer
    carrying the matching dense form of the normaliser.
    """
    if normaliser not in CONV_NORMALISERS:
        raise ConfigurationError(f"unknown normaliser {normaliser!r} for a conv net; "
                                 f"choose from {', '.join(CONV_NORMALISERS)}")
    rng = rng or Rng(0)
    specs = _conv_specs(preset, channels)
    out = []
    for i, spec in enumerate(specs):
        out += conv_block(normaliser, spec, rng.spawn(i))
        out.append(activation_layer(activation))
    out.append(GlobalAvgPool() if preset == "gap-net" else Flatten())
    out += dense_block(normaliser, specs[-1].out_channels, classes, rng.spawn(len(specs)))
    return Sequential(out)
