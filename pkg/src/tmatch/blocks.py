"""Residual blocks: the class-supervised template-matching block and a
conv baseline.

The template block treats the rows of a 1x1 classifier as class
templates. Each feature-map pixel is average-pooled over a large patch
window, scored against every template, and the scores are mixed back
into a feature embedding through a value table:

    patch_pool -> patch_classifier -> mixing -> embed_values -> + shortcut

The mixing stage is either plain BN-ReLU (scores normalized batch-wise,
negatives clipped) or the margin-augmented soft-max layer, which needs
no batch statistics. The raw patch scores are also the block's auxiliary
classification head; the training loss attaches a per-pixel cross
entropy to them.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import matchers
from .autodiff import BatchNormState, Tensor

SHORTCUTS = ("add", "concat", "identity")
MIXINGS = ("bn_relu", "margin_softmax")
ACTIVATIONS = ("bn_relu", "margin_softmax", "perturbed")


@dataclass
class ActivationSpec:
    """Which nonlinearity follows the 3x3 conv inside a baseline block."""

    kind: str = "bn_relu"
    mu: float = 2.5
    eta: float = 17.0
    eps: float = 1.0
    samples: int = 64

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}, expected one of {ACTIVATIONS}")
        self.samples = int(self.samples)
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")


@dataclass
class TemplateBlockConfig:
    num_classes: int
    d_in: int
    d_value: int
    patch_window: tuple | None = None  # None: (ceil(H/2), ceil(W/2)) at forward time
    shortcut: str = "add"
    pre_pool_bn: bool = False
    shortcut_avgpool2: bool = False
    mixing: str = "bn_relu"
    score_bn: bool = False
    margin_mu: float = 2.5
    margin_eta: float = 17.0
    margin_eps: float = 1.0

    def __post_init__(self):
        if self.shortcut not in SHORTCUTS:
            raise ValueError(f"unknown shortcut {self.shortcut!r}, expected one of {SHORTCUTS}")
        if self.mixing not in MIXINGS:
            raise ValueError(f"unknown mixing {self.mixing!r}, expected one of {MIXINGS}")
        for label, v in (("num_classes", self.num_classes), ("d_in", self.d_in),
                         ("d_value", self.d_value)):
            if int(v) < 1:
                raise ValueError(f"{label} must be >= 1, got {v}")
        self.num_classes, self.d_in, self.d_value = (
            int(self.num_classes), int(self.d_in), int(self.d_value))
        if self.patch_window is not None:
            wh, ww = self.patch_window
            if wh < 1 or ww < 1:
                raise ValueError(f"patch_window must be positive, got {self.patch_window}")
            self.patch_window = (int(wh), int(ww))
        if self.shortcut == "identity" and self.d_value != self.d_in:
            raise ValueError(
                f"identity shortcut needs d_value == d_in, got {self.d_value} != {self.d_in}")

    @property
    def out_width(self):
        if self.shortcut == "add":
            return self.d_value
        if self.shortcut == "concat":
            return self.d_in + self.d_value
        return self.d_in


@dataclass
class BlockOutput:
    f_out: Tensor
    patch_scores: Tensor
    mixing: Tensor
    f_prime: Tensor


class TemplateBlockParams:
    """Tensors and BN states for one template block.

    ``factory(name, shape, kind)`` produces each Tensor; kind is "conv"
    (fan-in init), "bias" or "zero". The value table is zero-initialized
    so a fresh block's residual branch contributes nothing.
    """

    def __init__(self, cfg, alpha, beta, values, proj_weight, proj_bias,
                 mixing_bn, pre_pool_bn, score_bn):
        self.cfg = cfg
        self.alpha = alpha
        self.beta = beta
        self.values = values
        self.proj_weight = proj_weight
        self.proj_bias = proj_bias
        self.mixing_bn = mixing_bn
        self.pre_pool_bn = pre_pool_bn
        self.score_bn = score_bn

    @classmethod
    def create(cls, cfg, factory, name="block"):
        c, d_in, d_v = cfg.num_classes, cfg.d_in, cfg.d_value
        alpha = factory(f"{name}.alpha", (c, d_in), "conv")
        beta = factory(f"{name}.beta", (c,), "bias")
        values = factory(f"{name}.values", (d_v, c), "zero")
        proj_weight = proj_bias = None
        if cfg.shortcut == "add":
            proj_weight = factory(f"{name}.proj.weight", (d_v, d_in, 1, 1), "conv")
            proj_bias = factory(f"{name}.proj.bias", (d_v,), "bias")
        elif cfg.shortcut == "concat":
            proj_weight = factory(f"{name}.proj.weight", (d_in, d_in, 1, 1), "conv")
            proj_bias = factory(f"{name}.proj.bias", (d_in,), "bias")
        mixing_bn = BatchNormState(c) if cfg.mixing == "bn_relu" else None
        pre_bn = BatchNormState(d_in) if cfg.pre_pool_bn else None
        score_bn = BatchNormState(c) if cfg.score_bn else None
        return cls(cfg, alpha, beta, values, proj_weight, proj_bias,
                   mixing_bn, pre_bn, score_bn)

    def parameters(self, name="block"):
        out = [(f"{name}.alpha", self.alpha), (f"{name}.beta", self.beta),
               (f"{name}.values", self.values)]
        if self.proj_weight is not None:
            out += [(f"{name}.proj.weight", self.proj_weight),
                    (f"{name}.proj.bias", self.proj_bias)]
        for bn_name, st in self.bn_states(name):
            out += [(f"{bn_name}.gamma", st.gamma), (f"{bn_name}.beta", st.beta)]
        return out

    def bn_states(self, name="block"):
        out = []
        if self.mixing_bn is not None:
            out.append((f"{name}.mixing_bn", self.mixing_bn))
        if self.pre_pool_bn is not None:
            out.append((f"{name}.pre_pool_bn", self.pre_pool_bn))
        if self.score_bn is not None:
            out.append((f"{name}.score_bn", self.score_bn))
        return out


def default_patch_window(h, w):
    """Half the feature map, rounded up: the patch a score should describe."""
    return (math.ceil(h / 2), math.ceil(w / 2))


def patch_pool(f, window=None):
    """Stride-1 same-size average pooling with border renormalization.

    Border pixels average only the cells that fall inside the map, so a
    corner patch is the mean of its valid quarter, not a zero-diluted one.
    """
    if window is None:
        window = default_patch_window(f.shape[2], f.shape[3])
    return ad.avg_pool(f, window, stride=1, border="count_valid", padding="same")


def patch_classifier(x_g, alpha, beta):
    """Per-pixel linear classifier: scores[n, :, y, x] = alpha @ x_g[n, :, y, x] + beta."""
    c, d = alpha.shape
    kernel = ad.reshape(alpha, (c, d, 1, 1))
    return ad.conv2d(x_g, kernel, bias=beta)


def embed_values(scores, values, cfg, params):
    """Mix class scores into feature space through the value table.

    Returns (f_prime, mixing): the embedded features and the mixed
    (non-negative) score map that produced them.
    """
    if cfg.mixing == "bn_relu":
        mixed = ad.relu(ad.batch_norm(scores, params.mixing_bn))
    else:
        mixed = matchers.margin_softmax_layer(
            scores, cfg.margin_mu, cfg.margin_eta, cfg.margin_eps)
    d_v, c = values.shape
    kernel = ad.reshape(values, (d_v, c, 1, 1))
    return ad.conv2d(mixed, kernel), mixed


def template_block_forward(f, cfg, params):
    """Template block: score large patches per class, re-embed, add shortcut."""
    if f.shape[1] != cfg.d_in:
        raise ValueError(f"block expects {cfg.d_in} input channels, got {f.shape}")

    pooled_in = f
    if params.pre_pool_bn is not None:
        pooled_in = ad.batch_norm(pooled_in, params.pre_pool_bn)
    x_g = patch_pool(pooled_in, cfg.patch_window)
    scores = patch_classifier(x_g, params.alpha, params.beta)
    if params.score_bn is not None:
        scores = ad.batch_norm(scores, params.score_bn)
    f_prime, mixed = embed_values(scores, params.values, cfg, params)

    base = f
    if cfg.shortcut_avgpool2:
        base = ad.avg_pool(base, (2, 2), stride=1, border="count_valid", padding="same")
    if cfg.shortcut == "add":
        shortcut = ad.conv2d(base, params.proj_weight, bias=params.proj_bias)
        f_out = ad.add(shortcut, f_prime)
    elif cfg.shortcut == "concat":
        shortcut = ad.conv2d(base, params.proj_weight, bias=params.proj_bias)
        f_out = ad.concat([shortcut, f_prime], axis=1)
    else:
        f_out = ad.add(base, f_prime)
    return BlockOutput(f_out=f_out, patch_scores=scores, mixing=mixed, f_prime=f_prime)


class ResidualBlockParams:
    """Tensors and BN state for one baseline residual block."""

    def __init__(self, conv3, bn, conv1, conv1_bias, short_weight, short_bias, stride):
        self.conv3 = conv3
        self.bn = bn
        self.conv1 = conv1
        self.conv1_bias = conv1_bias
        self.short_weight = short_weight
        self.short_bias = short_bias
        self.stride = stride

    @classmethod
    def create(cls, w_in, w_out, stride, act, factory, name="rb"):
        conv3 = factory(f"{name}.conv3", (w_out, w_in, 3, 3), "conv")
        bn = BatchNormState(w_out) if act.kind == "bn_relu" else None
        conv1 = factory(f"{name}.conv1", (w_out, w_out, 1, 1), "conv")
        conv1_bias = factory(f"{name}.conv1.bias", (w_out,), "bias")
        short_weight = short_bias = None
        if stride != 1 or w_in != w_out:
            short_weight = factory(f"{name}.short.weight", (w_out, w_in, 1, 1), "conv")
            short_bias = factory(f"{name}.short.bias", (w_out,), "bias")
        return cls(conv3, bn, conv1, conv1_bias, short_weight, short_bias, stride)

    def parameters(self, name="rb"):
        out = [(f"{name}.conv3", self.conv3)]
        if self.bn is not None:
            out += [(f"{name}.bn.gamma", self.bn.gamma), (f"{name}.bn.beta", self.bn.beta)]
        out += [(f"{name}.conv1", self.conv1), (f"{name}.conv1.bias", self.conv1_bias)]
        if self.short_weight is not None:
            out += [(f"{name}.short.weight", self.short_weight),
                    (f"{name}.short.bias", self.short_bias)]
        return out

    def bn_states(self, name="rb"):
        return [(f"{name}.bn", self.bn)] if self.bn is not None else []


def residual_block_baseline(f, params, act, perturbed_seed=0):
    """conv3x3 -> activation -> conv1x1, plus a (projected) shortcut.

    The activation is BN-ReLU by default; the margin soft-max and the
    perturbed maximizer slot in unchanged for ablations. ``perturbed_seed``
    only matters for the perturbed variant, which draws its noise from it.
    """
    h = ad.conv2d(f, params.conv3, stride=params.stride)
    if act.kind == "bn_relu":
        a = ad.relu(ad.batch_norm(h, params.bn))
    elif act.kind == "margin_softmax":
        a = matchers.margin_softmax_layer(h, act.mu, act.eta, act.eps)
    else:
        a = matchers.perturbed_maximizer_layer(
            h, act.mu, act.eta, act.eps, act.samples, perturbed_seed)
    r = ad.conv2d(a, params.conv1, bias=params.conv1_bias)
    if params.short_weight is not None:
        s = ad.conv2d(f, params.short_weight, bias=params.short_bias, stride=params.stride)
    else:
        s = f
    if r.shape != s.shape:
        raise ValueError(f"residual and shortcut shapes differ: {r.shape} vs {s.shape}")
    return ad.add(r, s)
