"""Discriminators, the patch-noise module and every loss of the training objective.

Discriminator losses use the standard binary cross-entropy form: ground-truth
maps are labelled 1, predictions (plain for D1, noise-perturbed for D2) are
labelled 0. The generator's adversarial terms are evaluated on its own
predictions, ``-log D(prediction)`` (non-saturating form).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ._config import get_dtype
from .blocks import Conv, Module
from .tensor import (
    ShapeError,
    activation,
    activation_backward,
    global_avg_pool,
    global_avg_pool_backward,
    sigmoid,
)

DISC_PRESETS = {"paper": (1, 2, 3, 4, 6, 6, 8, 8, 8), "desk": (1, 2, 2)}
LOGIT_CLIP = 30.0
SEG_FLOOR = 1e-12
LEAK = 0.2


class DomainError(ValueError):
    """A probability argument lies outside its admissible range."""


class ContractError(ValueError):
    """An input violates a documented precondition."""


# -- discriminator --------------------------------------------------------------

class ResidualBlock(Module):
    """``count`` leaky-ReLU convolutions plus a skip (1x1 projection if widths differ)."""

    def __init__(self, cin, cout, count, rng):
        super().__init__()
        self.convs = [Conv(cin if i == 0 else cout, cout, (3, 3), rng=rng) for i in range(count)]
        self.proj = Conv(cin, cout, (1, 1), rng=rng) if cin != cout else None
        self._pre = []

    def children(self):
        out = [(f"conv.{i}", c) for i, c in enumerate(self.convs)]
        if self.proj is not None:
            out.append(("proj", self.proj))
        return out

    def forward(self, x, train=False):
        self._pre = []
        h = x
        for conv in self.convs:
            z = conv.forward(h, train)
            h = activation(z, "leaky_relu", LEAK)
            self._pre.append((z, h))
        skip = self.proj.forward(x, train) if self.proj is not None else x
        return h + skip

    def backward(self, grad):
        g = grad
        for conv, (z, h) in zip(reversed(self.convs), reversed(self._pre)):
            g = conv.backward(activation_backward(g, z, h, "leaky_relu", LEAK))
        g_skip = self.proj.backward(grad) if self.proj is not None else grad
        return g + g_skip


class Discriminator(Module):
    """Stem conv, residual blocks, a final 1-channel conv, global average pool, sigmoid.

    Every conv except the final one is followed by leaky ReLU (0.2). Width
    doubles at every third block. Output: one confidence per sample, strictly
    inside (0, 1) since logits are clipped to +-30.
    """

    def __init__(self, in_channels, blocks="desk", width=8, stem_stride=2, seed=0):
        super().__init__()
        if isinstance(blocks, str):
            if blocks not in DISC_PRESETS:
                raise ValueError(f"unknown discriminator preset {blocks!r}")
            blocks = DISC_PRESETS[blocks]
        self.block_counts = tuple(int(b) for b in blocks)
        self.in_channels, self.width, self.stem_stride = in_channels, width, stem_stride
        rng = np.random.default_rng(seed)
        self.stem = Conv(in_channels, width, (3, 3), stride=stem_stride, rng=rng)
        ch = width
        self.blocks = []
        for i, count in enumerate(self.block_counts):
            out = ch * 2 if (i + 1) % 3 == 0 else ch
            self.blocks.append(ResidualBlock(ch, out, count, rng))
            ch = out
        self.final = Conv(ch, 1, (3, 3), rng=rng)
        self._cache = None

    @property
    def config(self):
        return {"in_channels": self.in_channels, "blocks": list(self.block_counts),
                "width": self.width, "stem_stride": self.stem_stride}

    def children(self):
        out = [("stem", self.stem)]
        out += [(f"block.{i}", b) for i, b in enumerate(self.blocks)]
        out.append(("final", self.final))
        return out

    def forward(self, maps, train=False):
        if maps.ndim != 4 or maps.shape[1] != self.in_channels:
            raise ShapeError(f"discriminator expects N x {self.in_channels} x H x W, got {maps.shape}")
        z0 = self.stem.forward(maps, train)
        h = activation(z0, "leaky_relu", LEAK)
        stem_act = (z0, h)
        for blk in self.blocks:
            h = blk.forward(h, train)
        f = self.final.forward(h, train)
        pooled = global_avg_pool(f)
        logit = pooled.reshape(-1)
        clipped = np.clip(logit, -LOGIT_CLIP, LOGIT_CLIP)
        d = sigmoid(clipped)
        self._cache = (stem_act, f.shape, logit, d)
        return d

    def backward(self, grad_d):
        """Backprop ``dL/dD`` (one value per sample); returns the gradient w.r.t. the input maps."""
        (z0, h0), f_shape, logit, d = self._cache
        g_logit = grad_d * d * (1.0 - d) * (np.abs(logit) < LOGIT_CLIP)
        g = global_avg_pool_backward(g_logit.reshape(-1, 1, 1, 1), f_shape)
        g = self.final.backward(g)
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        g = activation_backward(g, z0, h0, "leaky_relu", LEAK)
        return self.stem.backward(g)


def discriminator_forward(d: Discriminator, maps):
    return d.forward(maps)


# -- noise module ---------------------------------------------------------------

@dataclass
class NoiseConfig:
    patch_size: int = 8
    gaussian_std: float = 0.1
    uniform_halfwidth: float = 0.1
    gaussian_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if int(self.patch_size) < 1:
            raise ContractError(f"patch_size must be positive, got {self.patch_size}")
        if self.gaussian_std < 0:
            raise ContractError(f"gaussian_std must be >= 0, got {self.gaussian_std}")
        if self.uniform_halfwidth < 0:
            raise ContractError(f"uniform_halfwidth must be >= 0, got {self.uniform_halfwidth}")
        if not 0.0 <= self.gaussian_prob <= 1.0:
            raise ContractError(f"gaussian_prob must lie in [0, 1], got {self.gaussian_prob}")

    @property
    def is_zero(self):
        return self.gaussian_std == 0 and self.uniform_halfwidth == 0

    def to_dict(self):
        return asdict(self)


def check_probability_map(p, tol=1e-6, what="probability map"):
    if p.ndim != 4:
        raise ContractError(f"{what} must be N x C x H x W, got shape {p.shape}")
    if p.min() < -tol or p.max() > 1 + tol:
        raise ContractError(f"{what} entries must lie in [0, 1]")
    if np.abs(p.sum(axis=1) - 1.0).max() > tol:
        raise ContractError(f"{what} channels must sum to 1 at every pixel")


def patch_noise_forward(prob_map, cfg: NoiseConfig, rng=None):
    """Perturb ``prob_map`` patch-wise and return ``(noisy, ctx)`` for the backward pass.

    Each ``patch_size`` square (ragged at the borders) gets Gaussian noise
    with probability ``gaussian_prob`` and uniform noise otherwise; results are
    clamped to [0, 1] and renormalized over channels (1/C where a pixel sums
    to zero). A zero-noise config returns the input unchanged and draws
    nothing from ``rng``.
    """
    check_probability_map(prob_map)
    if cfg.is_zero:
        return prob_map.copy(), None
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    n, c, h, w = prob_map.shape
    ps = int(cfg.patch_size)
    gy, gx = -(-h // ps), -(-w // ps)
    use_gauss = rng.random((n, gy, gx)) < cfg.gaussian_prob
    gauss = rng.normal(0.0, cfg.gaussian_std, size=prob_map.shape) if cfg.gaussian_std > 0 else 0.0
    unif = rng.uniform(-cfg.uniform_halfwidth, cfg.uniform_halfwidth, size=prob_map.shape)
    mask = use_gauss.repeat(ps, axis=1).repeat(ps, axis=2)[:, None, :h, :w]
    noise = np.where(mask, gauss, unif)
    raw = prob_map + noise
    q = np.clip(raw, 0.0, 1.0)
    s = q.sum(axis=1, keepdims=True)
    dead = s <= 0
    safe = np.where(dead, 1.0, s)
    out = np.where(dead, 1.0 / c, q / safe)
    inside = (raw > 0) & (raw < 1)
    return out.astype(prob_map.dtype, copy=False), (out, safe, dead, inside)


def patch_noise_backward(grad_out, ctx):
    if ctx is None:
        return grad_out
    out, s, dead, inside = ctx
    g_q = (grad_out - (grad_out * out).sum(axis=1, keepdims=True)) / s
    g_q = np.where(dead, 0.0, g_q)
    return g_q * inside


def apply_patch_noise(prob_map, cfg: NoiseConfig, rng=None):
    return patch_noise_forward(prob_map, cfg, rng)[0]


# -- losses -----------------------------------------------------------------------

@dataclass
class AdvWeights:
    lambda_adv1: float = 0.01
    lambda_adv2: float = 0.01
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.lambda_adv1 < 0 or self.lambda_adv2 < 0:
            raise ContractError(
                f"adversarial weights must be >= 0, got {self.lambda_adv1}, {self.lambda_adv2}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ContractError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")

    def to_dict(self):
        return asdict(self)


def _check_open_unit(v, name):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or not np.all((v > 0) & (v < 1)):
        raise DomainError(f"{name} must lie strictly inside (0, 1)")
    return v


def _disc_bce(d_fake, d_real):
    d_fake = _check_open_unit(d_fake, "discriminator output on generated maps")
    d_real = _check_open_unit(d_real, "discriminator output on ground truth")
    return float(np.mean(-np.log1p(-d_fake)) + np.mean(-np.log(d_real)))


def loss_d1(d_fake, d_real):
    """Regular discriminator loss: fake predictions labelled 0, ground truth 1."""
    return _disc_bce(d_fake, d_real)


def loss_d2(d_noisy, d_real):
    """Noise discriminator loss: noisy predictions labelled 0, ground truth 1."""
    return _disc_bce(d_noisy, d_real)


def disc_loss_grad(d_fake, d_real):
    """Gradients of :func:`loss_d1` w.r.t. both discriminator-output vectors."""
    return 1.0 / ((1.0 - d_fake) * len(d_fake)), -1.0 / (d_real * len(d_real))


def adversarial_term(d_on_pred):
    """Generator term ``mean(-log D(prediction))``; decreasing in D's confidence."""
    d = _check_open_unit(d_on_pred, "discriminator output")
    return float(np.mean(-np.log(d)))


def adversarial_term_grad(d_on_pred):
    return -1.0 / (d_on_pred * len(d_on_pred))


def _check_onehot(labels, probs):
    if labels.shape != probs.shape:
        raise ContractError(f"labels shape {labels.shape} != probs shape {probs.shape}")


def loss_seg(probs, labels):
    """Mean per-pixel cross-entropy ``-sum_c Y log(P + 1e-12)`` for one head."""
    check_probability_map(probs, what="predicted probabilities")
    _check_onehot(labels, probs)
    n, _, h, w = probs.shape
    return float(-(labels * np.log(probs + SEG_FLOOR)).sum() / (n * h * w))


def loss_seg_grad(probs, labels):
    n, _, h, w = probs.shape
    return -labels / (probs + SEG_FLOOR) / (n * h * w)


def loss_generator_total(l_seg, d1_on_pred, d2_on_noisy, w: AdvWeights):
    """``l_seg + lambda1 * mean(-log D1(pred)) + lambda2 * mean(-log D2(noisy pred))``.

    A discriminator output may be ``None`` when its weight is zero.
    """
    if w.lambda_adv1 < 0 or w.lambda_adv2 < 0:
        raise ContractError("adversarial weights must be >= 0")
    total = l_seg
    if w.lambda_adv1 != 0:
        total = total + w.lambda_adv1 * adversarial_term(d1_on_pred)
    if w.lambda_adv2 != 0:
        total = total + w.lambda_adv2 * adversarial_term(d2_on_noisy)
    return total


def smooth_labels(onehot, amount):
    """``(1 - amount) * Y + amount / C``: still a per-pixel distribution; ``amount == 0`` returns ``Y``."""
    if amount == 0:
        return onehot
    return (1.0 - amount) * onehot + amount / onehot.shape[1]


def one_hot_maps(boundary_onehot, room_onehot):
    """Discriminator input: boundary and room maps stacked along channels."""
    return np.concatenate([boundary_onehot, room_onehot], axis=1).astype(get_dtype(), copy=False)
