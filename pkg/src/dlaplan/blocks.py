"""Network building blocks and the two-head segmentation model.

Layers follow one small protocol: ``forward(x, train)`` caches what the
backward pass needs, ``backward(grad)`` returns the input gradient and fills
``self.grads`` with one entry per array in ``self.params``. A network is an
ordered collection of such layers; there is no autodiff graph.
"""
from __future__ import annotations

import numpy as np

from ._config import get_dtype
from .dla import DLAKernel, branch_additivity_fuse, dla_grad_mask, fold_batchnorm, materialize
from .tensor import (
    BatchNormParams,
    ConvKernel,
    ShapeError,
    activation,
    activation_backward,
    batchnorm,
    batchnorm_train,
    batchnorm_train_backward,
    conv_backward,
    conv_forward,
    softmax_backward,
    softmax_channels,
    upsample2x,
    upsample2x_backward,
)

BOUNDARY_CLASSES = ("background", "wall", "door_window")
ROOM_CLASSES = ("background", "closet", "bathroom", "living_room", "bedroom", "hall", "balcony")


class FusedModelError(RuntimeError):
    """A fused (inference-only) model was asked to train."""


class Module:
    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.grads = {}

    def children(self):
        return ()

    def named_params(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_params(f"{prefix}{name}.")

    def named_grads(self, prefix=""):
        for k in self.params:
            yield prefix + k, self.grads[k]
        for name, child in self.children():
            yield from child.named_grads(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self):
        state = dict(self.named_params())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, dst in own.items():
            src = np.asarray(state[k])
            if src.shape != dst.shape:
                raise ShapeError(f"{k}: checkpoint shape {src.shape} != model shape {dst.shape}")
            dst[...] = src

    def num_params(self):
        return int(sum(v.size for _, v in self.named_params()))


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(get_dtype())


class Conv(Module):
    """Plain convolution with centred zero padding."""

    def __init__(self, cin, cout, size=(3, 3), stride=1, rng=None, weight=None, bias=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.padding = ((size[0] - 1) // 2, (size[1] - 1) // 2)
        self.stride = stride
        self.params["weight"] = _he(rng, (cout, cin) + tuple(size)) if weight is None else weight
        self.params["bias"] = np.zeros(cout, dtype=get_dtype()) if bias is None else bias
        self._cache = None

    @property
    def kernel(self):
        return ConvKernel(self.params["weight"], self.params["bias"], self.padding, self.stride)

    def forward(self, x, train=False):
        out, cols = conv_forward(x, self.params["weight"], self.params["bias"], self.padding, self.stride)
        self._cache = (x.shape, cols)
        return out

    def backward(self, grad):
        shape, cols = self._cache
        gx, gw, gb = conv_backward(shape, self.params["weight"], self.padding, self.stride, grad, cols)
        self.grads = {"weight": gw, "bias": gb}
        return gx


class InceptionBlock(Module):
    """Four parallel branches (1x3, 3x1, 3x3, DLA) summed, batch-normed, activated.

    By additivity the branch sum is computed as one convolution with the
    summed 3x3 kernel; gradients of that kernel are routed back to each
    branch's own parameters.
    """

    def __init__(self, cin, cout, stride=1, act="relu", rng=None, momentum=0.9, eps=1e-5):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = get_dtype()
        self.cin, self.cout, self.stride, self.act = cin, cout, stride, act
        self.momentum, self.eps = momentum, eps
        p = self.params
        p["w13"] = _he(rng, (cout, cin, 1, 3))
        p["b13"] = np.zeros(cout, dt)
        p["w31"] = _he(rng, (cout, cin, 3, 1))
        p["b31"] = np.zeros(cout, dt)
        p["w33"] = _he(rng, (cout, cin, 3, 3))
        p["b33"] = np.zeros(cout, dt)
        p["dla"] = DLAKernel.init(cout, cin, rng).params
        p["bdla"] = np.zeros(cout, dt)
        p["gamma"] = np.ones(cout, dt)
        p["beta"] = np.zeros(cout, dt)
        self.buffers["running_mean"] = np.zeros(cout, dt)
        self.buffers["running_std"] = np.ones(cout, dt)
        self._cache = None

    def branches(self):
        p = self.params
        return [
            ConvKernel(p["w13"], p["b13"], (0, 1), self.stride),
            ConvKernel(p["w31"], p["b31"], (1, 0), self.stride),
            ConvKernel(p["w33"], p["b33"], (1, 1), self.stride),
            DLAKernel(p["dla"], p["bdla"], self.stride),
        ]

    def bn_params(self):
        # shares memory with the buffers so training updates land in place
        return BatchNormParams(self.buffers["running_mean"], self.buffers["running_std"],
                               self.params["gamma"], self.params["beta"], self.eps)

    def summed_kernel(self):
        return branch_additivity_fuse(self.branches())

    def forward(self, x, train=False):
        if x.shape[1] != self.cin:
            raise ShapeError(f"inception block expects {self.cin} channels, got input shape {x.shape}")
        k = self.summed_kernel()
        z, cols = conv_forward(x, k.weights, k.bias, k.padding, k.stride)
        bn = self.bn_params()
        if train:
            y, bn_cache = batchnorm_train(z, bn, self.momentum)
        else:
            y, bn_cache = batchnorm(z, bn), None
        out = activation(y, self.act)
        self._cache = (x.shape, cols, k, bn_cache, y, out)
        return out

    def backward(self, grad):
        shape, cols, k, bn_cache, y, out = self._cache
        if bn_cache is None:
            raise RuntimeError("backward requires a training-mode forward pass")
        gy = activation_backward(grad, y, out, self.act)
        gz, ggamma, gbeta = batchnorm_train_backward(gy, bn_cache)
        gx, gw, gb = conv_backward(shape, k.weights, k.padding, k.stride, gz, cols)
        self.grads = {
            "w13": gw[:, :, 1:2, :].copy(), "b13": gb,
            "w31": gw[:, :, :, 1:2].copy(), "b31": gb.copy(),
            "w33": gw, "b33": gb.copy(),
            "dla": dla_grad_mask(gw), "bdla": gb.copy(),
            "gamma": ggamma, "beta": gbeta,
        }
        return gx

    def fuse(self):
        return FusedConvBlock(fold_batchnorm(self.summed_kernel(), self.bn_params()), self.act)


class FusedConvBlock(Module):
    """Inference-only single-kernel replacement for an :class:`InceptionBlock`."""

    def __init__(self, kernel: ConvKernel, act="relu"):
        super().__init__()
        self.act = act
        self.stride = kernel.stride
        self.params["weight"] = kernel.weights
        self.params["bias"] = kernel.bias

    @property
    def kernel(self):
        return ConvKernel(self.params["weight"], self.params["bias"], (1, 1), self.stride)

    def forward(self, x, train=False):
        if train:
            raise FusedModelError("fused blocks are inference-only")
        return activation(conv_forward(x, self.params["weight"], self.params["bias"], (1, 1),
                                       self.stride)[0], self.act)

    def backward(self, grad):
        raise FusedModelError("fused blocks are inference-only")


def context_gate(room_feat, attention):
    """Residual gating ``room + room * A`` with A broadcast over channels."""
    return room_feat + room_feat * attention


class ContextBlock(Module):
    """Boundary-guided attention on room features.

    The attention map is ``sigmoid`` of the summed 1x3, 3x1 and DLA branch
    outputs over the boundary features (one channel).
    """

    def __init__(self, cin, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = get_dtype()
        self.cin = cin
        p = self.params
        p["w13"] = _he(rng, (1, cin, 1, 3))
        p["b13"] = np.zeros(1, dt)
        p["w31"] = _he(rng, (1, cin, 3, 1))
        p["b31"] = np.zeros(1, dt)
        p["dla"] = DLAKernel.init(1, cin, rng).params
        p["bdla"] = np.zeros(1, dt)
        self._cache = None

    def branches(self):
        p = self.params
        return [
            ConvKernel(p["w13"], p["b13"], (0, 1)),
            ConvKernel(p["w31"], p["b31"], (1, 0)),
            DLAKernel(p["dla"], p["bdla"]),
        ]

    def attention(self, boundary_feat):
        k = branch_additivity_fuse(self.branches())
        z, cols = conv_forward(boundary_feat, k.weights, k.bias, k.padding, k.stride)
        return activation(z, "sigmoid"), (k, cols)

    def forward(self, boundary_feat, room_feat, train=False):
        if boundary_feat.shape[2:] != room_feat.shape[2:] or boundary_feat.shape[0] != room_feat.shape[0]:
            raise ShapeError(
                f"boundary features {boundary_feat.shape} and room features {room_feat.shape} "
                "differ in batch or spatial size")
        if boundary_feat.shape[1] != self.cin:
            raise ShapeError(f"context block expects {self.cin} boundary channels, got {boundary_feat.shape}")
        a, (k, cols) = self.attention(boundary_feat)
        self._cache = (boundary_feat.shape, room_feat, a, k, cols)
        return context_gate(room_feat, a)

    def backward(self, grad):
        """Returns ``(grad_boundary_feat, grad_room_feat)``."""
        shape, room, a, k, cols = self._cache
        g_room = grad * (1.0 + a)
        g_a = (grad * room).sum(axis=1, keepdims=True)
        g_z = g_a * a * (1.0 - a)
        gx, gw, gb = conv_backward(shape, k.weights, k.padding, k.stride, g_z, cols)
        self.grads = {
            "w13": gw[:, :, 1:2, :].copy(), "b13": gb,
            "w31": gw[:, :, :, 1:2].copy(), "b31": gb.copy(),
            "dla": dla_grad_mask(gw), "bdla": gb.copy(),
        }
        return gx, g_room

    def fuse(self):
        return FusedContextBlock(branch_additivity_fuse(self.branches()))


class FusedContextBlock(Module):
    def __init__(self, kernel: ConvKernel):
        super().__init__()
        self.params["weight"] = kernel.weights
        self.params["bias"] = kernel.bias

    def forward(self, boundary_feat, room_feat, train=False):
        if train:
            raise FusedModelError("fused blocks are inference-only")
        z = conv_forward(boundary_feat, self.params["weight"], self.params["bias"], (1, 1), 1)[0]
        return context_gate(room_feat, activation(z, "sigmoid"))

    def backward(self, grad):
        raise FusedModelError("fused blocks are inference-only")


class SegModel(Module):
    """Encoder with two decoders: boundary classes and room classes.

    Encoder: four stride-2 inception stages. Each decoder stage upsamples x2
    (nearest), concatenates the same-scale encoder features (the input image
    at full resolution) and applies an inception block. Room stages are then
    gated by a context block fed with the boundary decoder's features of the
    same stage. 1x1 heads give logits; outputs are per-pixel softmax maps.
    """

    def __init__(self, channels=(16, 32, 64, 128), in_channels=3, n_boundary=3, n_room=7,
                 seed=0, fused=False):
        super().__init__()
        if len(channels) != 4:
            raise ValueError(f"expected four stage widths, got {channels}")
        self.channels = tuple(int(c) for c in channels)
        self.in_channels = in_channels
        self.n_boundary, self.n_room = n_boundary, n_room
        self.fused = False
        rng = np.random.default_rng(seed)
        c = self.channels
        cin = (in_channels,) + c[:3]
        self.enc = [InceptionBlock(cin[s], c[s], stride=2, rng=rng) for s in range(4)]
        skip = (c[2], c[1], c[0], in_channels)
        outs = (c[2], c[1], c[0], c[0])
        prev = (c[3],) + outs[:3]
        self._skip_ch, self._prev_ch = skip, prev
        self.dec_b = [InceptionBlock(prev[k] + skip[k], outs[k], rng=rng) for k in range(4)]
        self.dec_r = [InceptionBlock(prev[k] + skip[k], outs[k], rng=rng) for k in range(4)]
        self.ctx = [ContextBlock(outs[k], rng=rng) for k in range(4)]
        self.head_b = Conv(c[0], n_boundary, (1, 1), rng=rng)
        self.head_r = Conv(c[0], n_room, (1, 1), rng=rng)
        self._cache = None
        if fused:
            self._become_fused()

    def children(self):
        out = []
        out += [(f"enc.{i}", m) for i, m in enumerate(self.enc)]
        out += [(f"dec_b.{i}", m) for i, m in enumerate(self.dec_b)]
        out += [(f"dec_r.{i}", m) for i, m in enumerate(self.dec_r)]
        out += [(f"ctx.{i}", m) for i, m in enumerate(self.ctx)]
        out += [("head_b", self.head_b), ("head_r", self.head_r)]
        return out

    @property
    def config(self):
        return {"channels": list(self.channels), "in_channels": self.in_channels,
                "n_boundary": self.n_boundary, "n_room": self.n_room}

    def _become_fused(self):
        self.enc = [b.fuse() for b in self.enc]
        self.dec_b = [b.fuse() for b in self.dec_b]
        self.dec_r = [b.fuse() for b in self.dec_r]
        self.ctx = [b.fuse() for b in self.ctx]
        self.fused = True

    def fuse(self):
        """Inference-only copy with every multi-branch block collapsed to one kernel."""
        if self.fused:
            raise FusedModelError("model is already fused")
        out = SegModel(self.channels, self.in_channels, self.n_boundary, self.n_room)
        out.load_state_dict(self.state_dict())
        out._become_fused()
        return out

    def forward(self, x, train=False):
        if train and self.fused:
            raise FusedModelError("fused models cannot be trained")
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected N x {self.in_channels} x H x W input, got {x.shape}")
        h, w = x.shape[2:]
        if h % 16 or w % 16:
            raise ShapeError(f"input height and width must be multiples of 16, got {h}x{w}")
        feats = [x]
        for blk in self.enc:
            feats.append(blk.forward(feats[-1], train))
        skips = (feats[3], feats[2], feats[1], feats[0])
        b = feats[4]
        b_feats = []
        for k in range(4):
            b = self.dec_b[k].forward(np.concatenate([upsample2x(b), skips[k]], axis=1), train)
            b_feats.append(b)
        r = feats[4]
        for k in range(4):
            r = self.dec_r[k].forward(np.concatenate([upsample2x(r), skips[k]], axis=1), train)
            r = self.ctx[k].forward(b_feats[k], r, train)
        pb = softmax_channels(self.head_b.forward(b, train))
        pr = softmax_channels(self.head_r.forward(r, train))
        self._cache = (pb, pr)
        return pb, pr

    def backward(self, grad_pb, grad_pr):
        """Backpropagate gradients w.r.t. both probability maps; returns the image gradient."""
        if self.fused:
            raise FusedModelError("fused models cannot be trained")
        pb, pr = self._cache
        g_r = self.head_r.backward(softmax_backward(grad_pr, pr))
        g_b = self.head_b.backward(softmax_backward(grad_pb, pb))
        g_bfeat = [None, None, None, g_b]
        g_skip = [0.0, 0.0, 0.0, 0.0]
        for k in reversed(range(4)):
            g_bs, g_r = self.ctx[k].backward(g_r)
            g_bfeat[k] = g_bs if g_bfeat[k] is None else g_bfeat[k] + g_bs
            g_u = self.dec_r[k].backward(g_r)
            p = self._prev_ch[k]
            g_skip[k] = g_skip[k] + g_u[:, p:]
            g_r = upsample2x_backward(g_u[:, :p])
        g_e4 = g_r
        g_b = g_bfeat[3]
        for k in reversed(range(4)):
            g_u = self.dec_b[k].backward(g_b)
            p = self._prev_ch[k]
            g_skip[k] = g_skip[k] + g_u[:, p:]
            g_b = upsample2x_backward(g_u[:, :p])
            if k > 0:
                g_b = g_b + g_bfeat[k - 1]
        g = g_e4 + g_b
        # the input of encoder stage s is also decoder skip 3 - s
        for s in reversed(range(4)):
            g = self.enc[s].backward(g)
            if s > 0:
                g = g + g_skip[3 - s]
        return g + g_skip[3]

    def predict(self, x):
        pb, pr = self.forward(x, train=False)
        return pb.argmax(axis=1), pr.argmax(axis=1)
