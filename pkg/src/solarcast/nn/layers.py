"""Transformer building blocks on top of :mod:`solarcast.nn.autograd`.

Token grids are laid out as ``(B, Hs, Ws, D)``.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import autograd as ag
from .autograd import Tensor


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    a = rng.standard_normal(shape)
    a = np.clip(a, -2.0, 2.0)
    return (a * std).astype(dtype)


def param(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Module:
    training = False

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def n_parameters(self):
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, zero_init=False, std=0.02):
        w = np.zeros((d_in, d_out), np.float32) if zero_init else trunc_normal(rng, (d_in, d_out), std)
        self.weight = param(w)
        self.bias = param(np.zeros(d_out, np.float32)) if bias else None

    def __call__(self, x):
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = param(np.ones(dim, np.float32))
        self.beta = param(np.zeros(dim, np.float32))
        self.eps = eps

    def __call__(self, x):
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


class PatchEmbed(Module):
    """Non-overlapping ``patch`` x ``patch`` pixel blocks to D-dim tokens.

    Input ``(B, C, H, W)``; output ``(B, H/P, W/P, D)``.  A learned
    positional term is added after the (optional) norm.
    """

    def __init__(self, in_chans, patch, dim, grid_tokens, rng, patch_norm=True, eps=1e-5):
        self.patch = patch
        self.in_chans = in_chans
        self.proj = Linear(in_chans * patch * patch, dim, rng)
        self.norm = LayerNorm(dim, eps) if patch_norm else None
        self.pos = param(np.zeros((*grid_tokens, dim), np.float32))

    def __call__(self, x):
        b, c, h, w = x.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
        if c != self.in_chans:
            raise ShapeError(f"expected {self.in_chans} input channels, got {c}")
        hs, ws = h // p, w // p
        t = ag.reshape(x, (b, c, hs, p, ws, p))
        t = ag.transpose(t, (0, 2, 4, 1, 3, 5))
        t = ag.reshape(t, (b, hs, ws, c * p * p))
        t = self.proj(t)
        if self.norm is not None:
            t = self.norm(t)
        return t + self.pos


class PatchRecover(Module):
    """Per-token linear map to ``P*P*C_out`` values, reshaped to pixels."""

    def __init__(self, dim, patch, out_chans, rng):
        self.patch = patch
        self.out_chans = out_chans
        self.proj = Linear(dim, patch * patch * out_chans, rng)

    def __call__(self, tokens):
        b, hs, ws, _ = tokens.shape
        p, c = self.patch, self.out_chans
        t = self.proj(tokens)
        t = ag.reshape(t, (b, hs, ws, c, p, p))
        t = ag.transpose(t, (0, 3, 1, 4, 2, 5))
        return ag.reshape(t, (b, c, hs * p, ws * p))


def window_partition(x, window):
    b, hs, ws, d = x.shape
    if hs % window or ws % window:
        raise ShapeError(f"token grid {hs}x{ws} not divisible by window {window}")
    t = ag.reshape(x, (b, hs // window, window, ws // window, window, d))
    t = ag.transpose(t, (0, 1, 3, 2, 4, 5))
    return ag.reshape(t, (b * (hs // window) * (ws // window), window * window, d))


def window_merge(x, window, b, hs, ws):
    d = x.shape[-1]
    t = ag.reshape(x, (b, hs // window, ws // window, window, window, d))
    t = ag.transpose(t, (0, 1, 3, 2, 4, 5))
    return ag.reshape(t, (b, hs, ws, d))


def shift_mask(hs, ws, window, shift):
    """Additive mask (nW, N, N) blocking attention across rolled-in seams."""
    img = np.zeros((hs, ws))
    cnt = 0
    for hsl in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for wsl in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img[hsl, wsl] = cnt
            cnt += 1
    win = img.reshape(hs // window, window, ws // window, window).transpose(0, 2, 1, 3).reshape(-1, window * window)
    diff = win[:, None, :] - win[:, :, None]
    return np.where(diff != 0, -1e4, 0.0)


def attention(q, k, v, scale, mask=None):
    """Scaled dot-product attention; q,k,v are ``(..., N, d)``."""
    logits = ag.mul(ag.matmul(q, ag.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), scale)
    if mask is not None:
        logits = logits + mask
    weights = ag.softmax(logits, axis=-1)
    return ag.matmul(weights, v), weights


class WindowAttention(Module):
    """Multi-head self-attention inside non-overlapping token windows.

    With ``shift > 0`` the token grid is rolled by ``-shift`` before
    partitioning and rolled back afterwards; a mask keeps tokens from
    attending across the wrap-around seam.
    """

    def __init__(self, dim, heads, window, rng, shift=0, qkv_bias=True):
        if dim % heads:
            raise ShapeError(f"embed dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.window, self.shift = dim, heads, window, shift
        self.qkv = Linear(dim, 3 * dim, rng, bias=qkv_bias)
        self.proj = Linear(dim, dim, rng, zero_init=True)
        self.last_weights = None
        self._masks = {}

    def _mask(self, hs, ws):
        key = (hs, ws)
        if key not in self._masks:
            self._masks[key] = shift_mask(hs, ws, self.window, self.shift)
        return self._masks[key]

    def __call__(self, x):
        b, hs, ws, d = x.shape
        w = self.window
        shift = self.shift if self.shift and (hs > w or ws > w) else 0
        if shift:
            x = ag.roll(x, (-shift, -shift), (1, 2))
        xw = window_partition(x, w)
        nwb, n, _ = xw.shape
        nh, hd = self.heads, d // self.heads
        qkv = ag.reshape(self.qkv(xw), (nwb, n, 3, nh, hd))
        qkv = ag.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        mask = None
        if shift:
            nw = (hs // w) * (ws // w)
            m = self._mask(hs, ws).astype(x.dtype)
            mask = np.tile(m[:, None], (b, 1, 1, 1)).reshape(b * nw, 1, n, n)
        out, weights = attention(q, k, v, x.dtype.type(hd**-0.5), mask)
        self.last_weights = weights.data
        out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (nwb, n, d))
        out = self.proj(out)
        out = window_merge(out, w, b, hs, ws)
        if shift:
            out = ag.roll(out, (shift, shift), (1, 2))
        return out


class MLP(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng, zero_init=True)

    def __call__(self, x):
        return self.fc2(ag.gelu(self.fc1(x)))


class SwinBlock(Module):
    """Pre-norm residual block: windowed attention then MLP.

    ``drop_path`` drops each residual branch per sample while training.
    """

    def __init__(self, dim, heads, window, rng, shift=0, mlp_ratio=4, drop_path=0.0, qkv_bias=True, eps=1e-5):
        self.norm1 = LayerNorm(dim, eps)
        self.attn = WindowAttention(dim, heads, window, rng, shift=shift, qkv_bias=qkv_bias)
        self.norm2 = LayerNorm(dim, eps)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng)
        self.drop_path = drop_path
        self.rng = np.random.default_rng(int(rng.integers(2**63)))

    def _drop(self, branch):
        if not (self.training and self.drop_path > 0):
            return branch
        keep = 1.0 - self.drop_path
        b = branch.shape[0]
        m = (self.rng.random(b) < keep).astype(branch.dtype) / keep
        return ag.mul(branch, m.reshape(b, *([1] * (branch.ndim - 1))))

    def __call__(self, x):
        x = x + self._drop(self.attn(self.norm1(x)))
        return x + self._drop(self.mlp(self.norm2(x)))


class SwinStage(Module):
    """``depth`` blocks alternating plain and half-window-shifted attention."""

    def __init__(self, dim, depth, heads, window, rng, mlp_ratio=4, drop_path=0.0, shifted=True, eps=1e-5):
        self.blocks = [
            SwinBlock(
                dim,
                heads,
                window,
                rng,
                shift=(window // 2 if shifted and i % 2 == 1 else 0),
                mlp_ratio=mlp_ratio,
                drop_path=drop_path * i / max(1, depth - 1),
                eps=eps,
            )
            for i in range(depth)
        ]
        self.norm = LayerNorm(dim, eps)

    def __call__(self, x):
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def fuse(z_sat, z_bg, w_q, w_k, w_v):
    """Cross-attention from satellite tokens to meteo tokens, then concat.

    ``cat(Z_sat + Attn(Z_sat W_Q, Z_bg W_K, Z_bg W_V), Z_bg)`` along the
    feature axis; token grids are ``(B, Hs, Ws, D)``.
    """
    if z_sat.shape != z_bg.shape:
        raise ShapeError(f"token grids differ: {z_sat.shape} vs {z_bg.shape}")
    b, hs, ws, d = z_sat.shape
    zs = ag.reshape(z_sat, (b, hs * ws, d))
    zb = ag.reshape(z_bg, (b, hs * ws, d))
    q = ag.matmul(zs, w_q)
    k = ag.matmul(zb, w_k)
    v = ag.matmul(zb, w_v)
    out, _ = attention(q, k, v, zs.dtype.type(d**-0.5))
    enhanced = zs + out
    fused = ag.concat([enhanced, zb], axis=-1)
    return ag.reshape(fused, (b, hs, ws, 2 * d))
