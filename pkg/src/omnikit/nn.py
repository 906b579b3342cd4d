"""Network blocks: wrap-aware convolutions, anti-aliased pooling, upsampling,
group normalization and 2-d multi-head self-attention with relative positions.

All spatial ops treat axis 3 (width) as periodic, since an equirectangular
image is continuous across its left and right borders.  Height uses zero
padding for convolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class Conv2dParams:
    weight: Tensor  # Cout x Cin x k x k
    bias: Tensor | None = None
    stride: int = 1

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]


@dataclass
class SeparableConv2dParams:
    depthwise: Tensor  # C x 1 x k x k
    pointwise: Tensor  # Cout x C x 1 x 1
    bias: Tensor | None = None


@dataclass
class MhsaParams:
    """Projection weights (C x C, heads stacked along rows) and relative tables."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    rel_h: Tensor  # (2*Hb - 1) x d_head
    rel_w: Tensor  # (2*Wb - 1) x d_head
    heads: int

    @property
    def d_head(self) -> int:
        return self.wq.shape[0] // self.heads


@dataclass(frozen=True)
class BlurKernel:
    taps: tuple = (1.0, 2.0, 1.0)
    stride: int = 2

    def kernel2d(self) -> np.ndarray:
        t = np.asarray(self.taps, dtype=np.float64)
        k = np.outer(t, t)
        return k / k.sum()


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def _pad_same(x: Tensor, k: int) -> Tensor:
    p = k // 2
    if p == 0:
        return x
    return ad.pad(x, [(0, 0), (0, 0), (p, p), (p, p)], ["zero", "zero", "zero", "circular"])


def _check_kernel(k: int) -> None:
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation with circular horizontal and zero vertical padding."""
    k = p.kernel_size
    _check_kernel(k)
    if x.ndim != 4 or x.shape[1] != p.weight.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {p.weight.shape}")
    if k > 1 and x.shape[3] % 2:
        raise ValueError(f"conv2d: circular padding needs an even width, got {x.shape[3]}")
    y = ad.conv2d_valid(_pad_same(x, k), p.weight, stride=p.stride)
    if p.bias is not None:
        y = y + ad.reshape(p.bias, (1, -1, 1, 1))
    return y


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    _check_kernel(weight.shape[-1])
    if x.shape[1] != weight.shape[0] or weight.shape[1] != 1:
        raise ValueError(f"depthwise conv: input {x.shape} incompatible with weight {weight.shape}")
    return ad.conv2d_valid(_pad_same(x, weight.shape[-1]), weight, stride=stride, groups=x.shape[1])


def separable_conv2d(x: Tensor, p: SeparableConv2dParams) -> Tensor:
    """Depthwise k x k filtering followed by 1 x 1 channel mixing."""
    y = depthwise_conv2d(x, p.depthwise)
    return conv2d(y, Conv2dParams(p.pointwise, p.bias))


def conv_param_count(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cin * cout * k * k + (cout if bias else 0)


def separable_param_count(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cin * k * k + cin * cout + (cout if bias else 0)


# ---------------------------------------------------------------------------
# Pooling and resampling
# ---------------------------------------------------------------------------


def maxpool2x2_s1(x: Tensor) -> Tensor:
    """2 x 2 max at stride 1; trailing row replicated, trailing column wrapped."""
    xp = ad.pad(x, [(0, 0), (0, 0), (0, 1), (0, 1)], ["zero", "zero", "replicate", "circular"])
    H, W = x.shape[2], x.shape[3]
    a = xp[:, :, :H, :W]
    b = xp[:, :, :H, 1:]
    c = xp[:, :, 1:, :W]
    d = xp[:, :, 1:, 1:]
    return ad.maximum(ad.maximum(a, b), ad.maximum(c, d))


def blur_downsample(x: Tensor, kernel: BlurKernel = BlurKernel()) -> Tensor:
    """Depthwise binomial low-pass at the kernel stride (replicate rows, wrap columns)."""
    k2 = kernel.kernel2d()
    k = k2.shape[0]
    p = k // 2
    C = x.shape[1]
    w = Tensor(np.broadcast_to(k2, (C, 1, k, k)).copy())
    xp = ad.pad(x, [(0, 0), (0, 0), (p, p), (p, p)], ["zero", "zero", "replicate", "circular"])
    return ad.conv2d_valid(xp, w, stride=kernel.stride, groups=C)


def aa_maxpool(x: Tensor, kernel: BlurKernel = BlurKernel()) -> Tensor:
    """Anti-aliased max pooling: dense 2 x 2 max followed by a strided blur."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"aa_maxpool needs even spatial extents, got {x.shape[2:]}")
    return blur_downsample(maxpool2x2_s1(x), kernel)


def maxpool2x2(x: Tensor) -> Tensor:
    """Plain stride-2 max pooling, used only as the aliasing baseline."""
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    return ad.maximum(ad.maximum(a, b), ad.maximum(c, d))


def _interleave(even: Tensor, odd: Tensor, axis: int) -> Tensor:
    shape = list(even.shape)
    e = ad.reshape(even, shape[: axis + 1] + [1] + shape[axis + 1 :])
    o = ad.reshape(odd, shape[: axis + 1] + [1] + shape[axis + 1 :])
    both = ad.concat([e, o], axis=axis + 1)
    shape[axis] *= 2
    return ad.reshape(both, shape)


def _upsample_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    widths = [(0, 0)] * x.ndim
    widths[axis] = (1, 1)
    xp = ad.pad(x, widths, "replicate")

    def sl(start):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + n)
        return xp[tuple(idx)]

    prev, cur, nxt = sl(0), sl(1), sl(2)
    even = ad.scale(prev, 0.25) + ad.scale(cur, 0.75)
    odd = ad.scale(cur, 0.75) + ad.scale(nxt, 0.25)
    return _interleave(even, odd, axis)


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 with half-pixel centres (align_corners=False), edges clamped."""
    return _upsample_axis(_upsample_axis(x, 2), 3)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 8, eps: float = 1e-5) -> Tensor:
    B, C, H, W = x.shape
    if C % groups:
        raise ValueError(f"group_norm: {C} channels not divisible by {groups} groups")
    g = ad.reshape(x, (B, groups, C // groups * H * W))
    mu = ad.mean(g, axis=2, keepdims=True)
    centered = g - mu
    var = ad.mean(centered * centered, axis=2, keepdims=True)
    normed = centered * ad.power(var + eps, -0.5)
    y = ad.reshape(normed, (B, C, H, W))
    return y * ad.reshape(gamma, (1, C, 1, 1)) + ad.reshape(beta, (1, C, 1, 1))


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def relative_index(n: int) -> np.ndarray:
    """idx[i, i'] = i' - i + n - 1, addressing a (2n - 1)-row table."""
    r = np.arange(n)
    return r[None, :] - r[:, None] + n - 1


def attention_logits(q: Tensor, k: Tensor, rel_h: Tensor, rel_w: Tensor, Hb: int, Wb: int) -> Tensor:
    """Scaled content + relative-position logits, shape (B, h, n, n).

    ``q`` and ``k`` are (B, h, n, d) with token index ``i * Wb + j``.
    """
    B, h, n, d = q.shape
    content = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))  # B,h,n,n
    # per-row tables: Eh[i, i'] = rel_h[i' - i + Hb - 1]
    Eh = ad.take(rel_h, relative_index(Hb), axis=0)  # Hb,Hb,d
    Ew = ad.take(rel_w, relative_index(Wb), axis=0)  # Wb,Wb,d
    q5 = ad.reshape(q, (B, h, Hb, Wb, d))
    # height term: for each query row i, q . Eh[i, :]^T
    qh = ad.reshape(ad.transpose(q5, (2, 0, 1, 3, 4)), (Hb, B * h * Wb, d))
    lh = ad.matmul(qh, ad.transpose(Eh, (0, 2, 1)))  # Hb, B*h*Wb, Hb'
    lh = ad.transpose(ad.reshape(lh, (Hb, B, h, Wb, Hb)), (1, 2, 0, 3, 4))  # B,h,Hb,Wb,Hb'
    qw = ad.reshape(ad.transpose(q5, (3, 0, 1, 2, 4)), (Wb, B * h * Hb, d))
    lw = ad.matmul(qw, ad.transpose(Ew, (0, 2, 1)))  # Wb, B*h*Hb, Wb'
    lw = ad.transpose(ad.reshape(lw, (Wb, B, h, Hb, Wb)), (1, 2, 3, 0, 4))  # B,h,Hb,Wb,Wb'
    rel = ad.reshape(lh, (B, h, Hb, Wb, Hb, 1)) + ad.reshape(lw, (B, h, Hb, Wb, 1, Wb))
    logits = content + ad.reshape(rel, (B, h, n, n))
    return ad.scale(logits, 1.0 / math.sqrt(d))


def _project(x_tokens: Tensor, w: Tensor, heads: int) -> Tensor:
    # x_tokens: B, n, C ; w: C_out x C -> B, h, n, d
    B, n, _ = x_tokens.shape
    y = ad.matmul(x_tokens, ad.transpose(w, (1, 0)))
    return ad.transpose(ad.reshape(y, (B, n, heads, w.shape[0] // heads)), (0, 2, 1, 3))


def mhsa2d(x: Tensor, p: MhsaParams, return_weights: bool = False):
    """Global self-attention over the Hb x Wb grid with factorized relative logits.

    Residual addition is left to the enclosing block.
    """
    B, C, Hb, Wb = x.shape
    if C != p.wq.shape[1] or p.wq.shape[0] % p.heads:
        raise ValueError(f"mhsa2d: {C} channels incompatible with {p.heads} heads / weight {p.wq.shape}")
    if p.rel_h.shape[0] != 2 * Hb - 1 or p.rel_w.shape[0] != 2 * Wb - 1:
        raise ValueError(
            f"mhsa2d: relative tables {p.rel_h.shape}/{p.rel_w.shape} do not fit a {Hb}x{Wb} grid"
        )
    n = Hb * Wb
    tokens = ad.transpose(ad.reshape(x, (B, C, n)), (0, 2, 1))  # B,n,C
    q = _project(tokens, p.wq, p.heads)
    k = _project(tokens, p.wk, p.heads)
    v = _project(tokens, p.wv, p.heads)
    attn = ad.softmax(attention_logits(q, k, p.rel_h, p.rel_w, Hb, Wb), axis=-1)
    out = ad.matmul(attn, v)  # B,h,n,d
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, n, p.wv.shape[0]))
    out = _project(out, p.wo, 1)  # B,1,n,C
    y = ad.reshape(ad.transpose(ad.reshape(out, (B, n, C)), (0, 2, 1)), (B, C, Hb, Wb))
    return (y, attn) if return_weights else y


def mhsa_param_count(channels: int, Hb: int, Wb: int, heads: int) -> int:
    d = channels // heads
    return 4 * channels * channels + (2 * Hb - 1) * d + (2 * Wb - 1) * d


def absolute_position_logits(q: Tensor, k: Tensor, pos: Tensor) -> Tensor:
    """Logits with an absolute embedding ``pos`` (n x d) added to keys.

    Comparison variant only; the model uses relative logits.
    """
    d = q.shape[-1]
    kp = k + ad.reshape(pos, (1, 1) + pos.shape)
    return ad.scale(ad.matmul(q, ad.transpose(kp, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
