"""STARK encoder: unified spatio-temporal attention over keypoint sequences.

Feature maps are channel-first, ``C x T x P`` (channels, frames, keypoints).
Attention tensors carry the head axis first: ``Q, K`` are ``S x C' x T x P``,
the temporal attention is ``S x T x k x P`` and the spatial attention is
``S x P x P``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import ndiff as nd
from .config import StarkConfig
from .ndiff import DiffArray, ShapeError


def sinusoidal_encoding(length: int, width: int) -> np.ndarray:
    """``length x width`` table, sin on even channels and cos on odd ones."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    pair = np.arange(width, dtype=np.float64)[None, :] // 2
    angle = pos / np.power(10000.0, 2.0 * pair / width)
    table = np.empty((length, width))
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


def linear_channels(x: DiffArray, weight: DiffArray, bias: DiffArray) -> DiffArray:
    """Apply ``weight`` (out x in) on the leading channel axis of ``C x ...``."""
    c_in = x.shape[0]
    if weight.shape[1] != c_in:
        raise ShapeError(f"linear layer expects {weight.shape[1]} input channels, got {c_in}")
    rest = x.shape[1:]
    flat = nd.reshape(x, (c_in, int(np.prod(rest))))
    out = nd.matmul(weight, flat) + nd.reshape(bias, (weight.shape[0], 1))
    return nd.reshape(out, (weight.shape[0],) + rest)


def patchify(x, kernel: int, stride: int = 1) -> DiffArray:
    """Zero-padded temporal windows centred on each frame.

    The time axis is the second-to-last one; a window axis of length
    ``kernel`` is inserted right after it, so ``C x T x P`` becomes
    ``C x T x k x P`` with ``out[..., t, j, p] = x[..., t + j - k//2, p]``.
    """
    if kernel % 2 != 1:
        raise ValueError(f"patch kernel must be odd, got {kernel}")
    x = nd.as_diff(x)
    xv = x.value
    steps = xv.shape[-2]
    half = kernel // 2
    widths = [(0, 0)] * xv.ndim
    widths[-2] = (half, half)
    padded = np.pad(xv, widths)
    windows = [slice(j, j + steps, stride) for j in range(kernel)]
    value = np.stack([padded[..., w, :] for w in windows], axis=-2)

    def vjp(g):
        grad = np.zeros(padded.shape)
        for j, w in enumerate(windows):
            grad[..., w, :] += g[..., j, :]
        return (grad[..., half : half + steps, :],)

    return nd.custom_op(value, (x,), vjp)


def temporal_attention(q, k_patches, alpha, beta) -> DiffArray:
    """Softmax over each frame's window, then per-head, per-keypoint affine."""
    s, c, t, p = q.shape
    if k_patches.shape[:3] != (s, c, t) or k_patches.shape[4] != p or alpha.shape != (s, p) or beta.shape != (s, p):
        raise ShapeError(
            f"temporal attention: Q {q.shape}, K patches {k_patches.shape}, alpha {alpha.shape}, beta {beta.shape}"
        )
    scores = nd.einsum("sctp,sctjp->stjp", q, k_patches) * (1.0 / c)
    weights = nd.softmax_axis(scores, axis=2)
    return weights * nd.reshape(alpha, (s, 1, 1, p)) + nd.reshape(beta, (s, 1, 1, p))


def spatial_attention(q, k, gamma, delta) -> DiffArray:
    """Time-pooled keypoint-to-keypoint attention, one map per head."""
    s, c, t, p = q.shape
    if k.shape != q.shape or gamma.shape != (s, p) or delta.shape != (s, p):
        raise ShapeError(f"spatial attention: Q {q.shape}, K {k.shape}, gamma {gamma.shape}, delta {delta.shape}")
    scores = nd.einsum("sctp,sctq->spq", q, k) * (1.0 / (c * t))
    weights = nd.softmax_axis(scores, axis=2)
    return weights * nd.reshape(gamma, (s, p, 1)) + nd.reshape(delta, (s, p, 1))


def aggregate(a_t, a_s, x, x_patches) -> DiffArray:
    """Combine temporal and spatial attention into ``(S*C) x T x P`` features.

    Per head the windowed temporal sum is taken, and the centre frame's own
    term is swapped for its spatially mixed version.
    """
    s, t, k, p = a_t.shape
    c = x.shape[0]
    if x.shape != (c, t, p) or x_patches.shape != (c, t, k, p) or a_s.shape != (s, p, p):
        raise ShapeError(
            f"aggregate: A_t {a_t.shape}, A_s {a_s.shape}, X {x.shape}, X patches {x_patches.shape}"
        )
    windowed = nd.einsum("stjp,ctjp->sctp", a_t, x_patches)
    centre = nd.reshape(nd.take(a_t, (slice(None), slice(None), k // 2, slice(None))), (s, 1, t, p))
    mixed = nd.einsum("spq,ctq->sctp", a_s, x)
    out = windowed - centre * nd.reshape(x, (1, c, t, p)) + centre * mixed
    return nd.reshape(out, (s * c, t, p))


# ----------------------------------------------------------------------------
# parameters


@dataclass
class AttentionParams:
    """One spatio-temporal attention module of one stream."""

    qk_w: DiffArray
    qk_b: DiffArray
    alpha: DiffArray
    beta: DiffArray
    gamma: DiffArray
    delta: DiffArray
    out_w: DiffArray
    out_b: DiffArray
    res1_w: DiffArray
    res1_b: DiffArray
    ffn1_w: DiffArray
    ffn1_b: DiffArray
    ffn2_w: DiffArray
    ffn2_b: DiffArray
    res2_w: DiffArray
    res2_b: DiffArray

    def named(self, prefix: str = "") -> dict[str, DiffArray]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class EncoderParams:
    stem_w: DiffArray
    stem_b: DiffArray
    modules: list[AttentionParams]

    def named(self, prefix: str = "") -> dict[str, DiffArray]:
        out = {prefix + "stem_w": self.stem_w, prefix + "stem_b": self.stem_b}
        for i, m in enumerate(self.modules):
            out.update(m.named(f"{prefix}m{i}."))
        return out


def _dense(rng: np.random.Generator, c_out: int, c_in: int, gain: float = 1.0) -> tuple[DiffArray, DiffArray]:
    """Normal weights with std ``gain / sqrt(c_in)`` and zero bias.

    Gain 1 keeps the variance of a branch equal to its input's.  Two such
    branches summed and passed through the leaky ReLU come out at about the
    input scale again, so the signal does not fade over the module stack.
    """
    w = DiffArray(rng.normal(0.0, gain / math.sqrt(c_in), (c_out, c_in)), requires_grad=True)
    b = DiffArray(np.zeros(c_out), requires_grad=True)
    return w, b


def init_attention(rng: np.random.Generator, c_in: int, c_out: int, points: int, config: StarkConfig) -> AttentionParams:
    s, d = config.heads, config.head_dim
    qk_w = DiffArray(rng.normal(0.0, 1.0 / math.sqrt(c_in), (2 * s * d, c_in)), requires_grad=True)
    qk_b = DiffArray(np.zeros(2 * s * d), requires_grad=True)
    out_w, out_b = _dense(rng, c_out, s * c_in)
    res1_w, res1_b = _dense(rng, c_out, c_in)
    hidden = config.ffn_expansion * c_out
    # the FFN's first layer feeds the nonlinearity alone, so it gets the He gain
    ffn1_w, ffn1_b = _dense(rng, hidden, c_out, math.sqrt(2.0 / (1.0 + config.slope**2)))
    ffn2_w, ffn2_b = _dense(rng, c_out, hidden)
    res2_w, res2_b = _dense(rng, c_out, c_in)

    def const(v):
        return DiffArray(np.full((s, points), v), requires_grad=True)

    return AttentionParams(
        qk_w, qk_b, const(1.0), const(0.0), const(1.0), const(0.0),
        out_w, out_b, res1_w, res1_b, ffn1_w, ffn1_b, ffn2_w, ffn2_b, res2_w, res2_b,
    )


def init_encoder(rng: np.random.Generator, points: int, config: StarkConfig) -> EncoderParams:
    if points < 1:
        raise ValueError("a stream needs at least one keypoint")
    stem_w, stem_b = _dense(rng, config.stem_channels, config.in_channels)
    modules, c_in = [], config.stem_channels
    for c_out in config.channels:
        modules.append(init_attention(rng, c_in, c_out, points, config))
        c_in = c_out
    return EncoderParams(stem_w, stem_b, modules)


# ----------------------------------------------------------------------------
# forward


def input_stem(frames, w, b) -> DiffArray:
    """Per-point projection of ``3 x T x P`` input plus temporal position encoding."""
    frames = nd.as_diff(frames)
    if frames.shape[0] != w.shape[1]:
        raise ShapeError(f"stem expects {w.shape[1]} input channels, got {frames.shape[0]}")
    x = linear_channels(frames, w, b)
    c, t = w.shape[0], frames.shape[1]
    pe = sinusoidal_encoding(t, c).T[:, :, None]
    return x + pe


def stark_module(x, p: AttentionParams, config: StarkConfig) -> DiffArray:
    x = nd.as_diff(x)
    c_in, t, points = x.shape
    s, d = config.heads, config.head_dim
    qk = nd.reshape(linear_channels(x, p.qk_w, p.qk_b), (2, s, d, t, points))
    q, k = qk[0], qk[1]
    a_t = temporal_attention(q, patchify(k, config.kernel), p.alpha, p.beta)
    a_s = spatial_attention(q, k, p.gamma, p.delta)
    x_a = aggregate(a_t, a_s, x, patchify(x, config.kernel))

    slope = config.slope
    y = linear_channels(x_a, p.out_w, p.out_b)
    y = nd.leaky_relu(linear_channels(x, p.res1_w, p.res1_b) + y, slope)
    y = linear_channels(nd.leaky_relu(linear_channels(y, p.ffn1_w, p.ffn1_b), slope), p.ffn2_w, p.ffn2_b)
    return nd.leaky_relu(linear_channels(x, p.res2_w, p.res2_b) + y, slope)


def pooled_length(frames: int, pools: int = 2) -> int:
    for _ in range(pools):
        frames = -(-frames // 2)
    return frames


def temporal_max_pool(h) -> DiffArray:
    """Kernel-2 stride-2 max-pool over the rows of ``T x D``; odd T keeps its last row."""
    t = h.shape[0]
    out = -(-t // 2)
    idx = np.minimum(np.arange(2 * out), t - 1)
    pairs = nd.reshape(nd.take(h, idx), (out, 2, h.shape[1]))
    return nd.reduce(pairs, 1, "max")


def encoder_forward(frames, params: EncoderParams, config: StarkConfig) -> DiffArray:
    """``3 x T x P_s`` stream input to ``T' x D`` features."""
    frames = nd.as_diff(frames)
    if frames.ndim != 3 or frames.shape[2] == 0:
        raise ShapeError(f"encoder input must be 3 x T x P with P >= 1, got {frames.shape}")
    x = input_stem(frames, params.stem_w, params.stem_b)
    for module in params.modules:
        x = stark_module(x, module, config)
    h = nd.transpose(nd.reduce(x, 2, "mean"), (1, 0))
    for _ in range(config.pools):
        h = temporal_max_pool(h)
    return h


# ----------------------------------------------------------------------------
# parameter budget


def module_parameter_count(c_in: int, c_out: int, heads: int, head_dim: int, points: int, expansion: int) -> dict:
    hidden = expansion * c_out
    return {
        "qk": c_in * 2 * heads * head_dim + 2 * heads * head_dim,
        "affine": 4 * heads * points,
        "out": heads * c_in * c_out + c_out,
        "res1": c_in * c_out + c_out,
        "ffn": c_out * hidden + hidden + hidden * c_out + c_out,
        "res2": c_in * c_out + c_out,
    }


def count_parameters(config: StarkConfig, layout) -> dict:
    """Closed-form encoder parameter counts per stream and module."""
    streams = {}
    for name, points in layout.sizes().items():
        stem = config.in_channels * config.stem_channels + config.stem_channels
        modules, c_in = [], config.stem_channels
        for c_out in config.channels:
            parts = module_parameter_count(c_in, c_out, config.heads, config.head_dim, points, config.ffn_expansion)
            modules.append(sum(parts.values()))
            c_in = c_out
        streams[name] = {"points": points, "stem": stem, "modules": modules, "total": stem + sum(modules)}
    return {"streams": streams, "total": sum(s["total"] for s in streams.values())}
