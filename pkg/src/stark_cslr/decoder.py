"""Multi-stream gloss decoder heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import ndiff as nd
from .config import StarkConfig
from .encoder import sinusoidal_encoding
from .ndiff import DiffArray, ShapeError

# decoding stream -> encoder streams concatenated along channels, in order
DECODING_STREAMS = {
    "fuse": ("body", "left", "right", "face"),
    "left": ("left", "face"),
    "right": ("right", "face"),
    "body": ("body",),
}


def fuse_streams(encoded: dict[str, DiffArray], heads=tuple(DECODING_STREAMS)) -> dict[str, DiffArray]:
    lengths = {name: z.shape[0] for name, z in encoded.items()}
    if len(set(lengths.values())) != 1:
        raise ShapeError(f"encoder outputs disagree on length: {lengths}")
    return {head: nd.concat([encoded[s] for s in DECODING_STREAMS[head]], axis=1) for head in heads}


def stream_width(head: str, feature_dim: int) -> int:
    return len(DECODING_STREAMS[head]) * feature_dim


@dataclass
class HeadParams:
    proj_w: DiffArray
    proj_b: DiffArray
    norm_scale: DiffArray
    norm_shift: DiffArray
    ffn1_w: DiffArray
    ffn1_b: DiffArray
    ffn2_w: DiffArray
    ffn2_b: DiffArray
    cls_w: DiffArray
    cls_b: DiffArray

    def named(self, prefix: str = "") -> dict[str, DiffArray]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class NormState:
    """Running statistics of a head's normalisation layer."""

    mean: np.ndarray
    var: np.ndarray


def _dense(rng, c_out, c_in):
    bound = 1.0 / math.sqrt(c_in)
    return (
        DiffArray(rng.uniform(-bound, bound, (c_out, c_in)), requires_grad=True),
        DiffArray(rng.uniform(-bound, bound, c_out), requires_grad=True),
    )


def init_head(rng: np.random.Generator, width: int, num_classes: int, config: StarkConfig) -> tuple[HeadParams, NormState]:
    h = config.dec_hidden
    proj = _dense(rng, h, width)
    ffn1 = _dense(rng, config.dec_ffn, h)
    ffn2 = _dense(rng, h, config.dec_ffn)
    cls = _dense(rng, num_classes, h)
    params = HeadParams(
        *proj,
        DiffArray(np.ones(h), requires_grad=True),
        DiffArray(np.zeros(h), requires_grad=True),
        *ffn1,
        *ffn2,
        *cls,
    )
    return params, NormState(np.zeros(h), np.ones(h))


def dense_rows(x, w, b) -> DiffArray:
    """``x @ w.T + b`` for row-major ``T x in`` input."""
    return nd.matmul(x, nd.transpose(w, (1, 0))) + b


def normalize_time(x, state: NormState, training: bool, eps: float):
    """Per-channel normalisation over the time axis of one sample.

    Returns the normalised array and, in training mode, the (mean, unbiased
    variance) pair the caller should fold into the running statistics.
    """
    if training:
        mean = nd.reduce(x, 0, "mean", keepdims=True)
        centred = x - mean
        var = nd.reduce(centred * centred, 0, "mean", keepdims=True)
        out = centred / nd.sqrt(var + eps)
        n = x.shape[0]
        unbiased = var.value[0] * (n / (n - 1)) if n > 1 else var.value[0]
        return out, (mean.value[0].copy(), unbiased)
    out = (x - state.mean) / np.sqrt(state.var + eps)
    return out, None


def update_running(state: NormState, stats, momentum: float) -> None:
    mean, var = stats
    state.mean = (1.0 - momentum) * state.mean + momentum * mean
    state.var = (1.0 - momentum) * state.var + momentum * var


def head_forward(x, params: HeadParams, state: NormState, config: StarkConfig, training: bool, hooks=None):
    """``T' x W`` stream features to ``T' x (V+1)`` logits.

    Returns ``(logits, stats)``; ``stats`` is None in evaluation mode.  When
    ``hooks`` is a dict the normalised activations are stored under "normed".
    """
    x = nd.as_diff(x)
    if x.ndim != 2 or x.shape[1] != params.proj_w.shape[1]:
        raise ShapeError(f"head expects T x {params.proj_w.shape[1]} input, got {x.shape}")
    h = dense_rows(x, params.proj_w, params.proj_b)
    h = h + sinusoidal_encoding(h.shape[0], h.shape[1])
    h, stats = normalize_time(h, state, training, config.bn_eps)
    if hooks is not None:
        hooks["normed"] = h
    h = h * params.norm_scale + params.norm_shift
    ff = dense_rows(nd.leaky_relu(dense_rows(h, params.ffn1_w, params.ffn1_b), config.slope), params.ffn2_w, params.ffn2_b)
    h = h + ff
    return dense_rows(h, params.cls_w, params.cls_b), stats
