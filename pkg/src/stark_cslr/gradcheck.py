"""Central finite-difference checks of every differentiable operation.

Each suite builds a random scalar function of a few arrays, differentiates it
on a tape and compares against ``(f(x+h) - f(x-h)) / 2h`` entry by entry.
The error measure is ``|a - n| / max(|a|, |n|, 1e-3)``, i.e. relative error
with an absolute floor of 1e-7 at the 1e-4 threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ndiff as nd
from .config import StarkConfig
from .decoder import NormState, head_forward, init_head
from .encoder import (
    aggregate, encoder_forward, init_attention, init_encoder, patchify, spatial_attention, stark_module,
    temporal_attention,
)
from .model import StarkModel
from .ndiff import DiffArray
from .objective import ctc_loss, distillation_teacher, kl_distillation, total_loss
from .prep import StreamLayout

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-3


def numeric_gradient(fn: Callable[[], DiffArray], array: DiffArray, h: float = STEP) -> np.ndarray:
    grad = np.zeros(array.shape)
    flat = array.value.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return grad


def sampled_errors(fn: Callable[[], DiffArray], arrays: Sequence[DiffArray], rng: np.random.Generator,
                   per_array: int = 2, directions: int = 3, h: float = STEP) -> float:
    """Cheaper check for large models.

    A few random entries of every array are differenced individually, and a
    few random directions over all arrays jointly compare the directional
    derivative ``g . d`` against ``(f(x+hd) - f(x-hd)) / 2h``.
    """
    with nd.Tape() as tape:
        root = fn()
    grads = nd.backward(tape, root, arrays)
    worst = 0.0
    for a in arrays:
        flat = a.value.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_array, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            num = np.array([(up - down) / (2 * h)])
            worst = max(worst, relative_error(grads[a].reshape(-1)[i : i + 1], num))
    base = [a.value.copy() for a in arrays]
    for _ in range(directions):
        d = [rng.normal(size=a.shape) for a in arrays]
        d_norm = np.sqrt(sum(float((x * x).sum()) for x in d))
        d = [x / d_norm for x in d]
        values = []
        for sign in (1.0, -1.0):
            for a, b, x in zip(arrays, base, d):
                a.value = b + sign * h * x
            values.append(fn().item())
        for a, b in zip(arrays, base):
            a.value = b.copy()
        num = np.array([(values[0] - values[1]) / (2 * h)])
        ana = np.array([sum(float((grads[a] * x).sum()) for a, x in zip(arrays, d))])
        worst = max(worst, relative_error(ana, num))
    return worst


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def check_gradients(fn: Callable[[], DiffArray], arrays: Sequence[DiffArray], h: float = STEP) -> float:
    """Worst relative error over every entry of every array."""
    with nd.Tape() as tape:
        root = fn()
    grads = nd.backward(tape, root, arrays)
    return max(relative_error(grads[a], numeric_gradient(fn, a, h)) for a in arrays)


def _leaf(rng, *shape, scale=1.0):
    return DiffArray(rng.normal(0.0, scale, shape), requires_grad=True)


def _weighted(rng, fn):
    """Scalarise ``fn()`` against fixed random weights so sums are non-trivial."""
    weights = {}

    def scalar():
        out = fn()
        if out.shape not in weights:
            weights[out.shape] = rng.normal(size=out.shape)
        return (out * weights[out.shape]).sum()

    return scalar


# ----------------------------------------------------------------------------
# suites: seed -> worst relative error


def _op_suite(make):
    def run(seed: int) -> float:
        rng = np.random.default_rng(seed)
        fn, arrays = make(rng)
        return check_gradients(_weighted(rng, fn), arrays)

    return run


def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    return lambda: nd.matmul(a, b), [a, b]


def _einsum(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 4, 5)
    return lambda: nd.einsum("sct,ctq->sq", a, b), [a, b]


def _elementwise(op):
    def make(rng):
        a, b = _leaf(rng, 2, 1, 3), _leaf(rng, 4, 1)
        if op == "div":
            b.value = np.abs(b.value) + 0.5
        return lambda: nd.elementwise(a, b, op), [a, b]

    return make


def _softmax(rng):
    x = _leaf(rng, 2, 3, 4)
    return lambda: nd.softmax_axis(x, 1), [x]


def _log_softmax(rng):
    x = _leaf(rng, 3, 5)
    return lambda: nd.log_softmax_axis(x, -1), [x]


def _leaky(rng):
    x = _leaf(rng, 4, 5)
    return lambda: nd.leaky_relu(x, 0.1), [x]


def _reduce(op):
    def make(rng):
        x = _leaf(rng, 3, 4, 2)
        return lambda: nd.reduce(x, 1, op), [x]

    return make


def _structural(rng):
    x, y = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 1, 4)
    idx = np.array([2, 0, 2])

    def fn():
        z = nd.concat([x, y], axis=1)
        z = nd.pad_axis(nd.transpose(z, (2, 0, 1)), 2, 1, 2)
        return nd.reshape(nd.take(z, (slice(None), 1, idx)), (4, 3))

    return fn, [x, y]


def _unary(rng):
    x = _leaf(rng, 3, 3)
    return lambda: nd.log(nd.sqrt(nd.exp(x) + 1.0)) - nd.neg(x), [x]


def _patchify(rng):
    x = _leaf(rng, 2, 5, 3)
    return lambda: patchify(x, 3), [x]


def _temporal(rng):
    q, kp = _leaf(rng, 2, 3, 4, 3), _leaf(rng, 2, 3, 4, 3, 3)
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
    return lambda: temporal_attention(q, kp, a, b), [q, kp, a, b]


def _spatial(rng):
    q, k = _leaf(rng, 2, 3, 4, 3), _leaf(rng, 2, 3, 4, 3)
    g, d = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
    return lambda: spatial_attention(q, k, g, d), [q, k, g, d]


def _aggregate(rng):
    a_t, a_s = _leaf(rng, 2, 4, 3, 3), _leaf(rng, 2, 3, 3)
    x = _leaf(rng, 2, 4, 3)

    def fn():
        return aggregate(a_t, a_s, x, patchify(x, 3))

    return fn, [a_t, a_s, x]


TINY_MODULE = StarkConfig(stem_channels=4, channels=(4,), heads=1, head_dim=2, kernel=3, dec_hidden=4, dec_ffn=4)


def _randomise(rng, arrays, scale=0.5):
    for a in arrays:
        a.value = a.value + rng.normal(0.0, scale, a.shape)


def _stark_module(rng):
    params = init_attention(rng, 4, 4, 3, TINY_MODULE)
    _randomise(rng, params.named().values())
    x = _leaf(rng, 4, 4, 3)
    arrays = [x, *params.named().values()]
    return lambda: stark_module(x, params, TINY_MODULE), arrays


TINY_ENCODER = StarkConfig(stem_channels=3, channels=(4, 3), heads=2, head_dim=2, kernel=3, dec_hidden=4, dec_ffn=5)


def _encoder(rng):
    params = init_encoder(rng, 3, TINY_ENCODER)
    _randomise(rng, params.named().values(), 0.3)
    frames = _leaf(rng, 3, 7, 3)
    return lambda: encoder_forward(frames, params, TINY_ENCODER), [frames, *params.named().values()]


def _head(training):
    def make(rng):
        params, state = init_head(rng, 5, 4, TINY_ENCODER)
        state = NormState(rng.normal(size=4), rng.uniform(0.5, 2.0, 4))
        _randomise(rng, params.named().values(), 0.3)
        x = _leaf(rng, 6, 5)
        return lambda: head_forward(x, params, state, TINY_ENCODER, training)[0], [x, *params.named().values()]

    return make


def _ctc_suite(seed: int) -> float:
    rng = np.random.default_rng(seed)
    logits = _leaf(rng, 6, 4)
    targets = [1, 3, 3]
    return check_gradients(lambda: ctc_loss(nd.log_softmax_axis(logits, 1), targets), [logits])


def _kl_suite(seed: int) -> float:
    rng = np.random.default_rng(seed)
    streams = [_leaf(rng, 5, 4, scale=2.0) for _ in range(3)]
    # the ensemble target is a stop-gradient, so finite differences hold it fixed
    teacher = distillation_teacher([nd.log_softmax_axis(z, 1) for z in streams], 2.0)

    def fn():
        return kl_distillation([nd.log_softmax_axis(z, 1) for z in streams], 2.0, teacher=teacher)

    return check_gradients(fn, streams)


def _total_suite(seed: int) -> float:
    rng = np.random.default_rng(seed)
    names = ("fuse", "left", "right", "body")
    logits = {n: _leaf(rng, 6, 4) for n in names}
    teacher = distillation_teacher([nd.log_softmax_axis(z, 1) for z in logits.values()], 3.0)
    return check_gradients(lambda: total_loss(logits, [2, 1], 0.7, 3.0, teacher=teacher).total, list(logits.values()))


TINY_LAYOUT = StreamLayout("tiny8", 8, (0, 1), (2, 3), (4, 5), (6, 7))
TINY_MODEL = StarkConfig(
    stem_channels=3, channels=(4, 3), heads=2, head_dim=2, kernel=3, dec_hidden=4, dec_ffn=5, layout="tiny8"
)


def _end_to_end(seed: int) -> float:
    """Encoder, fusion, all four heads (training mode) and the total loss.

    Every parameter array is covered, by sampled entries and joint directions.
    """
    rng = np.random.default_rng(seed)
    model = StarkModel(TINY_MODEL, TINY_LAYOUT, 4, rng)
    params = list(model.parameters().values())
    _randomise(rng, params, 0.3)
    frames = rng.uniform(-1, 1, (10, 8, 3))
    streams = {name: frames[:, list(idx)] for name, idx in TINY_LAYOUT.streams().items()}

    logits, _ = model.forward(streams, training=True)
    teacher = distillation_teacher([nd.log_softmax_axis(z, 1) for z in logits.values()], 2.0)

    def fn():
        logits, _ = model.forward(streams, training=True)
        return total_loss(logits, [1, 3], 1.0, 2.0, teacher=teacher).total

    return sampled_errors(fn, params, rng)


SUITES: dict[str, Callable[[int], float]] = {
    "matmul": _op_suite(_matmul),
    "einsum": _op_suite(_einsum),
    "add": _op_suite(_elementwise("add")),
    "sub": _op_suite(_elementwise("sub")),
    "mul": _op_suite(_elementwise("mul")),
    "div": _op_suite(_elementwise("div")),
    "softmax_axis": _op_suite(_softmax),
    "log_softmax_axis": _op_suite(_log_softmax),
    "leaky_relu": _op_suite(_leaky),
    "reduce_sum": _op_suite(_reduce("sum")),
    "reduce_mean": _op_suite(_reduce("mean")),
    "reduce_max": _op_suite(_reduce("max")),
    "structural": _op_suite(_structural),
    "unary": _op_suite(_unary),
    "patchify": _op_suite(_patchify),
    "temporal_attention": _op_suite(_temporal),
    "spatial_attention": _op_suite(_spatial),
    "aggregate": _op_suite(_aggregate),
    "stark_module": _op_suite(_stark_module),
    "encoder_forward": _op_suite(_encoder),
    "head_forward_train": _op_suite(_head(True)),
    "head_forward_eval": _op_suite(_head(False)),
    "ctc_loss": _ctc_suite,
    "kl_distillation": _kl_suite,
    "total_loss": _total_suite,
    "end_to_end": _end_to_end,
}

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class GradcheckResult:
    op: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def run_gradchecks(ops: Sequence[str] | None = None, seeds: Sequence[int] = DEFAULT_SEEDS) -> list[GradcheckResult]:
    names = list(SUITES) if not ops else list(ops)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown gradcheck suite(s) {unknown}; available: {sorted(SUITES)}")
    return [GradcheckResult(name, seed, SUITES[name](seed)) for name in names for seed in seeds]
