"""Training objective: per-stream CTC plus cross-distillation to the ensemble."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ndiff as nd
from .ndiff import DiffArray, ShapeError

BLANK = 0


class InfeasibleTargetError(ValueError):
    """The target needs more frames than the sequence provides."""


def required_frames(targets: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def _extend(targets: Sequence[int]) -> np.ndarray:
    ext = np.full(2 * len(targets) + 1, BLANK, dtype=np.int64)
    ext[1::2] = targets
    return ext


def ctc_forward_backward(log_probs: np.ndarray, targets: Sequence[int]):
    """Log-space alpha/beta lattices over the blank-extended target.

    Returns ``(log_likelihood, log_alpha, log_beta, ext)``; both lattices
    include the emission at their own frame.
    """
    steps, classes = log_probs.shape
    targets = [int(t) for t in targets]
    if any(not 1 <= t < classes for t in targets):
        raise ValueError(f"target ids must lie in 1..{classes - 1}: {targets}")
    if required_frames(targets) > steps:
        raise InfeasibleTargetError(
            f"target of length {len(targets)} needs {required_frames(targets)} frames, only {steps} available"
        )
    ext = _extend(targets)
    n = len(ext)
    # skipping from s-2 is allowed into non-blank states whose label differs
    skip = np.zeros(n, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    emit = log_probs[:, ext]

    alpha = np.full((steps, n), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if n > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, steps):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((steps, n), -np.inf)
    beta[-1, -1] = emit[-1, -1]
    if n > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(steps - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]

    tail = alpha[-1, -1] if n == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    return tail, alpha, beta, ext


def ctc_loss(log_probs, targets: Sequence[int]) -> DiffArray:
    """Negative log-probability of ``targets`` under ``T x (V+1)`` log-probs."""
    log_probs = nd.as_diff(log_probs)
    lp = log_probs.value
    if lp.ndim != 2:
        raise ShapeError(f"log_probs must be T x (V+1), got {lp.shape}")
    loglik, alpha, beta, ext = ctc_forward_backward(lp, targets)

    def vjp(g):
        occupancy = np.exp(alpha + beta - lp[:, ext] - loglik)
        grad = np.zeros_like(lp)
        for s, label in enumerate(ext):
            grad[:, label] -= occupancy[:, s]
        return (grad * g,)

    return nd.custom_op(np.array(-loglik), (log_probs,), vjp)


def kl_divergence(p: np.ndarray, q: np.ndarray, axis: int = -1) -> np.ndarray:
    """KL(p || q) for plain probability arrays; 0 log 0 counts as 0."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=axis)


def distillation_teacher(log_probs: Sequence, temperature: float = 8.0) -> np.ndarray:
    """Mean of the tempered stream distributions, as a constant."""
    soft = [nd.log_softmax_axis(nd.as_diff(lp).value / temperature, axis=1).value for lp in log_probs]
    return np.mean([np.exp(s) for s in soft], axis=0)


def kl_distillation(
    log_probs: Sequence,
    temperature: float = 8.0,
    direction: str = "teacher_student",
    teacher: np.ndarray | None = None,
) -> DiffArray:
    """Sum over streams of KL against the detached ensemble, frame-averaged, times tau^2.

    ``teacher`` overrides the ensemble with fixed probabilities; gradient
    checks use it to hold the stop-gradient target still while perturbing.
    """
    if len(log_probs) < 2:
        raise ValueError("distillation needs at least two streams")
    log_probs = [nd.as_diff(lp) for lp in log_probs]
    shape = log_probs[0].shape
    if any(lp.shape != shape for lp in log_probs):
        raise ShapeError(f"stream shapes differ: {[lp.shape for lp in log_probs]}")
    soft = [nd.log_softmax_axis(lp * (1.0 / temperature), axis=1) for lp in log_probs]
    if teacher is None:
        teacher = np.mean([np.exp(s.value) for s in soft], axis=0)
    elif teacher.shape != shape:
        raise ShapeError(f"teacher shape {teacher.shape} does not match streams {shape}")
    with np.errstate(divide="ignore"):
        log_teacher = np.log(teacher)
    safe_log_teacher = np.where(teacher > 0, log_teacher, 0.0)
    frames = shape[0]
    total = None
    for s in soft:
        if direction == "teacher_student":
            neg_entropy = float((teacher * safe_log_teacher).sum())
            term = neg_entropy - (s * teacher).sum()
        elif direction == "student_teacher":
            student = nd.exp(s)
            term = (student * (s - np.where(teacher > 0, log_teacher, -745.0))).sum()
        else:
            raise ValueError(f"unknown KL direction {direction!r}")
        total = term if total is None else total + term
    return total * (temperature**2 / frames)


@dataclass
class LossBreakdown:
    ctc: dict[str, DiffArray]
    distill: DiffArray | None
    total: DiffArray

    def values(self) -> dict[str, float]:
        out = {f"ctc_{k}": v.item() for k, v in self.ctc.items()}
        out["distill"] = self.distill.item() if self.distill is not None else 0.0
        out["total"] = self.total.item()
        return out


def total_loss(
    logits: dict[str, DiffArray],
    targets: Sequence[int],
    distill_weight: float = 1.0,
    temperature: float = 8.0,
    direction: str = "teacher_student",
    teacher: np.ndarray | None = None,
) -> LossBreakdown:
    log_probs = {name: nd.log_softmax_axis(z, axis=1) for name, z in logits.items()}
    ctc = {name: ctc_loss(lp, targets) for name, lp in log_probs.items()}
    total = None
    for term in ctc.values():
        total = term if total is None else total + term
    distill = None
    if distill_weight != 0.0:
        if len(log_probs) < 2:
            raise ValueError("distillation is undefined for a single decoding stream; set distill_weight=0")
        distill = kl_distillation(list(log_probs.values()), temperature, direction, teacher)
        total = total + distill * distill_weight
    return LossBreakdown(ctc, distill, total)
