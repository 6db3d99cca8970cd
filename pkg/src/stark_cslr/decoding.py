"""CTC decoding (greedy and prefix beam search), ensembling and WER."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

BLANK = 0


@dataclass(frozen=True)
class Hypothesis:
    labels: tuple[int, ...]
    score: float


def collapse(path: Iterable[int]) -> tuple[int, ...]:
    """Merge adjacent repeats, then drop blanks."""
    out, prev = [], None
    for label in path:
        label = int(label)
        if label != prev and label != BLANK:
            out.append(label)
        prev = label
    return tuple(out)


def greedy_decode(log_probs: np.ndarray) -> Hypothesis:
    log_probs = np.asarray(log_probs)
    path = log_probs.argmax(axis=1)
    score = float(log_probs[np.arange(len(path)), path].sum())
    return Hypothesis(collapse(path), score)


def beam_decode(log_probs: np.ndarray, width: int = 5) -> Hypothesis:
    """CTC prefix beam search.

    Each prefix tracks the log-mass of alignments ending in blank and in its
    last label; the ``width`` heaviest prefixes survive every frame.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    log_probs = np.asarray(log_probs, dtype=np.float64)
    neg = -np.inf
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, neg)}
    classes = log_probs.shape[1]
    for frame in log_probs:
        nxt: dict[tuple[int, ...], list[float]] = {}

        def bucket(prefix):
            entry = nxt.get(prefix)
            if entry is None:
                entry = nxt[prefix] = [neg, neg]
            return entry

        for prefix, (p_b, p_nb) in beams.items():
            total = np.logaddexp(p_b, p_nb)
            stay = bucket(prefix)
            stay[0] = np.logaddexp(stay[0], total + frame[BLANK])
            last = prefix[-1] if prefix else None
            for c in range(1, classes):
                lp = frame[c]
                if c == last:
                    # repeat without a blank stays on the same prefix
                    stay[1] = np.logaddexp(stay[1], p_nb + lp)
                    ext = bucket(prefix + (c,))
                    ext[1] = np.logaddexp(ext[1], p_b + lp)
                else:
                    ext = bucket(prefix + (c,))
                    ext[1] = np.logaddexp(ext[1], total + lp)
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), len(kv[0]), kv[0]))
        beams = {prefix: (b, nb) for prefix, (b, nb) in ranked[:width]}
    best, (p_b, p_nb) = next(iter(beams.items()))
    return Hypothesis(best, float(np.logaddexp(p_b, p_nb)))


def ensemble_probs(stream_logits: Sequence[np.ndarray]) -> np.ndarray:
    """Log of the per-frame mean of the streams' softmax distributions."""
    stream_logits = [np.asarray(z, dtype=np.float64) for z in stream_logits]
    if not stream_logits:
        raise ValueError("no streams to ensemble")
    shape = stream_logits[0].shape
    if any(z.shape != shape for z in stream_logits):
        raise ValueError(f"stream shapes differ: {[z.shape for z in stream_logits]}")
    probs = []
    for z in stream_logits:
        e = np.exp(z - z.max(axis=1, keepdims=True))
        probs.append(e / e.sum(axis=1, keepdims=True))
    with np.errstate(divide="ignore"):
        return np.log(np.mean(probs, axis=0))


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("WER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Total edits over total reference tokens."""
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis counts differ")
    words = sum(len(r) for r in refs)
    if words == 0:
        raise ValueError("corpus WER needs at least one reference token")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / words
