"""Synthetic sign corpus on the 79-point layout.

Every gloss owns a smooth template: both wrists trace their own sinusoidal
paths, hand shape (orientation, curl, spread) drifts smoothly, the head
sways and nods, the torso leans and shrugs, and the mouth opens and closes.
Each of the four keypoint streams therefore carries gloss identity.  A sample strings its glosses' templates together,
each played at a jittered speed, and adds Gaussian pixel noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dataio import GlossVocabulary, KeypointSample
from .prep import (
    FACE, L_ELBOW, L_EYE, L_EAR, L_SHOULDER, L_WRIST, LEFT_HAND, NOSE,
    R_ELBOW, R_EAR, R_EYE, R_SHOULDER, R_WRIST, RIGHT_HAND,
)


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 10
    train_samples: int = 200
    dev_samples: int = 40
    glosses_per_sample: tuple[int, int] = (2, 4)
    frames_per_gloss: tuple[int, int] = (10, 14)
    speed_jitter: tuple[float, float] = (0.8, 1.25)
    noise: float = 2.0
    seed: int = 0
    width: float = 512.0
    height: float = 512.0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise SynthSpecError("vocab_size must be at least 2")
        for name in ("glosses_per_sample", "frames_per_gloss", "speed_jitter"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise SynthSpecError(f"{name} must be a non-empty positive range, got {(lo, hi)}")
        if self.train_samples < 0 or self.dev_samples < 0 or self.noise < 0:
            raise SynthSpecError("sample counts and noise must be non-negative")
        if self.width <= 0 or self.height <= 0:
            raise SynthSpecError("frame size must be positive")


def parse_synth_spec(text: str) -> SynthSpec:
    kinds = {f.name: str(f.type) for f in fields(SynthSpec)}
    kw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = (s.strip() for s in line.partition("="))
        if not sep or key not in kinds:
            raise SynthSpecError(f"line {lineno}: unknown or malformed entry {line!r}")
        kind = kinds[key]
        try:
            if kind.startswith("tuple[int"):
                kw[key] = tuple(int(v) for v in raw.split(","))
            elif kind.startswith("tuple[float"):
                kw[key] = tuple(float(v) for v in raw.split(","))
            elif kind == "int":
                kw[key] = int(raw)
            else:
                kw[key] = float(raw)
        except ValueError:
            raise SynthSpecError(f"line {lineno}: bad value {raw!r} for {key}") from None
        if kind.startswith("tuple") and len(kw[key]) != 2:
            raise SynthSpecError(f"line {lineno}: {key} needs two comma-separated values")
    return SynthSpec(**kw)


def load_synth_spec(path: str | Path) -> SynthSpec:
    return parse_synth_spec(Path(path).read_text(encoding="utf-8"))


# ----------------------------------------------------------------------------
# skeleton geometry (pixels on a 512 x 512 canvas, scaled to the frame)

_CANVAS = 512.0
# finger base angles relative to the hand axis, and bone lengths
_FINGER_ANGLES = np.array([-0.9, -0.35, 0.0, 0.3, 0.6])
_BONES = np.array([[14, 12, 10, 8], [22, 14, 10, 8], [22, 16, 12, 9], [20, 14, 10, 8], [17, 11, 8, 7]], dtype=float)


def _face_offsets() -> np.ndarray:
    ang = np.linspace(math.pi * 0.1, math.pi * 0.9, 5)
    jaw = np.stack([-42 * np.cos(ang), 10 + 40 * np.sin(ang)], axis=1)
    brows = np.array([[-30, -22], [-20, -26], [-8, -23], [8, -23], [20, -26], [30, -22]], dtype=float)
    nose = np.array([[0, -12], [0, 0], [0, 8]], dtype=float)
    eyes = np.array([[-28, -12], [-12, -12], [12, -12], [28, -12]], dtype=float)
    mouth = np.array([[-16, 26], [0, 22], [16, 26], [0, 32], [-9, 26], [0, 25], [9, 26], [0, 28]], dtype=float)
    return np.concatenate([jaw, brows, nose, eyes, mouth])


_FACE_OFF = _face_offsets()
_MOUTH = np.arange(18, 26)


@dataclass(frozen=True)
class _HandTrack:
    active: bool
    centre: tuple[float, float]
    amp: tuple[float, float]
    cycles: tuple[float, float]
    phase: tuple[float, float]
    angle: float
    turn: float
    curl: float
    curl_rate: float
    spread: float


@dataclass(frozen=True)
class _Sway:
    """Smooth 2D offset path: one sinusoid per axis."""

    amp: tuple[float, float]
    cycles: tuple[float, float]
    phase: tuple[float, float]

    def at(self, u: np.ndarray) -> np.ndarray:
        return np.stack(
            [self.amp[k] * np.sin(2 * math.pi * self.cycles[k] * u + self.phase[k]) for k in range(2)], axis=1
        )


@dataclass(frozen=True)
class GlossTemplate:
    length: int
    left: _HandTrack
    right: _HandTrack
    head: _Sway
    torso: _Sway
    shrug: float
    mouth: float
    mouth_cycles: float


def _hand_track(rng: np.random.Generator, side: int, active: bool) -> _HandTrack:
    return _HandTrack(
        active=active,
        centre=(256.0 + side * rng.uniform(20, 130), rng.uniform(230, 400)),
        amp=(rng.uniform(30, 90), rng.uniform(30, 90)),
        cycles=(rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5)),
        phase=(rng.uniform(0, 2 * math.pi), rng.uniform(0, 2 * math.pi)),
        angle=rng.uniform(-1.2, 1.2),
        turn=rng.uniform(-1.0, 1.0),
        curl=rng.uniform(0.3, 1.0),
        curl_rate=rng.uniform(-0.3, 0.3),
        spread=rng.uniform(0.6, 1.4),
    )


def _sway(rng: np.random.Generator, lo: float, hi: float) -> _Sway:
    return _Sway(
        amp=(rng.uniform(lo, hi) * rng.choice([-1, 1]), rng.uniform(lo, hi) * rng.choice([-1, 1])),
        cycles=(rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5)),
        phase=(rng.uniform(0, 2 * math.pi), rng.uniform(0, 2 * math.pi)),
    )


def make_templates(spec: SynthSpec) -> list[GlossTemplate]:
    rng = np.random.default_rng([spec.seed, 0])
    lo, hi = spec.frames_per_gloss
    out = []
    for _ in range(spec.vocab_size):
        length = int(rng.integers(lo, hi + 1))
        left = _hand_track(rng, +1, bool(rng.random() < 0.6))
        right = _hand_track(rng, -1, True)
        head, torso = _sway(rng, 20, 50), _sway(rng, 15, 40)
        shrug = rng.uniform(-30, 30)
        out.append(GlossTemplate(length, left, right, head, torso, shrug, rng.uniform(0, 10), rng.uniform(0.5, 2.0)))
    return out


def _hand(wrist: np.ndarray, angle: np.ndarray, curl: np.ndarray, spread: float, side: int) -> np.ndarray:
    """21 hand points per frame from wrist position and pose scalars."""
    n = wrist.shape[0]
    pts = np.empty((n, 21, 2))
    pts[:, 0] = wrist
    for f in range(5):
        direction = angle - math.pi / 2 + side * _FINGER_ANGLES[f] * spread
        pos = wrist.copy()
        for j in range(4):
            bend = direction + side * curl * 0.5 * j
            pos = pos + _BONES[f, j] * np.stack([np.cos(bend), np.sin(bend)], axis=1)
            pts[:, 1 + 4 * f + j] = pos
    return pts


def _rest_track(side: int) -> np.ndarray:
    return np.array([256.0 + side * 70.0, 460.0])


def render_template(tpl: GlossTemplate, frames: int) -> np.ndarray:
    """``frames x 79 x 2`` pixel coordinates on the 512 canvas."""
    u = np.linspace(0.0, 1.0, frames) if frames > 1 else np.zeros(1)
    pts = np.zeros((frames, 79, 2))
    torso = tpl.torso.at(u)
    head = np.array([256.0, 150.0]) + torso + tpl.head.at(u)
    pts[:, NOSE] = head
    pts[:, L_EYE] = head + [20, -12]
    pts[:, R_EYE] = head + [-20, -12]
    pts[:, L_EAR] = head + [40, -4]
    pts[:, R_EAR] = head + [-40, -4]
    # shoulders follow the torso; the shrug lifts one and drops the other over the gloss
    lift = tpl.shrug * np.sin(math.pi * u)[:, None] * np.array([0.0, 1.0])
    pts[:, L_SHOULDER] = np.array([346.0, 260.0]) + torso - lift
    pts[:, R_SHOULDER] = np.array([166.0, 260.0]) + torso + lift
    face = head[:, None, :] + _FACE_OFF[None]
    opening = tpl.mouth * (0.5 + 0.5 * np.sin(2 * math.pi * tpl.mouth_cycles * u))
    face[:, _MOUTH, 1] += opening[:, None] * np.sign(_FACE_OFF[_MOUTH, 1] - 26 + 1e-9)
    pts[:, list(FACE)] = face

    for track, side, wrist_i, elbow_i, shoulder_i, hand in (
        (tpl.left, +1, L_WRIST, L_ELBOW, L_SHOULDER, LEFT_HAND),
        (tpl.right, -1, R_WRIST, R_ELBOW, R_SHOULDER, RIGHT_HAND),
    ):
        if track.active:
            wrist = np.stack(
                [
                    track.centre[k] + track.amp[k] * np.sin(2 * math.pi * track.cycles[k] * u + track.phase[k])
                    for k in range(2)
                ],
                axis=1,
            )
            angle = track.angle + track.turn * u
            curl = np.clip(track.curl + track.curl_rate * u, 0.0, 1.2)
            spread = track.spread
        else:
            wrist = np.tile(_rest_track(side), (frames, 1))
            angle = np.zeros(frames)
            curl = np.full(frames, 0.2)
            spread = 1.0
        shoulder = pts[:, shoulder_i]
        mid = 0.5 * (shoulder + wrist)
        pts[:, elbow_i] = mid + [side * 45.0, 20.0]
        pts[:, wrist_i] = wrist
        pts[:, list(hand)] = _hand(wrist, angle, curl, spread, side)
    return pts


_CONFIDENCE = np.full(79, 0.95)
_CONFIDENCE[list(FACE)] = 0.9
_CONFIDENCE[list(LEFT_HAND) + list(RIGHT_HAND)] = 0.8


def _render_sample(templates, glosses, rng, spec: SynthSpec) -> np.ndarray:
    pieces = []
    for g in glosses:
        tpl = templates[g - 1]
        jitter = rng.uniform(*spec.speed_jitter)
        pieces.append(render_template(tpl, max(1, int(np.rint(tpl.length * jitter)))))
    xy = np.concatenate(pieces)
    if spec.noise > 0:
        xy = xy + rng.normal(0.0, spec.noise, xy.shape)
    xy = xy * np.array([spec.width, spec.height]) / _CANVAS
    xy[..., 0] = np.clip(xy[..., 0], 0.0, spec.width)
    xy[..., 1] = np.clip(xy[..., 1], 0.0, spec.height)
    conf = np.broadcast_to(_CONFIDENCE, xy.shape[:2])[..., None]
    return np.concatenate([xy, conf], axis=2).astype(np.float32)


def _split(templates, spec: SynthSpec, count: int, stream: int, prefix: str) -> list[KeypointSample]:
    rng = np.random.default_rng([spec.seed, stream])
    lo, hi = spec.glosses_per_sample
    samples = []
    for i in range(count):
        length = int(rng.integers(lo, hi + 1))
        glosses = tuple(int(g) for g in rng.integers(1, spec.vocab_size + 1, size=length))
        frames = _render_sample(templates, glosses, rng, spec)
        samples.append(KeypointSample(f"{prefix}_{i:04d}", frames, glosses, spec.width, spec.height))
    return samples


def synthesize_dataset(spec: SynthSpec) -> tuple[list[KeypointSample], list[KeypointSample], GlossVocabulary]:
    """Deterministic (train, dev, vocabulary) for ``spec``."""
    templates = make_templates(spec)
    vocab = GlossVocabulary(f"GLOSS{i:03d}" for i in range(1, spec.vocab_size + 1))
    train = _split(templates, spec, spec.train_samples, 1, "train")
    dev = _split(templates, spec, spec.dev_samples, 2, "dev")
    return train, dev, vocab


def render_gloss_sequence(spec: SynthSpec, glosses, seed: int = 0) -> np.ndarray:
    """Frames for an explicit gloss sequence (handy for tests and demos)."""
    return _render_sample(make_templates(spec), tuple(glosses), np.random.default_rng(seed), spec)
