"""Keypoint preprocessing: normalisation, augmentation and stream splitting."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataio import KeypointSample

STREAM_NAMES = ("body", "left", "right", "face")

# Source indices into the 133-point COCO-WholeBody skeleton, in the order the
# 79 selected points are stored: 11 upper-body points, 26 face points, then
# the 21-point left and right hands.
_FACE68 = (0, 4, 8, 12, 16, 17, 19, 21, 22, 24, 26, 27, 30, 33, 36, 39, 42, 45,
           48, 51, 54, 57, 60, 62, 64, 66)
WHOLEBODY_SELECTION = (
    tuple(range(11))
    + tuple(23 + i for i in _FACE68)
    + tuple(range(91, 112))
    + tuple(range(112, 133))
)

# positions inside the 79-point array
NOSE, L_EYE, R_EYE, L_EAR, R_EAR, L_SHOULDER, R_SHOULDER = range(7)
L_ELBOW, R_ELBOW, L_WRIST, R_WRIST = range(7, 11)
FACE = tuple(range(11, 37))
LEFT_HAND = tuple(range(37, 58))
RIGHT_HAND = tuple(range(58, 79))


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class StreamLayout:
    """Four disjoint keypoint index lists over ``range(num_points)``."""

    name: str
    num_points: int
    body: tuple[int, ...]
    left: tuple[int, ...]
    right: tuple[int, ...]
    face: tuple[int, ...]

    def __post_init__(self):
        seen: set[int] = set()
        for stream, idx in self.streams().items():
            for i in idx:
                if not 0 <= i < self.num_points:
                    raise LayoutError(f"{stream}: index {i} outside [0, {self.num_points})")
                if i in seen:
                    raise LayoutError(f"{stream}: index {i} used by more than one stream")
                seen.add(i)

    def streams(self) -> dict[str, tuple[int, ...]]:
        return {name: getattr(self, name) for name in STREAM_NAMES}

    def sizes(self) -> dict[str, int]:
        return {name: len(idx) for name, idx in self.streams().items()}


PAPER_LAYOUT = StreamLayout(
    name="paper79",
    num_points=79,
    body=(NOSE, L_EAR, R_EAR, L_SHOULDER, R_SHOULDER),
    left=(L_EYE, L_ELBOW, L_WRIST) + LEFT_HAND,
    right=(R_EYE, R_ELBOW, R_WRIST) + RIGHT_HAND,
    face=FACE,
)

BUILTIN_LAYOUTS = {PAPER_LAYOUT.name: PAPER_LAYOUT}


def parse_layout(text: str) -> StreamLayout:
    """Parse the layout text format::

        name paper79
        points 79
        [body]
        0 3 4 5 6
        [left]
        ...
    """
    name, points, current = None, None, None
    lists: dict[str, list[int]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in STREAM_NAMES:
                raise LayoutError(f"line {lineno}: unknown stream {current!r}")
            if current in lists:
                raise LayoutError(f"line {lineno}: stream {current!r} listed twice")
            lists[current] = []
            continue
        key, _, rest = line.partition(" ")
        if current is None and key == "name":
            name = rest.strip()
        elif current is None and key == "points":
            points = int(rest)
        elif current is not None:
            try:
                lists[current].extend(int(tok) for tok in line.split())
            except ValueError:
                raise LayoutError(f"line {lineno}: expected integers, got {line!r}") from None
        else:
            raise LayoutError(f"line {lineno}: unexpected {line!r}")
    if name is None or points is None:
        raise LayoutError("layout needs 'name' and 'points' lines")
    return StreamLayout(name, points, *(tuple(lists.get(s, ())) for s in STREAM_NAMES))


def format_layout(layout: StreamLayout) -> str:
    out = [f"name {layout.name}", f"points {layout.num_points}"]
    for stream, idx in layout.streams().items():
        out.append(f"[{stream}]")
        out.append(" ".join(str(i) for i in idx))
    return "\n".join(out) + "\n"


def load_layout(spec: str | Path) -> StreamLayout:
    """A built-in layout name or a path to a layout file."""
    if str(spec) in BUILTIN_LAYOUTS:
        return BUILTIN_LAYOUTS[str(spec)]
    path = Path(spec)
    if not path.exists():
        raise LayoutError(f"no built-in layout or file named {spec!r}")
    return parse_layout(path.read_text(encoding="utf-8"))


@dataclass(frozen=True)
class AugmentConfig:
    speed_range: tuple[float, float] = (0.5, 1.5)
    rotation_range: tuple[float, float] = (-15.0, 15.0)
    speed: bool = True
    rotate: bool = True
    seed: int = 0


# ----------------------------------------------------------------------------
# pure transforms

NORMALIZED_SLACK = 1e-6


def normalize_coords(sample: KeypointSample) -> KeypointSample:
    """Map pixel coordinates (origin top-left) onto [-1, 1]."""
    if sample.width <= 0 or sample.height <= 0:
        raise ValueError(f"sample {sample.id}: frame size must be positive, got {sample.width}x{sample.height}")
    frames = np.array(sample.frames, dtype=np.float64)
    frames[..., 0] = 2.0 * frames[..., 0] / sample.width - 1.0
    frames[..., 1] = 2.0 * frames[..., 1] / sample.height - 1.0
    return replace(sample, frames=frames)


def check_normalized(frames: np.ndarray, eps: float = NORMALIZED_SLACK) -> None:
    """Reject coordinates outside [-1-eps, 1+eps], e.g. raw pixels."""
    xy = frames[..., :2]
    if xy.size and (xy.min() < -1.0 - eps or xy.max() > 1.0 + eps):
        raise ValueError(
            f"coordinates span [{xy.min():.3g}, {xy.max():.3g}]; expected normalized values in [-1, 1]"
        )


def resample_indices(num_frames: int, factor: float) -> np.ndarray:
    """Source frame for each output frame under nearest-index resampling.

    Rounding is half-to-even, so T=10 at 0.5 gives [0, 2, 4, 7, 9].  A
    single-frame sequence is returned as is for every factor.
    """
    out = max(1, int(np.rint(num_frames * factor)))
    if out == 1 or num_frames == 1:
        return np.zeros(1, dtype=np.int64)
    return np.rint(np.arange(out) * (num_frames - 1) / (out - 1)).astype(np.int64)


def temporal_resample(frames: np.ndarray, factor: float, bounds=(0.5, 1.5)) -> np.ndarray:
    if bounds is not None and not bounds[0] <= factor <= bounds[1]:
        raise ValueError(f"speed factor {factor} outside [{bounds[0]}, {bounds[1]}]")
    if frames.shape[0] < 1:
        raise ValueError("cannot resample an empty sequence")
    return frames[resample_indices(frames.shape[0], factor)]


def random_rotation(frames: np.ndarray, theta: float, limit: float | None = 15.0) -> np.ndarray:
    """Rotate normalized (x, y) about the frame centre by ``theta`` degrees."""
    if limit is not None and abs(theta) > limit:
        raise ValueError(f"rotation {theta} deg outside [-{limit}, {limit}]")
    rad = math.radians(theta)
    c, s = math.cos(rad), math.sin(rad)
    out = np.array(frames, dtype=np.float64)
    x, y = frames[..., 0], frames[..., 1]
    out[..., 0] = x * c - y * s
    out[..., 1] = x * s + y * c
    return out


def split_streams(frames: np.ndarray, layout: StreamLayout) -> dict[str, np.ndarray]:
    if frames.ndim != 3 or frames.shape[1] != layout.num_points:
        raise LayoutError(f"frames {frames.shape} do not match layout {layout.name!r} with P={layout.num_points}")
    return {name: frames[:, list(idx), :].copy() for name, idx in layout.streams().items()}


# ----------------------------------------------------------------------------
# pipeline


def sample_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    """Independent, reproducible generator per (seed, sample, epoch)."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode("utf-8"))])


def draw_augmentation(config: AugmentConfig, sample_id: str, epoch: int) -> tuple[float, float]:
    """One speed factor and one rotation angle shared by the whole sample."""
    rng = sample_rng(config.seed, sample_id, epoch)
    factor = rng.uniform(*config.speed_range) if config.speed else 1.0
    theta = rng.uniform(*config.rotation_range) if config.rotate else 0.0
    return factor, theta


def prepare_sample(
    sample: KeypointSample,
    layout: StreamLayout,
    augment: AugmentConfig | None = None,
    epoch: int = 0,
) -> dict[str, np.ndarray]:
    """Normalise, optionally augment, and split into the four streams.

    ``augment=None`` is evaluation mode: speed factor 1 and no rotation.
    """
    frames = normalize_coords(sample).frames
    check_normalized(frames)
    if augment is not None:
        factor, theta = draw_augmentation(augment, sample.id, epoch)
        lo, hi = augment.speed_range
        frames = temporal_resample(frames, factor, bounds=(lo, hi))
        frames = random_rotation(frames, theta, limit=max(abs(a) for a in augment.rotation_range))
    return split_streams(frames, layout)
