"""Keypoint datasets, gloss vocabularies and checkpoints on disk.

Dataset file (little-endian throughout)::

    header   magic  8s   b"STARKKP\\0"
             version u32  (currently 1)
             points  u32  P
             dims    u32  d (always 3: x, y, confidence)
             count   u32  number of records
             layout  u16 length + UTF-8 name
    record   size    u32  byte length of the rest of the record
             id      u16 length + UTF-8
             frames  u32  T
             points  u32  P (must equal the header)
             width   f64, height f64   source frame size in pixels
             glosses u32 L, then L x u32 gloss ids
             coords  T*P*3 x f32, row-major (frame, point, channel)

Checkpoint file: magic ``b"STARKCK\\0"``, a u64 header length, a UTF-8 JSON
header, then the raw float64 little-endian bytes of every named array in
header order.  The JSON header lists ``[name, shape, byte_offset]`` for each
array plus free-form metadata; nothing time-dependent is written, so saving
the same state twice produces identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DATASET_MAGIC = b"STARKKP\0"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"STARKCK\0"


class DatasetFormatError(ValueError):
    """A dataset file is malformed; ``record`` is the failing record index."""

    def __init__(self, message: str, record: int | None = None):
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)
        self.record = record


class DimensionMismatchError(DatasetFormatError):
    pass


class VocabularyError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


@dataclass
class KeypointSample:
    """One sign video: ``frames`` is T x P x 3 (x px, y px, confidence)."""

    id: str
    frames: np.ndarray
    glosses: tuple[int, ...]
    width: float
    height: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.glosses = tuple(int(g) for g in self.glosses)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"sample {self.id}: frames must be T x P x 3, got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError(f"sample {self.id}: needs at least one frame")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_points(self) -> int:
        return self.frames.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, KeypointSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.glosses == other.glosses
            and self.width == other.width
            and self.height == other.height
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )


class GlossVocabulary:
    """Gloss strings with ids ``1..N``; id 0 is the CTC blank."""

    blank = 0

    def __init__(self, glosses: Iterable[str] = ()):
        self.glosses: tuple[str, ...] = tuple(glosses)
        self._ids: dict[str, int] = {}
        for i, gloss in enumerate(self.glosses, 1):
            if not gloss or gloss != gloss.strip():
                raise VocabularyError(f"invalid gloss at line {i}: {gloss!r}")
            if gloss in self._ids:
                raise VocabularyError(f"duplicate gloss {gloss!r} at line {i}")
            self._ids[gloss] = i

    def __len__(self) -> int:
        return len(self.glosses)

    def __eq__(self, other) -> bool:
        return isinstance(other, GlossVocabulary) and self.glosses == other.glosses

    def __repr__(self) -> str:
        return f"GlossVocabulary({len(self)} glosses)"

    @property
    def num_classes(self) -> int:
        """Classifier width: every gloss plus the blank."""
        return len(self) + 1

    def id_of(self, gloss: str) -> int:
        try:
            return self._ids[gloss]
        except KeyError:
            raise VocabularyError(f"unknown gloss {gloss!r}") from None

    def gloss_of(self, idx: int) -> str:
        if not 1 <= idx <= len(self):
            raise VocabularyError(f"gloss id {idx} outside 1..{len(self)}")
        return self.glosses[idx - 1]

    def encode(self, glosses: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id_of(g) for g in glosses)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.gloss_of(i) for i in ids)


def load_vocabulary(path: str | Path) -> GlossVocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return GlossVocabulary(lines)


def save_vocabulary(vocab: GlossVocabulary, path: str | Path) -> None:
    text = "".join(g + "\n" for g in vocab.glosses)
    Path(path).write_text(text, encoding="utf-8")


# ----------------------------------------------------------------------------
# dataset files

_HEADER = struct.Struct("<8sIIII")


def save_dataset(samples: Sequence[KeypointSample], path: str | Path, layout_name: str = "paper79") -> None:
    points = {s.num_points for s in samples}
    if len(points) > 1:
        raise DimensionMismatchError(f"samples disagree on point count: {sorted(points)}")
    num_points = points.pop() if points else 0
    name = layout_name.encode("utf-8")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, num_points, 3, len(samples)))
    buf.write(struct.pack("<H", len(name)) + name)
    for s in samples:
        ident = s.id.encode("utf-8")
        body = b"".join(
            [
                struct.pack("<H", len(ident)),
                ident,
                struct.pack("<IIddI", s.num_frames, s.num_points, s.width, s.height, len(s.glosses)),
                np.asarray(s.glosses, dtype="<u4").tobytes(),
                np.asarray(s.frames, dtype="<f4").tobytes(order="C"),
            ]
        )
        buf.write(struct.pack("<I", len(body)))
        buf.write(body)
    Path(path).write_bytes(buf.getvalue())


@dataclass(frozen=True)
class DatasetHeader:
    version: int
    num_points: int
    dims: int
    count: int
    layout: str


def _read_header(data: bytes) -> tuple[DatasetHeader, int]:
    if len(data) < _HEADER.size + 2:
        raise DatasetFormatError("file too short for a header")
    magic, version, points, dims, count = _HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unknown format version {version}")
    if dims != 3:
        raise DimensionMismatchError(f"header declares d={dims}, expected 3")
    pos = _HEADER.size
    (n,) = struct.unpack_from("<H", data, pos)
    layout = data[pos + 2 : pos + 2 + n].decode("utf-8")
    return DatasetHeader(version, points, dims, count, layout), pos + 2 + n


def read_dataset_header(path: str | Path) -> DatasetHeader:
    return _read_header(Path(path).read_bytes())[0]


def load_dataset(path: str | Path, num_points: int | None = None) -> list[KeypointSample]:
    """Read every record in file order.

    ``num_points`` (the layout's point count) is checked against the header
    and each record when given.
    """
    data = Path(path).read_bytes()
    header, pos = _read_header(data)
    if num_points is not None and header.count and header.num_points != num_points:
        raise DimensionMismatchError(f"file has P={header.num_points}, layout expects P={num_points}")
    samples = []
    for i in range(header.count):
        try:
            (size,) = struct.unpack_from("<I", data, pos)
            end = pos + 4 + size
            if end > len(data):
                raise DatasetFormatError("truncated record", i)
            rec = data[pos + 4 : end]
            (n,) = struct.unpack_from("<H", rec, 0)
            ident = rec[2 : 2 + n].decode("utf-8")
            off = 2 + n
            frames, points, width, height, length = struct.unpack_from("<IIddI", rec, off)
            off += struct.calcsize("<IIddI")
        except struct.error:
            raise DatasetFormatError("truncated record", i) from None
        if points != header.num_points or (num_points is not None and points != num_points):
            raise DimensionMismatchError(
                f"record claims P={points}, expected {num_points if num_points is not None else header.num_points}",
                i,
            )
        expected = off + 4 * length + 4 * frames * points * 3
        if expected != len(rec):
            raise DatasetFormatError(f"record size {len(rec)} does not match its dimensions ({expected})", i)
        if frames < 1 or width <= 0 or height <= 0:
            raise DatasetFormatError("non-positive frame count or frame size", i)
        glosses = np.frombuffer(rec, dtype="<u4", count=length, offset=off)
        if length and glosses.min() == 0:
            raise DatasetFormatError("gloss id 0 is reserved for the blank", i)
        off += 4 * length
        coords = np.frombuffer(rec, dtype="<f4", count=frames * points * 3, offset=off)
        samples.append(
            KeypointSample(
                id=ident,
                frames=coords.reshape(frames, points, 3).astype(np.float32),
                glosses=tuple(int(g) for g in glosses),
                width=width,
                height=height,
            )
        )
        pos = end
    if pos != len(data):
        raise DatasetFormatError(f"{len(data) - pos} trailing bytes after {header.count} records")
    return samples


def validate_targets(samples: Iterable[KeypointSample], vocab: GlossVocabulary) -> None:
    for s in samples:
        bad = [g for g in s.glosses if not 1 <= g <= len(vocab)]
        if bad:
            raise VocabularyError(f"sample {s.id}: gloss ids {bad} outside 1..{len(vocab)}")


# ----------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Everything needed to resume training or run evaluation."""

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)


_GROUPS = ("params", "buffers", "adam_m", "adam_v")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    entries, blobs, offset = [], [], 0
    for group in _GROUPS:
        for name, arr in getattr(ckpt, group).items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            entries.append([f"{group}/{name}", list(arr.shape), offset])
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "arrays": entries,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "fingerprint": ckpt.fingerprint,
        "meta": ckpt.meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path: str | Path, fingerprint: str | None = None) -> Checkpoint:
    """Read a checkpoint; a ``fingerprint`` that differs from the stored one is an error."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC or len(data) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<Q", data, 8)
    try:
        header = json.loads(data[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if fingerprint is not None and header["fingerprint"] != fingerprint:
        raise FingerprintMismatchError(
            f"checkpoint was built for configuration {header['fingerprint']}, not {fingerprint}"
        )
    base = 16 + n
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in _GROUPS}
    for full, shape, offset in header["arrays"]:
        group, name = full.split("/", 1)
        count = int(np.prod(shape)) if shape else 1
        start = base + offset
        if start + 8 * count > len(data):
            raise CheckpointError(f"{path}: array {full} is truncated")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(shape)
        groups[group][name] = arr.astype(np.float64)
    return Checkpoint(
        epoch=header["epoch"],
        step=header["step"],
        rng_state=header["rng_state"],
        fingerprint=header["fingerprint"],
        meta=header["meta"],
        **groups,
    )
