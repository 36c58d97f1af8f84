from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from errors import FeatureArchiveError, InputValidationError

MAGIC = b"FEATv1"
_U32 = struct.Struct("<I")
_FLOAT = np.dtype("<f4")


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    utterance_id: str
    frames: np.ndarray
    frame_shift_seconds: float = 0.01

    def __post_init__(self) -> None:
        frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if frames.ndim != 2:
            raise InputValidationError(f"{self.utterance_id}: features must be a T x D matrix, got shape {frames.shape}")
        if frames.shape[0] < 1 or frames.shape[1] < 1:
            raise InputValidationError(f"{self.utterance_id}: feature matrix is empty ({frames.shape})")
        if not np.isfinite(frames).all():
            raise InputValidationError(f"{self.utterance_id}: feature matrix has non-finite values")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])

    @property
    def seconds(self) -> float:
        return self.num_frames * self.frame_shift_seconds

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (
            self.utterance_id == other.utterance_id
            and self.frame_shift_seconds == other.frame_shift_seconds
            and np.array_equal(self.frames, other.frames)
        )

    __hash__ = None  # type: ignore[assignment]


def write_feature_archive(features: Iterable[FeatureMatrix], path: str | Path) -> int:
    """Writes FEATv1: magic, then per utterance id length, UTF-8 id, T, D (uint32 LE) and T*D float32 LE."""
    count = 0
    with Path(path).open("wb") as handle:
        handle.write(MAGIC)
        for item in features:
            encoded = item.utterance_id.encode("utf-8")
            handle.write(_U32.pack(len(encoded)))
            handle.write(encoded)
            handle.write(_U32.pack(item.num_frames))
            handle.write(_U32.pack(item.dim))
            handle.write(item.frames.astype(_FLOAT, copy=False).tobytes(order="C"))
            count += 1
    return count


def _read_exact(handle, size: int, what: str, path: Path) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise FeatureArchiveError(f"{path}: truncated archive while reading {what}")
    return data


def read_feature_archive(path: str | Path, frame_shift_seconds: float = 0.01) -> list[FeatureMatrix]:
    path = Path(path)
    items: list[FeatureMatrix] = []
    seen: set[str] = set()
    with path.open("rb") as handle:
        if handle.read(len(MAGIC)) != MAGIC:
            raise FeatureArchiveError(f"{path}: missing FEATv1 magic")
        while True:
            head = handle.read(_U32.size)
            if not head:
                break
            if len(head) != _U32.size:
                raise FeatureArchiveError(f"{path}: truncated archive while reading id length")
            (id_len,) = _U32.unpack(head)
            try:
                utterance_id = _read_exact(handle, id_len, "utterance id", path).decode("utf-8")
            except UnicodeDecodeError:
                raise FeatureArchiveError(f"{path}: utterance id is not valid UTF-8") from None
            (num_frames,) = _U32.unpack(_read_exact(handle, _U32.size, "frame count", path))
            (dim,) = _U32.unpack(_read_exact(handle, _U32.size, "dimension", path))
            payload = _read_exact(handle, num_frames * dim * _FLOAT.itemsize, f"frames of {utterance_id}", path)
            if utterance_id in seen:
                raise FeatureArchiveError(f"{path}: duplicate utterance id {utterance_id!r}")
            seen.add(utterance_id)
            frames = np.frombuffer(payload, dtype=_FLOAT).reshape(num_frames, dim)
            try:
                items.append(FeatureMatrix(utterance_id, frames, frame_shift_seconds))
            except InputValidationError as exc:
                raise FeatureArchiveError(f"{path}: {exc}") from None
    return items
