"""On-disk data types: coordinates CSV, FMAT feature matrices, labels CSV."""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, NonFiniteError, TruncatedError

FMAT_MAGIC = b"PGCNFMAT"
_FMAT_HEADER = struct.Struct("<8sII")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@dataclass
class PatchCoordinateSet:
    """Patch grid positions in full-resolution pixels.

    ``entries`` holds ``(patch_id, slide_id, x, y)`` tuples.
    """

    entries: list[tuple[int, str, int, int]]
    patch_size: int = 256

    def __post_init__(self):
        self.entries = [(int(p), str(s), int(x), int(y)) for p, s, x, y in self.entries]
        ids = [e[0] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate patch_id in coordinate set")
        keys = {(s, x, y) for _, s, x, y in self.entries}
        if len(keys) != len(self.entries):
            raise FormatError("duplicate (slide_id, x, y) in coordinate set")
        for pid, _, x, y in self.entries:
            if x < 0 or y < 0 or x % self.patch_size or y % self.patch_size:
                raise FormatError(
                    f"patch {pid}: ({x}, {y}) is not on the {self.patch_size}px grid"
                )

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def patch_ids(self) -> np.ndarray:
        return np.array([e[0] for e in self.entries], dtype=np.int64)

    @property
    def slide_ids(self) -> list[str]:
        return [e[1] for e in self.entries]

    @property
    def xy(self) -> np.ndarray:
        return np.array([(e[2], e[3]) for e in self.entries], dtype=np.int64).reshape(-1, 2)


def write_coordinates(coords: PatchCoordinateSet, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patch_id", "slide_id", "x", "y"])
    w.writerows(coords.entries)
    atomic_write_text(path, buf.getvalue())


def read_coordinates(path, patch_size: int = 256) -> PatchCoordinateSet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["patch_id", "slide_id", "x", "y"]:
            raise FormatError(f"{path}: expected header patch_id,slide_id,x,y")
        try:
            entries = [
                (int(r["patch_id"]), r["slide_id"], int(r["x"]), int(r["y"])) for r in reader
            ]
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}: {exc}") from None
    return PatchCoordinateSet(entries, patch_size)


@dataclass
class FeatureMatrix:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise FormatError(f"feature matrix must be 2-D, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise NonFiniteError("feature matrix contains non-finite values")
        self.data = d

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def encode_feature_matrix(matrix: FeatureMatrix) -> bytes:
    payload = np.ascontiguousarray(matrix.data, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise NonFiniteError("values overflow 32-bit float")
    return _FMAT_HEADER.pack(FMAT_MAGIC, matrix.rows, matrix.cols) + payload.tobytes()


def decode_feature_matrix(buf: bytes, source: str = "<bytes>") -> FeatureMatrix:
    if len(buf) < _FMAT_HEADER.size:
        raise TruncatedError(f"{source}: file shorter than FMAT header")
    magic, rows, cols = _FMAT_HEADER.unpack_from(buf)
    if magic != FMAT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    n = rows * cols
    body = buf[_FMAT_HEADER.size:]
    if len(body) < 4 * n:
        raise TruncatedError(f"{source}: header claims {rows}x{cols} but payload is short")
    data = np.frombuffer(body, dtype="<f4", count=n).reshape(rows, cols)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{source}: payload contains non-finite values")
    return FeatureMatrix(data.astype(np.float32))


def write_feature_matrix(matrix: FeatureMatrix, path) -> None:
    atomic_write_bytes(path, encode_feature_matrix(matrix))


def read_feature_matrix(path) -> FeatureMatrix:
    return decode_feature_matrix(Path(path).read_bytes(), str(path))


@dataclass
class SurvivalLabel:
    patient_id: str
    time: float
    censored: bool
    bin: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.time >= 0:
            raise FormatError(f"patient {self.patient_id}: time must be >= 0, got {self.time}")
        self.censored = bool(self.censored)


def write_labels(labels: list[SurvivalLabel], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "time", "censored"])
    for lab in labels:
        w.writerow([lab.patient_id, repr(float(lab.time)), int(lab.censored)])
    atomic_write_text(path, buf.getvalue())


def read_labels(path) -> list[SurvivalLabel]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["patient_id", "time", "censored"]:
            raise FormatError(f"{path}: expected header patient_id,time,censored")
        out = []
        for r in reader:
            if r["censored"] not in ("0", "1"):
                raise FormatError(f"{path}: censored must be 0 or 1, got {r['censored']!r}")
            try:
                t = float(r["time"])
            except ValueError:
                raise FormatError(f"{path}: bad time {r['time']!r}") from None
            out.append(SurvivalLabel(r["patient_id"], t, r["censored"] == "1"))
    return out
