"""Readers and writers for images, distortion fields and minutia lists."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .field import DistortionField, MinutiaSet

DFLD_MAGIC = b"DFLD"
DFLD_VERSION = 1


def read_image(path) -> np.ndarray:
    """Load an 8-bit grayscale PNG or PGM as float64 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "P"):
            im = im.convert("L")
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    """Write a [0, 1] image as 8-bit PNG, or PGM when the suffix asks for it."""
    path = Path(path)
    im = Image.fromarray(to_uint8(image), mode="L")
    if path.suffix.lower() in (".pgm", ".pnm"):
        im.save(path, format="PPM")
    else:
        im.save(path, format="PNG", optimize=False)


def read_mask(path) -> np.ndarray:
    return read_image(path) >= 0.5


def write_mask(path, mask: np.ndarray) -> None:
    write_image(path, np.asarray(mask, dtype=np.float64))


def write_dfld(path, field: DistortionField) -> None:
    Path(path).write_bytes(dfld_bytes(field))


def dfld_bytes(field: DistortionField) -> bytes:
    header = DFLD_MAGIC + struct.pack("<IIII", DFLD_VERSION, field.grid_w, field.grid_h, field.block_size)
    return header + np.ascontiguousarray(field.vectors, dtype="<f4").tobytes()


def read_dfld(path) -> DistortionField:
    raw = Path(path).read_bytes()
    if raw[:4] != DFLD_MAGIC:
        raise FormatError(f"{path}: not a DFLD file")
    version, gw, gh, bs = struct.unpack_from("<IIII", raw, 4)
    if version != DFLD_VERSION:
        raise FormatError(f"{path}: unsupported DFLD version {version}")
    expected = 20 + gw * gh * 2 * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vec = np.frombuffer(raw, dtype="<f4", offset=20).reshape(gh, gw, 2)
    return DistortionField(vec.astype(np.float64), bs)


def write_minutiae(path, minutiae: MinutiaSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y"])
        for i, (x, y) in zip(minutiae.ids, minutiae.points):
            writer.writerow([int(i), repr(float(x)), repr(float(y))])


def read_minutiae(path) -> MinutiaSet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "x", "y"]:
            raise FormatError(f"{path}: expected header id,x,y")
        rows = [(int(r["id"]), float(r["x"]), float(r["y"])) for r in reader]
    if not rows:
        return MinutiaSet(np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
    ids, xs, ys = zip(*rows)
    return MinutiaSet(np.column_stack([xs, ys]), np.array(ids))
