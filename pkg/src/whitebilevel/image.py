"""Image containers and file I/O.

Images are plain 2-D float64 arrays, row-major, shape (height, width).
Natural images live in [0, 1]; residuals, gradients and other derived
planes are unrestricted reals.  Two on-disk formats are supported:

* 8-bit binary PGM (``P5``) for natural images, mapped to [0, 1] by /255;
* a raw float64 little-endian dump with a one-line JSON header
  ``{"height": ..., "width": ...}`` for exact intermediate results.
"""

from __future__ import annotations

import json
import os

import numpy as np

__all__ = [
    "as_image",
    "check_same_shape",
    "read_pgm",
    "write_pgm",
    "read_raw",
    "write_raw",
]


def as_image(arr, name: str = "image") -> np.ndarray:
    """Coerce ``arr`` to a 2-D float64 array and validate it.

    Raises ValueError for non-2-D input, empty input, or non-finite samples.
    """
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={out.ndim}")
    if out.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite samples")
    return out


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "images") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} have mismatched shapes {a.shape} vs {b.shape}")


def _read_pgm_token(f) -> bytes:
    # Tokens are separated by whitespace; '#' starts a comment to end of line.
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            break
        if c == b"#":
            while c and c != b"\n":
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                break
            continue
        tok += c
    if not tok:
        raise ValueError("truncated PGM header")
    return tok


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM file and map intensities to [0, 1]."""
    with open(path, "rb") as f:
        magic = _read_pgm_token(f)
        if magic != b"P5":
            raise ValueError(f"unsupported PGM magic {magic!r} (want P5)")
        width = int(_read_pgm_token(f))
        height = int(_read_pgm_token(f))
        maxval = int(_read_pgm_token(f))
        if not (0 < maxval < 256):
            raise ValueError(f"unsupported PGM maxval {maxval}")
        raw = f.read(width * height)
    if len(raw) != width * height:
        raise ValueError("truncated PGM raster")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)
    return data.astype(np.float64) / float(maxval)


def write_pgm(path, img: np.ndarray) -> None:
    """Write an image as binary PGM, clipping to [0, 1] and quantizing to 8 bits."""
    img = as_image(img)
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def write_raw(path, img: np.ndarray) -> None:
    """Write an exact float64 dump: one JSON header line, then little-endian data."""
    img = as_image(img)
    h, w = img.shape
    header = json.dumps({"height": h, "width": w}, sort_keys=True)
    with open(path, "wb") as f:
        f.write(header.encode("ascii") + b"\n")
        f.write(np.ascontiguousarray(img, dtype="<f8").tobytes())


def read_raw(path) -> np.ndarray:
    """Read a float64 dump written by :func:`write_raw`."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii")
        meta = json.loads(header)
        h, w = int(meta["height"]), int(meta["width"])
        raw = f.read(8 * h * w)
    if len(raw) != 8 * h * w:
        raise ValueError(f"truncated raw image file {os.fspath(path)}")
    return np.frombuffer(raw, dtype="<f8").reshape(h, w).astype(np.float64)
