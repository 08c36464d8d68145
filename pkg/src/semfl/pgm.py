"""Portable graymap (P2 plain / P5 binary) reading and writing."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, IngestionError


def _tokens(blob, start, count):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out = []
    i = start
    n = len(blob)
    while len(out) < count:
        while i < n and blob[i:i + 1].isspace():
            i += 1
        if i < n and blob[i:i + 1] == b"#":
            while i < n and blob[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not blob[j:j + 1].isspace() and blob[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise ValueError("truncated header")
        out.append(int(blob[i:j]))
        i = j
    return out, i


def read_pgm(path):
    """Pixel array [H, W] scaled to [0, 1]."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    try:
        magic = blob[:2]
        if magic not in (b"P2", b"P5"):
            raise ValueError(f"not a PGM file (magic {magic!r})")
        (width, height, maxval), pos = _tokens(blob, 2, 3)
        if width < 1 or height < 1 or not 0 < maxval < 65536:
            raise ValueError(f"bad header {width}x{height} maxval {maxval}")
        if magic == b"P2":
            values, _ = _tokens(blob, pos, width * height)
            pix = np.asarray(values, dtype=np.float64)
        else:
            dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
            start = pos + 1  # single whitespace after maxval
            nbytes = width * height * dtype.itemsize
            raw = blob[start:start + nbytes]
            if len(raw) != nbytes:
                raise ValueError("truncated pixel data")
            pix = np.frombuffer(raw, dtype=dtype).astype(np.float64)
        if pix.max(initial=0) > maxval:
            raise ValueError("pixel value exceeds maxval")
    except ValueError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    return pix.reshape(height, width) / maxval


def to_gray8(img):
    """Map [0, 1] floats to 0..255 bytes (clipping outside the range)."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img, binary=True):
    """Write a [H, W] image; floats are taken as [0, 1], integer arrays as 0..255."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {arr.shape}")
    pix = arr.astype(np.uint8) if np.issubdtype(arr.dtype, np.integer) else to_gray8(arr)
    h, w = pix.shape
    with open(path, "wb") as fh:
        if binary:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(pix.tobytes())
        else:
            fh.write(f"P2\n{w} {h}\n255\n".encode("ascii"))
            for row in pix:
                fh.write((" ".join(str(int(v)) for v in row) + "\n").encode("ascii"))
