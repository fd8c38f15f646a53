"""Minimal binary PPM/PGM readers and writers.

P6 8-bit for color renders, P5 16-bit (big-endian per the netpbm spec) for
masks and ID rasters. Chosen so tests can diff files bit-exactly without an
image decoding dependency.
"""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    pass


def write_ppm(path, image: np.ndarray):
    """image: (H, W, 3) floats in [0, 1], written as 8-bit P6."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def write_pgm16(path, values: np.ndarray):
    """values: (H, W) integers in [0, 65535], written as 16-bit P5."""
    data = np.asarray(values)
    if data.min() < 0 or data.max() > 65535:
        raise ImageFormatError("PGM16 values outside [0, 65535]")
    data = data.astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(data.tobytes())


def write_mask_pgm(path, mask_values: np.ndarray):
    """Real-valued mask in [0, 1] scaled to 16-bit."""
    write_pgm16(path, np.round(np.clip(mask_values, 0.0, 1.0) * 65535).astype(int))


def _read_header(fh, magic):
    if fh.read(2) != magic:
        raise ImageFormatError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise ImageFormatError("truncated header")
        line = line.split(b"#")[0]
        fields.extend(int(tok) for tok in line.split())
    return fields[:3]


def read_ppm(path) -> np.ndarray:
    """Returns (H, W, 3) floats in [0, 1]."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P6")
        if maxval != 255:
            raise ImageFormatError(f"unsupported PPM maxval {maxval}")
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(float) / 255.0


def read_pgm16(path) -> np.ndarray:
    """Returns (H, W) integer array."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P5")
        if maxval != 65535:
            raise ImageFormatError(f"unsupported PGM maxval {maxval}")
        data = np.frombuffer(fh.read(w * h * 2), dtype=">u2")
    return data.reshape(h, w).astype(int)
