"""Binary PPM (P6, 8-bit) images."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(img: np.ndarray) -> np.ndarray:
    """[0, 1] float image -> uint8, rounding half up after clipping."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    arr = img if img.dtype == np.uint8 else to_bytes(img)
    h, w, ch = arr.shape
    if ch != 3:
        raise ValueError(f"PPM needs 3 channels, got {ch}")
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + arr.tobytes())


def read_ppm(path) -> np.ndarray:
    """Return an H x W x 3 float image in [0, 1]."""
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only 8-bit P6 PPM is supported")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0
