"""Image output: 8-bit PNG for previews plus a raw float32 dump that
preserves exact pixel values (ASCII `W H C` header, row-major data)."""

from __future__ import annotations

import numpy as np
from PIL import Image


def _checked(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W) or (H, W, 1|3) image, got shape "
                         f"{arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def write_png(path, img) -> None:
    """Write an image with values in [0, 1] as 8-bit PNG."""
    arr = _checked(img)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if data.shape[2] == 1:
        Image.fromarray(data[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def write_raw_float(path, img) -> None:
    """Dump float32 pixels losslessly: header line `W H C`, then data."""
    arr = _checked(img)
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(f"{w} {h} {c}\n".encode("ascii"))
        f.write(arr.astype("<f4").tobytes())


def read_raw_float(path) -> np.ndarray:
    """Read a dump written by write_raw_float; returns (H, W, C) float32."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if len(header) != 3:
            raise ValueError(f"{path}: malformed raw image header {header}")
        w, h, c = (int(t) for t in header)
        data = np.frombuffer(f.read(), dtype="<f4", count=w * h * c)
    if data.size != w * h * c:
        raise ValueError(f"{path}: truncated raw image payload")
    return data.reshape(h, w, c)
