"""Image and heatmap file I/O.

PNGs hold display data (renders, glyphs, label maps); the HMAP container
holds raw float32 heatmaps where 8-bit quantization would be lossy:

    magic "HMAP" | uint32 width | uint32 height | float32 row-major values

all little-endian.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

HMAP_MAGIC = b"HMAP"


def save_png(pixels, path, alpha=None):
    """Write float pixels in [0, 1] as 8-bit PNG; RGBA when alpha is given."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if alpha is not None:
        a = np.clip(np.rint(np.asarray(alpha, dtype=np.float64) * 255.0), 0, 255)
        data = np.concatenate([data, a.astype(np.uint8)[:, :, None]], axis=2)
        Image.fromarray(data, mode="RGBA").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def load_png(path):
    """Read a PNG as float RGB in [0, 1]; alpha, if any, is dropped."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return rgb


def save_label_png(labels, path):
    """Write an int label map as an indexed-palette PNG.

    The palette is deterministic: label k gets a fixed color, with 0
    (background/global) black.
    """
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label PNG supports labels in [0, 255]")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(_label_palette())
    im.save(path)


def load_label_png(path):
    with Image.open(path) as im:
        if im.mode != "P":
            raise ValueError(f"{path}: not an indexed PNG")
        return np.asarray(im, dtype=np.int32)


def _label_palette():
    # Golden-angle hue walk: adjacent labels get well-separated hues.
    palette = [0, 0, 0]
    for k in range(1, 256):
        h = (k * 137.508) % 360.0 / 60.0
        c = 0.85
        x = c * (1.0 - abs(h % 2.0 - 1.0))
        r, g, b = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][int(h) % 6]
        palette.extend([int(255 * v + 25) for v in (r, g, b)])
    return palette


def save_hmap(values, path):
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValueError("heatmap must be 2D")
    with open(path, "wb") as fh:
        fh.write(HMAP_MAGIC)
        fh.write(struct.pack("<II", values.shape[1], values.shape[0]))
        fh.write(values.astype("<f4").tobytes())


def load_hmap(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != HMAP_MAGIC:
        raise ValueError(f"{path}: bad magic")
    width, height = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != width * height * 4:
        raise ValueError(f"{path}: truncated body")
    return (
        np.frombuffer(body, dtype="<f4").reshape(height, width).astype(np.float64)
    )
