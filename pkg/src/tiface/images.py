"""8/16-bit image file helpers (PNG through Pillow)."""
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_SCALE = 1000.0  # 16-bit depth units per world unit
TRIMAP_VALUES = {"background": 0, "unknown": 128, "foreground": 255}


def to_uint8(x):
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_rgb(path, rgb):
    Image.fromarray(to_uint8(rgb), mode="RGB").save(Path(path))


def read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask(path, mask):
    Image.fromarray(to_uint8(mask), mode="L").save(Path(path))


def read_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_depth16(path, depth):
    v = np.clip(np.round(np.asarray(depth) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(v).save(Path(path))


def read_depth16(path):
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / DEPTH_SCALE


def write_normals(path, normals):
    write_rgb(path, 0.5 * (np.asarray(normals) + 1.0))


def write_trimap(path, labels):
    """``labels`` uses 0/1/2 for background/unknown/foreground."""
    lut = np.array([0, 128, 255], dtype=np.uint8)
    Image.fromarray(lut[np.asarray(labels, dtype=np.int64)], mode="L").save(Path(path))


def read_trimap(path):
    with Image.open(path) as im:
        v = np.asarray(im.convert("L"))
    labels = np.full(v.shape, 1, dtype=np.int8)
    labels[v < 64] = 0
    labels[v > 191] = 2
    return labels
