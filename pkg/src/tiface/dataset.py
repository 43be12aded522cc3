"""Loading exported (or user-supplied) multi-view datasets."""
from dataclasses import dataclass
import json
from pathlib import Path

import numpy as np

from . import images
from .errors import InputDomainError
from .render import image_rays, read_poses


@dataclass
class Dataset:
    path: Path
    cameras: list
    names: list
    images: np.ndarray
    masks: np.ndarray
    held_out: list
    aabb: np.ndarray
    depth: np.ndarray = None

    @property
    def train_indices(self):
        held = set(self.held_out)
        return [i for i in range(len(self.cameras)) if i not in held]

    @property
    def has_masks(self):
        return self.masks is not None

    def rays(self, indices):
        """Flattened ``(origins, dirs, rgb, mask)`` over all pixels of the given views."""
        o, d, rgb, m = [], [], [], []
        for i in indices:
            oi, di = image_rays(self.cameras[i])
            o.append(oi)
            d.append(di)
            rgb.append(self.images[i].reshape(-1, 3))
            m.append(self.masks[i].reshape(-1) if self.has_masks else np.ones(oi.shape[0]))
        return np.concatenate(o), np.concatenate(d), np.concatenate(rgb), np.concatenate(m)


def load_dataset(path, masks_dir=None, prefer_lossless=True):
    """Read a dataset directory.

    ``masks_dir`` replaces the dataset's own masks with 8-bit files named
    like the views. The float container ``reference.npz`` is used for images
    when present and ``prefer_lossless`` is set.
    """
    path = Path(path)
    pose_file = path / "poses.txt"
    if not pose_file.exists():
        raise InputDomainError(f"{path}: no poses.txt")
    cameras, names, img_paths = read_poses(pose_file)
    meta = {}
    if (path / "dataset.json").exists():
        meta = json.loads((path / "dataset.json").read_text())
    held_out = list(meta.get("held_out", []))
    if not meta and (path / "heldout.txt").exists():
        held_out = [int(v) for v in (path / "heldout.txt").read_text().split()]
    aabb = np.asarray(meta.get("aabb", [[-1.0] * 3, [1.0] * 3]), dtype=np.float64)

    ref = path / "reference.npz"
    depth = None
    masks = None
    if prefer_lossless and ref.exists():
        with np.load(ref) as z:
            imgs = z["rgb"].astype(np.float64)
            masks = z["mask"].astype(np.float64)
            depth = z["depth"].astype(np.float64)
    else:
        imgs = np.stack([images.read_rgb(path / p) for p in img_paths])
        mdir = path / "masks"
        if mdir.exists():
            masks = np.stack([images.read_mask(mdir / f"{n}.png") for n in names])
    if masks_dir is not None:
        mdir = Path(masks_dir)
        masks = np.stack([images.read_mask(mdir / f"{n}.png") for n in names])
    for i, cam in enumerate(cameras):
        if imgs[i].shape[:2] != (cam.height, cam.width):
            raise InputDomainError(f"{names[i]}: image size does not match its camera")
    return Dataset(path, cameras, names, imgs, masks, held_out, aabb, depth)
