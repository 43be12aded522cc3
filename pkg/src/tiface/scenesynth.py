"""Synthetic light-stage captures: analytic SDF subjects, a camera rig and background halos."""
from dataclasses import dataclass, field as dc_field, asdict
import json
from pathlib import Path

import numpy as np

from . import images
from .errors import InputDomainError
from .npzio import save_npz
from .render import CameraPose, image_rays, rescale_camera, write_poses

DATASET_VERSION = 1
UNIT_AABB = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


@dataclass
class Halo:
    direction: tuple
    angular_radius: float
    intensity: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        self.direction = tuple(d / np.linalg.norm(d))
        if self.intensity < 0:
            raise InputDomainError("halo intensity must be >= 0")


@dataclass
class SyntheticScene:
    subject: str = "superellipsoid"
    params: dict = dc_field(default_factory=dict)
    halos: list = dc_field(default_factory=list)
    rig: list = dc_field(default_factory=list)
    seed: int = 0
    light_dir: tuple = (0.4, -0.5, 0.75)

    def __post_init__(self):
        if self.subject not in SUBJECTS:
            raise InputDomainError(f"unknown subject {self.subject!r}")
        self.halos = [h if isinstance(h, Halo) else Halo(**h) for h in self.halos]
        if self.rig and len(self.rig) < 2:
            raise InputDomainError("a rig needs at least 2 cameras")
        p = {**SUBJECT_DEFAULTS[self.subject], **self.params}
        self.params = p
        if _subject_extent(self.subject, p) > 1.0:
            raise InputDomainError("subject must fit inside the unit aabb")

    def sdf(self, pts):
        return SUBJECTS[self.subject](pts, self.params)

    def describe(self):
        return {"subject": self.subject, "params": self.params, "halos": [asdict(h) for h in self.halos],
                "seed": self.seed, "light_dir": list(self.light_dir)}


def _sphere(pts, p):
    return np.linalg.norm(pts - np.asarray(p["center"]), axis=-1) - p["radius"]


def _head_bun(pts, p):
    a = np.linalg.norm(pts - np.asarray(p["center"]), axis=-1) - p["radius"]
    b = np.linalg.norm(pts - np.asarray(p["bun_center"]), axis=-1) - p["bun_radius"]
    return np.minimum(a, b)


def _superellipsoid(pts, p):
    # Scaled p-norm minus one, times the smallest semi-axis: 1-Lipschitz for exponent >= 2,
    # so it never overestimates the true distance.
    ax = np.asarray(p["axes"], dtype=np.float64)
    q = np.abs(pts - np.asarray(p["center"])) / ax
    e = p["exponent"]
    return (np.sum(q ** e, axis=-1) ** (1.0 / e) - 1.0) * ax.min()


SUBJECTS = {"sphere": _sphere, "head_bun": _head_bun, "superellipsoid": _superellipsoid}
SUBJECT_DEFAULTS = {
    "sphere": {"center": [0.0, 0.0, 0.0], "radius": 0.5},
    "head_bun": {"center": [0.0, 0.0, -0.05], "radius": 0.5, "bun_center": [-0.35, 0.0, 0.35], "bun_radius": 0.25},
    "superellipsoid": {"center": [0.0, 0.0, 0.0], "axes": [0.5, 0.45, 0.62], "exponent": 2.5},
}


def _subject_extent(kind, p):
    if kind == "sphere":
        return float(np.max(np.abs(p["center"])) + p["radius"])
    if kind == "head_bun":
        return float(max(np.max(np.abs(p["center"])) + p["radius"], np.max(np.abs(p["bun_center"])) + p["bun_radius"]))
    return float(np.max(np.abs(np.asarray(p["center"])) + np.asarray(p["axes"])))


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """World-from-camera rotation (x right, y down, z forward)."""
    fwd = np.asarray(target, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def build_rig(n_cameras, radius=3.2, elevation_range=(-10.0, 35.0), width=128, height=128, fov_deg=30.0):
    """Cameras on a spherical cap, evenly spaced in azimuth, all aimed at the origin.

    Elevations (degrees) cycle through the range with a golden-ratio stride so
    neighbouring cameras sit at different heights.
    """
    if n_cameras < 2:
        raise InputDomainError("a rig needs at least 2 cameras")
    lo, hi = (np.radians(v) for v in elevation_range)
    focal = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    rig = []
    for i in range(n_cameras):
        az = 2.0 * np.pi * i / n_cameras
        el = lo + (hi - lo) * ((i * golden) % 1.0) if hi > lo else lo
        c = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        rig.append(CameraPose(focal, focal, width / 2.0, height / 2.0, look_at(c), c, width, height))
    return rig


def default_halos():
    def d(az, el):
        az, el = np.radians(az), np.radians(el)
        return (np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el))

    return [Halo(d(20.0, 8.0), np.radians(14.0), 0.8), Halo(d(140.0, 12.0), np.radians(12.0), 0.9),
            Halo(d(255.0, 4.0), np.radians(16.0), 1.0)]


def default_scene(n_cameras=20, resolution=128, halos=True, seed=0, subject="superellipsoid"):
    rig = build_rig(n_cameras, width=resolution, height=resolution)
    return SyntheticScene(subject=subject, halos=default_halos() if halos else [], rig=rig, seed=seed)


def default_held_out(n_cameras=20, count=4):
    step = n_cameras // count
    return [2 + i * step for i in range(count) if 2 + i * step < n_cameras]


def sphere_trace(sdf, origins, dirs, t_max=10.0, eps=1e-7, max_steps=512):
    """Returns ``(t, hit)``."""
    t = np.zeros(origins.shape[0])
    active = np.ones(origins.shape[0], dtype=bool)
    hit = np.zeros(origins.shape[0], dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        d = sdf(origins[idx] + t[idx, None] * dirs[idx])
        done = d < eps
        hit[idx[done]] = True
        t[idx[~done]] += d[~done]
        escaped = t[idx] > t_max
        active[idx[done | escaped]] = False
    return t, hit


def _normals(sdf, pts, h=1e-5):
    g = np.zeros_like(pts)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        g[:, a] = (sdf(pts + e) - sdf(pts - e)) / (2 * h)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def surface_color(scene, pts):
    """Soft checker over azimuth/elevation with a dark horizontal stripe."""
    c = pts - np.asarray(scene.params.get("center", [0.0, 0.0, 0.0]))
    az = np.arctan2(c[:, 1], c[:, 0])
    el = np.arctan2(c[:, 2], np.linalg.norm(c[:, :2], axis=1))
    chk = 0.5 + 0.5 * np.tanh(4.0 * np.sin(4.0 * az) * np.sin(3.0 * el + 0.4))
    a = np.array([0.92, 0.66, 0.52])
    b = np.array([0.35, 0.22, 0.45])
    col = a[None, :] * chk[:, None] + b[None, :] * (1.0 - chk[:, None])
    stripe = np.exp(-((c[:, 2] + 0.12) / 0.05) ** 2)
    return col * (1.0 - 0.6 * stripe[:, None]) + np.array([0.1, 0.35, 0.2])[None, :] * 0.6 * stripe[:, None]


def render_ground_truth(scene, camera, resolution=None):
    """Return ``(rgb (H, W, 3), mask (H, W), depth (H, W))``; depth is 0 on background."""
    if resolution is not None:
        camera = rescale_camera(camera, *resolution)
    o, d = image_rays(camera)
    t, hit = sphere_trace(scene.sdf, o, d)
    rgb = np.zeros((o.shape[0], 3))
    if hit.any():
        p = o[hit] + t[hit, None] * d[hit]
        n = _normals(scene.sdf, p)
        light = np.asarray(scene.light_dir, dtype=np.float64)
        light /= np.linalg.norm(light)
        shade = 0.35 + 0.65 * np.clip(n @ light, 0.0, None)
        rgb[hit] = np.clip(surface_color(scene, p) * shade[:, None], 0.0, 1.0)
    miss = ~hit
    for h in scene.halos:
        inside = miss & (d @ np.asarray(h.direction) > np.cos(h.angular_radius))
        rgb[inside] = np.maximum(rgb[inside], h.intensity)
    depth = np.where(hit, t, 0.0)
    shape = (camera.height, camera.width)
    return rgb.reshape(shape + (3,)), hit.reshape(shape).astype(np.float64), depth.reshape(shape)


def export_dataset(scene, rig, resolution, path, held_out=None):
    """Write images, masks, depths, poses and metadata under ``path``; returns the path."""
    path = Path(path)
    if held_out is None:
        held_out = default_held_out(len(rig))
    held_out = sorted(set(int(i) for i in held_out))
    if any(i < 0 or i >= len(rig) for i in held_out):
        raise InputDomainError("held-out index out of range")
    try:
        (path / "images").mkdir(parents=True, exist_ok=True)
        (path / "masks").mkdir(exist_ok=True)
        (path / "depth").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {path}: {exc}") from exc
    rig = [rescale_camera(c, *resolution) for c in rig] if resolution is not None else list(rig)
    rgbs, masks, depths, names, img_paths = [], [], [], [], []
    for i, cam in enumerate(rig):
        rgb, mask, depth = render_ground_truth(scene, cam)
        name = f"view_{i:03d}"
        images.write_rgb(path / "images" / f"{name}.png", rgb)
        images.write_mask(path / "masks" / f"{name}.png", mask)
        images.write_depth16(path / "depth" / f"{name}.png", depth)
        rgbs.append(rgb.astype(np.float32))
        masks.append(mask.astype(np.float32))
        depths.append(depth.astype(np.float32))
        names.append(name)
        img_paths.append(f"images/{name}.png")
    write_poses(path / "poses.txt", rig, names, img_paths)
    save_npz(path / "reference.npz", rgb=np.stack(rgbs), mask=np.stack(masks), depth=np.stack(depths))
    meta = {
        "format": "tiface-dataset", "version": DATASET_VERSION, "n_views": len(rig),
        "width": int(rig[0].width), "height": int(rig[0].height), "held_out": held_out,
        "aabb": UNIT_AABB.tolist(), "depth_scale": images.DEPTH_SCALE, "scene": scene.describe(),
    }
    (path / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (path / "heldout.txt").write_text("".join(f"{i}\n" for i in held_out))
    return path
