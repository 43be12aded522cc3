"""Pinhole cameras, ray generation, stratified sampling and compositing.

Camera convention: ``rotation`` maps camera axes to world axes (x right,
y down, z forward) and ``translation`` is the camera center in world units.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import InputDomainError

POSE_FILE_VERSION = "tiface-poses v1"
POSE_FIELDS = (
    "name", "width", "height", "fx", "fy", "cx", "cy",
    "r00", "r01", "r02", "t0", "r10", "r11", "r12", "t1", "r20", "r21", "r22", "t2",
    "image",
)


@dataclass(frozen=True)
class CameraPose:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise InputDomainError("rotation must be orthonormal with det +1")
        if not (self.fx > 0 and self.fy > 0):
            raise InputDomainError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InputDomainError("principal point must lie inside the image")

    @property
    def center(self):
        return self.translation

    def extrinsic(self):
        """3x4 world-from-camera matrix ``[R | c]``."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise InputDomainError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise InputDomainError("require 0 <= t_near < t_far")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class RaySamples:
    positions: np.ndarray
    deltas: np.ndarray
    t_values: np.ndarray


@dataclass(frozen=True)
class CompositeResult:
    rgb: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray
    transmittances: np.ndarray
    depth: np.ndarray = None


def rescale_camera(camera, width, height):
    """Same pose with intrinsics scaled to a new image size."""
    width, height = int(width), int(height)
    if (width, height) == (camera.width, camera.height):
        return camera
    sx, sy = width / camera.width, height / camera.height
    return CameraPose(camera.fx * sx, camera.fy * sy, camera.cx * sx, camera.cy * sy,
                      camera.rotation, camera.translation, width, height)


def _pixel_dirs(camera, px, py):
    cam = np.stack([(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, np.ones_like(px)], axis=-1)
    world = cam @ camera.rotation.T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def generate_ray(camera, px, py, t_near=0.0, t_far=1e3):
    """Ray through continuous pixel position ``(px, py)``; pass ``i + 0.5`` for pixel centers."""
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise InputDomainError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    d = _pixel_dirs(camera, np.asarray([px], dtype=np.float64), np.asarray([py], dtype=np.float64))[0]
    return Ray(camera.center.copy(), d, t_near, t_far)


def generate_rays(camera, px, py):
    """Vectorized :func:`generate_ray`; returns ``(origins, directions)`` of shape (n, 3)."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    if np.any((px < 0) | (px >= camera.width) | (py < 0) | (py >= camera.height)):
        raise InputDomainError("pixel coordinates out of bounds")
    dirs = _pixel_dirs(camera, px, py)
    return np.broadcast_to(camera.center, dirs.shape).copy(), dirs


def image_rays(camera):
    """Rays through every pixel center in row-major order."""
    ys, xs = np.meshgrid(np.arange(camera.height) + 0.5, np.arange(camera.width) + 0.5, indexing="ij")
    return generate_rays(camera, xs.ravel(), ys.ravel())


def ray_aabb(origins, dirs, aabb, min_near=0.0):
    """Slab intersection. Returns ``(t_near, t_far, hit)``; misses get a unit dummy interval."""
    lo, hi = np.asarray(aabb[0], dtype=np.float64), np.asarray(aabb[1], dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
    near = np.maximum(tmin.max(axis=1), min_near)
    far = tmax.min(axis=1)
    hit = far > near + 1e-9
    near = np.where(hit, near, min_near)
    far = np.where(hit, far, min_near + 1.0)
    return near, far, hit


def sample_stratified(ray, q_count, jitter):
    if q_count < 1:
        raise InputDomainError("q_count must be >= 1")
    jitter = np.broadcast_to(np.asarray(jitter, dtype=np.float64), (q_count,))
    t, deltas = stratified_t(np.array([ray.t_near]), np.array([ray.t_far]), q_count, jitter[None, :])
    t, deltas = t[0], deltas[0]
    return RaySamples(ray.origin[None, :] + t[:, None] * ray.direction[None, :], deltas, t)


def stratified_t(near, far, q_count, jitter):
    """Batched stratified sampling; ``jitter`` has shape (n, Q) with values in [0, 1)."""
    if q_count < 1:
        raise InputDomainError("q_count must be >= 1")
    width = (far - near) / q_count
    t = near[:, None] + (np.arange(q_count)[None, :] + jitter) * width[:, None]
    deltas = np.empty_like(t)
    deltas[:, :-1] = t[:, 1:] - t[:, :-1]
    deltas[:, -1] = width
    return t, deltas


def _check_composite(densities, colors, deltas):
    if densities.shape != deltas.shape or colors.shape != densities.shape + (3,):
        raise InputDomainError("densities, colors and deltas must agree in length")
    if np.any(densities < 0):
        raise InputDomainError("densities must be non-negative")


def composite(densities, colors, deltas, dtype=np.float64):
    """Emission-absorption compositing of one ray (Q,) or a batch (n, Q)."""
    densities = np.asarray(densities, dtype=dtype)
    colors = np.asarray(colors, dtype=dtype)
    deltas = np.asarray(deltas, dtype=dtype)
    _check_composite(densities, colors, deltas)
    alpha = -np.expm1(-densities * deltas)
    return composite_alpha(alpha, colors)


def composite_alpha(alpha, colors):
    single = alpha.ndim == 1
    a2 = np.ascontiguousarray(alpha.reshape(-1, alpha.shape[-1]))
    weights, trans = kernels.composite_forward(a2)
    c2 = colors.reshape(a2.shape + (3,))
    rgb = np.einsum("nq,nqc->nc", weights, c2)
    opacity = weights.sum(axis=1)
    if single:
        return CompositeResult(rgb[0], opacity[0], weights[0], trans[0])
    return CompositeResult(rgb, opacity, weights, trans)


def composite_alpha_gradients(alpha, colors, result, grad_rgb, grad_opacity):
    """Gradients of ``grad_rgb . rgb + grad_opacity * opacity`` w.r.t. alphas and colors (batched)."""
    e = np.einsum("nqc,nc->nq", colors, grad_rgb) + grad_opacity[:, None]
    g_alpha = kernels.composite_backward(alpha, result.transmittances, e)
    g_colors = result.weights[:, :, None] * grad_rgb[:, None, :]
    return g_alpha, g_colors


def composite_gradients(densities, colors, deltas, grad_rgb, grad_opacity):
    """Analytic gradient of a scalar loss through :func:`composite`.

    ``grad_rgb`` and ``grad_opacity`` are the upstream derivatives of the loss
    w.r.t. the composited rgb and opacity. Returns ``(d/d sigma, d/d colors)``.
    """
    densities = np.asarray(densities, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    _check_composite(densities, colors, deltas)
    single = densities.ndim == 1
    sig = densities.reshape(-1, densities.shape[-1])
    dl = deltas.reshape(sig.shape)
    col = colors.reshape(sig.shape + (3,))
    g_rgb = np.asarray(grad_rgb, dtype=np.float64).reshape(-1, 3)
    g_op = np.asarray(grad_opacity, dtype=np.float64).reshape(-1)
    alpha = -np.expm1(-sig * dl)
    res = composite_alpha(alpha, col)
    g_alpha, g_col = composite_alpha_gradients(alpha, col, res, g_rgb, g_op)
    g_sigma = g_alpha * (1.0 - alpha) * dl
    if single:
        return g_sigma[0], g_col[0]
    return g_sigma, g_col


# ---------------------------------------------------------------------------
# pose files
# ---------------------------------------------------------------------------

def write_poses(path, cameras, names, image_paths):
    lines = [f"# {POSE_FILE_VERSION}", "# " + " ".join(POSE_FIELDS)]
    for cam, name, img in zip(cameras, names, image_paths):
        e = cam.extrinsic()
        vals = [name, str(cam.width), str(cam.height)] + [repr(float(v)) for v in (cam.fx, cam.fy, cam.cx, cam.cy)]
        vals += [repr(float(v)) for v in e.ravel()]
        vals.append(str(img))
        lines.append(" ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path):
    """Parse a pose file. Returns ``(cameras, names, image_paths)``."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != f"# {POSE_FILE_VERSION}":
        raise InputDomainError(f"{path}: missing '# {POSE_FILE_VERSION}' header")
    cameras, names, images = [], [], []
    for lineno, line in enumerate(text[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != len(POSE_FIELDS):
            raise InputDomainError(f"{path}:{lineno}: expected {len(POSE_FIELDS)} fields, got {len(parts)}")
        w, h = int(parts[1]), int(parts[2])
        fx, fy, cx, cy = (float(v) for v in parts[3:7])
        ext = np.array([float(v) for v in parts[7:19]]).reshape(3, 4)
        cameras.append(CameraPose(fx, fy, cx, cy, ext[:, :3], ext[:, 3], w, h))
        names.append(parts[0])
        images.append(parts[19])
    return cameras, names, images
