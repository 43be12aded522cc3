"""Dense-grid signed distance field rendered with NeuS-style interval alphas."""
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import appearance, kernels
from .errors import InputDomainError
from .parallel import chunk_slices, pmap, tree_sum
from .render import CompositeResult, composite_alpha, composite_alpha_gradients, ray_aabb, stratified_t
from .tface import LossConfig, RenderOutput, grid_coords, mask_loss_ce

CHECKPOINT_VERSION = 1
INV_STD_FLOOR = 1e-3


def iface_loss_config(**overrides):
    kw = dict(lambda_mask=1.0, alpha_reg=0.1, beta_mask=0.1, gamma_sparsity=0.01, mask_loss="bce",
              sparsity_exponent=0.5)
    kw.update(overrides)
    return LossConfig(**kw)


@dataclass
class SDFField:
    resolution: tuple
    aabb: np.ndarray
    sdf_values: np.ndarray
    appearance_features: np.ndarray
    sh_map: np.ndarray
    inv_std: np.ndarray
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.inv_std = np.asarray(self.inv_std, dtype=np.float64).reshape(1)
        if not self.inv_std[0] > 0:
            raise InputDomainError("inv_std must be positive")

    @property
    def feature_dim(self):
        return self.appearance_features.shape[-1]

    @property
    def scale(self):
        """World-to-grid scale per axis."""
        return (np.asarray(self.resolution, dtype=np.float64) - 1.0) / (self.aabb[1] - self.aabb[0])

    def params(self):
        return {"sdf": self.sdf_values, "features": self.appearance_features, "sh_map": self.sh_map,
                "inv_std": self.inv_std}

    def copy(self):
        return SDFField(tuple(self.resolution), self.aabb.copy(), self.sdf_values.copy(),
                        self.appearance_features.copy(), self.sh_map.copy(), self.inv_std.copy(), dict(self.meta))


def grid_points(resolution, aabb):
    axes = [np.linspace(aabb[0][a], aabb[1][a], resolution[a]) for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def init_sdf_field(resolution, aabb, feature_dim=8, seed=0, inv_std=30.0, init="sphere", radius=None):
    """Sphere-initialised SDF grid (``init="random"`` gives i.i.d. uniform values, for tests)."""
    resolution = tuple(int(r) for r in resolution)
    if min(resolution) < 2:
        raise InputDomainError("resolution must be >= 2 per axis")
    aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
    rng = np.random.default_rng(seed)
    center = aabb.mean(axis=0)
    if radius is None:
        radius = 0.5 * float(np.min(aabb[1] - aabb[0])) / 2.0
    if init == "sphere":
        sdf = np.linalg.norm(grid_points(resolution, aabb) - center, axis=-1) - radius
    elif init == "random":
        sdf = rng.uniform(-1.0, 1.0, resolution)
    else:
        raise InputDomainError(f"unknown init {init!r}")
    feats = rng.uniform(-0.1, 0.1, resolution + (feature_dim,))
    bound = 1.0 / np.sqrt(feature_dim)
    sh = rng.uniform(-bound, bound, (feature_dim, 3 * appearance.SH_DIM))
    return SDFField(resolution, aabb, sdf, feats, sh, np.array([inv_std]))


def _clamped(field, points):
    lo, hi = field.aabb
    c = np.clip(points, lo, hi)
    return c, points - c


def query_sdf(field, point):
    p = np.asarray(point, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(p)):
        raise InputDomainError("point must be finite")
    d, _ = _sdf_values(field, p)
    return d[0] if np.ndim(point) == 1 else d


def _sdf_values(field, pts):
    c, off = _clamped(field, pts)
    u = grid_coords(field.aabb, field.resolution, c)
    d = kernels.trilinear_gather(field.sdf_values[..., None], u)[:, 0]
    return d + np.linalg.norm(off, axis=1), u


def sdf_gradient(field, point):
    p = np.asarray(point, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(p)):
        raise InputDomainError("point must be finite")
    c, off = _clamped(field, p)
    u = grid_coords(field.aabb, field.resolution, c)
    g = kernels.trilinear_grad(field.sdf_values, u) * field.scale
    clamped = off != 0
    norm = np.linalg.norm(off, axis=1, keepdims=True)
    g = np.where(clamped, 0.0, g) + np.divide(off, norm, out=np.zeros_like(off), where=norm > 0)
    return g[0] if np.ndim(point) == 1 else g


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def neus_alpha(d_i, d_next, s, return_grad=False):
    """Interval opacity ``max((Phi(s d_i) - Phi(s d_next)) / Phi(s d_i), 0)`` with logistic ``Phi``."""
    if np.any(np.asarray(s) <= 0):
        raise InputDomainError("s must be positive")
    d_i = np.asarray(d_i, dtype=np.float64)
    d_next = np.asarray(d_next, dtype=np.float64)
    a = s * d_i
    b = s * d_next
    ratio = np.exp(np.minimum(_log_sigmoid(b) - _log_sigmoid(a), 0.0))
    alpha = np.where(b < a, 1.0 - ratio, 0.0)
    if not return_grad:
        return alpha
    on = b < a
    da = np.where(on, ratio * (1.0 - _sigmoid(a)), 0.0)
    db = np.where(on, -ratio * (1.0 - _sigmoid(b)), 0.0)
    return alpha, (s * da, s * db, d_i * da + d_next * db)


def render_rays_sdf(field, origins, dirs, q_count, jitter=None, background=0.0, near=None, far=None,
                    keep_cache=True):
    n = origins.shape[0]
    if near is None:
        near, far, hit = ray_aabb(origins, dirs, field.aabb)
    else:
        hit = np.ones(n, dtype=bool)
    if jitter is None:
        jitter = np.full((n, q_count), 0.5)
    t, deltas = stratified_t(near, far, q_count, jitter)
    edges = np.concatenate([t, t[:, -1:] + deltas[:, -1:]], axis=1)
    mids = t + 0.5 * deltas
    s = float(field.inv_std[0])

    epts = (origins[:, None, :] + edges[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
    d, u_e = _sdf_values(field, epts)
    d = d.reshape(n, q_count + 1)
    alpha, (g_di, g_dn, g_s) = neus_alpha(d[:, :-1], d[:, 1:], s, return_grad=True)
    alpha = alpha * hit[:, None]
    weights, trans = kernels.composite_forward(np.ascontiguousarray(alpha))

    mpts = (origins[:, None, :] + mids[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
    mc, _ = _clamped(field, mpts)
    u_m = grid_coords(field.aabb, field.resolution, mc)
    feats = kernels.trilinear_gather(field.appearance_features, u_m)
    vdirs = np.repeat(dirs, q_count, axis=0)
    cols, dec_cache = appearance.decode(feats, field.sh_map, vdirs)
    colors = cols.reshape(n, q_count, 3)

    rgb = np.einsum("nq,nqc->nc", weights, colors)
    opacity = weights.sum(axis=1)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    safe = np.where(opacity > 1e-6, opacity, 1.0)
    depth = np.where(opacity > 1e-6, (weights * mids).sum(axis=1) / safe, far)
    out = RenderOutput(rgb + (1.0 - opacity)[:, None] * bg[None, :], opacity, depth, weights)
    if keep_cache:
        out.cache = dict(alpha=alpha, colors=colors, res=CompositeResult(None, None, weights, trans), bg=bg,
                         hit=hit, g_di=g_di, g_dn=g_dn, g_s=g_s, u_e=u_e, u_m=u_m, dec_cache=dec_cache,
                         t=t, mids=mids, near=near, far=far, edge_pts=epts)
    return out


def render_ray_sdf(field, ray, q_count, jitter=None, background=0.0):
    j = None if jitter is None else np.asarray(jitter, dtype=np.float64).reshape(1, q_count)
    out = render_rays_sdf(field, ray.origin[None, :], ray.direction[None, :], q_count, j, background,
                          near=np.array([ray.t_near]), far=np.array([ray.t_far]))
    res = out.cache["res"]
    return CompositeResult(out.rgb[0], out.opacity[0], res.weights[0], res.transmittances[0], out.depth[0])


def zero_grads(field):
    return {k: np.zeros_like(v) for k, v in field.params().items()}


def render_backward_sdf(field, out, g_rgb, g_opacity, grads):
    c = out.cache
    n, q = c["alpha"].shape
    g_op = g_opacity - g_rgb @ c["bg"]
    g_alpha, g_colors = composite_alpha_gradients(c["alpha"], c["colors"], c["res"], g_rgb, g_op)
    g_alpha = g_alpha * c["hit"][:, None]
    g_d = np.zeros((n, q + 1))
    g_d[:, :-1] += g_alpha * c["g_di"]
    g_d[:, 1:] += g_alpha * c["g_dn"]
    grads["inv_std"] += float(np.sum(g_alpha * c["g_s"]))
    kernels.trilinear_scatter(g_d.reshape(-1, 1), c["u_e"], grads["sdf"][..., None])
    g_feat, g_sh = appearance.decode_backward(g_colors.reshape(-1, 3), field.sh_map, c["dec_cache"])
    grads["sh_map"] += g_sh
    kernels.trilinear_scatter(g_feat, c["u_m"], grads["features"])
    return grads


def sparsity_loss(field, sample_points, gamma=0.5, signed=False, return_grad=False):
    """Mean of ``exp(-gamma |d(y)|)`` over the sample set (``signed=True`` drops the absolute value)."""
    pts = np.asarray(sample_points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise InputDomainError("sparsity sample set is empty")
    d, u = _sdf_values(field, pts)
    mag = d if signed else np.abs(d)
    e = np.exp(-gamma * mag)
    loss = float(e.mean())
    if not return_grad:
        return loss
    dd = -gamma * e * (1.0 if signed else np.sign(d)) / pts.shape[0]
    g = np.zeros_like(field.sdf_values)
    kernels.trilinear_scatter(dd.reshape(-1, 1), u, g[..., None])
    return loss, g


def eikonal_loss(field, sample_points, return_grad=False):
    """Mean of ``(|grad d| - 1)^2`` over points, taken inside the aabb (points are clamped)."""
    pts = np.asarray(sample_points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise InputDomainError("eikonal sample set is empty")
    c, _ = _clamped(field, pts)
    u = grid_coords(field.aabb, field.resolution, c)
    scale = field.scale
    g = kernels.trilinear_grad(field.sdf_values, u) * scale
    norm = np.linalg.norm(g, axis=1)
    loss = float(np.mean((norm - 1.0) ** 2))
    if not return_grad:
        return loss
    coef = 2.0 * (norm - 1.0) / np.where(norm > 0, norm, 1.0) / pts.shape[0]
    up = g * coef[:, None] * scale[None, :]
    out = np.zeros_like(field.sdf_values)
    kernels.trilinear_grad_scatter(np.ascontiguousarray(up), u, out)
    return loss, out


@dataclass
class SDFBatch:
    origins: np.ndarray
    dirs: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    jitter: np.ndarray = None
    extra_points: np.ndarray = None


def sparsity_sample_set(outs, extra_points=None):
    """Ray sample points of rendered batches plus optional uniform points."""
    pts = []
    for out in outs:
        c = out.cache
        n, q = c["t"].shape
        pts.append(c["edge_pts"].reshape(n, q + 1, 3)[:, :-1][c["hit"]].reshape(-1, 3))
    if extra_points is not None:
        pts.append(extra_points)
    return np.concatenate(pts)


def iface_total_loss(field, batch, config, q_count, background=0.0, need_grad=True, workers=1):
    """Color MSE + alpha * Eikonal + beta * BCE(opacity, mask) + gamma * sparsity.

    Returns ``(total, terms, grads)`` with gradients for sdf values,
    appearance features, the SH map and ``inv_std``.
    """
    n = batch.origins.shape[0]
    slices = chunk_slices(n, workers)
    outs = pmap(lambda s: render_rays_sdf(field, batch.origins[s], batch.dirs[s], q_count,
                                          None if batch.jitter is None else batch.jitter[s], background),
                slices, workers)
    rgb = np.concatenate([o.rgb for o in outs])
    opacity = np.concatenate([o.opacity for o in outs])
    diff = rgb - batch.target
    color = float(np.mean(diff ** 2))
    g_rgb = 2.0 * diff / diff.size
    g_op = np.zeros(n)
    terms = {"color": color, "reg": 0.0, "mask": 0.0, "sparsity": 0.0}
    grads = zero_grads(field) if need_grad else None

    if config.beta_mask > 0 and config.mask_loss != "none":
        lm, gm = mask_loss_ce(opacity, batch.mask, config.lambda_mask, config.mask_threshold,
                              include_foreground=True, return_grad=True)
        terms["mask"] = lm
        g_op += config.beta_mask * gm

    if config.alpha_reg > 0 or config.gamma_sparsity > 0:
        pts = sparsity_sample_set(outs, batch.extra_points)
        if config.alpha_reg > 0:
            le, ge = eikonal_loss(field, pts, return_grad=True)
            terms["reg"] = le
            if need_grad:
                grads["sdf"] += config.alpha_reg * ge
        if config.gamma_sparsity > 0:
            ls, gs = sparsity_loss(field, pts, config.sparsity_exponent, config.signed_sparsity, return_grad=True)
            terms["sparsity"] = ls
            if need_grad:
                grads["sdf"] += config.gamma_sparsity * gs
    if need_grad:
        parts = pmap(lambda so: render_backward_sdf(field, so[1], g_rgb[so[0]], g_op[so[0]], zero_grads(field)),
                     zip(slices, outs), workers)
        for k, v in tree_sum(parts).items():
            grads[k] += v
    total = color + config.alpha_reg * terms["reg"] + config.beta_mask * terms["mask"] + config.gamma_sparsity * terms["sparsity"]
    terms["total"] = total
    terms["opacity"] = opacity
    terms["outputs"] = outs
    return total, terms, grads


def extract_depth_normal(field, ray, q_count=128):
    """Weight-averaged depth and the unit SDF normal at the averaged surface point."""
    out = render_rays_sdf(field, ray.origin[None, :], ray.direction[None, :], q_count,
                          near=np.array([ray.t_near]), far=np.array([ray.t_far]), keep_cache=False)
    if out.opacity[0] <= 1e-6:
        return float(ray.t_far), np.zeros(3)
    depth = float(out.depth[0])
    n = sdf_gradient(field, ray.origin + depth * ray.direction)
    norm = np.linalg.norm(n)
    return depth, (n / norm if norm > 0 else np.zeros(3))


def depth_normal_images(field, out, origins, dirs):
    """Per-ray depth and normals from a batch render (zero normal on empty rays)."""
    pts = origins + out.depth[:, None] * dirs
    n = sdf_gradient(field, pts)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    n[out.opacity <= 1e-6] = 0.0
    return out.depth, n


def field_to_arrays(field):
    arrays = {f"param/{k}": v for k, v in field.params().items()}
    arrays["aabb"] = field.aabb
    header = {"kind": "sdffield", "version": CHECKPOINT_VERSION, "resolution": list(field.resolution),
              "meta": field.meta}
    return arrays, header


def field_from_arrays(arrays, header):
    if header.get("kind") != "sdffield":
        raise InputDomainError("checkpoint does not hold an SDFField")
    return SDFField(tuple(header["resolution"]), arrays["aabb"], arrays["param/sdf"], arrays["param/features"],
                    arrays["param/sh_map"], arrays["param/inv_std"], dict(header.get("meta", {})))
