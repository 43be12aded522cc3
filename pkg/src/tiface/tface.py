"""Vector-matrix factorized radiance field with closed-form gradients.

Density and appearance are each a sum over three modes; mode ``m`` pairs a
line factor along axis ``VEC_AXES[m]`` with a plane factor over
``MAT_AXES[m]``. Grids are vertex-aligned: ``resolution[a]`` vertices span
the aabb along axis ``a``.
"""
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import appearance, kernels
from .errors import InputDomainError
from .parallel import chunk_slices, pmap, tree_sum
from .render import CompositeResult, composite_alpha, composite_alpha_gradients, ray_aabb, stratified_t

VEC_AXES = (2, 1, 0)
MAT_AXES = ((0, 1), (0, 2), (1, 2))
CHECKPOINT_VERSION = 1
DENSITY_SCALE = 25.0  # sigma multiplier; keeps the shifted softplus trainable in a unit-scale aabb


@dataclass
class LossConfig:
    """Loss weights shared by both branches; the meaning of ``gamma_sparsity`` is branch specific."""

    lambda_mask: float = 0.01
    alpha_reg: float = 1e-4
    beta_mask: float = 1.0
    gamma_sparsity: float = 0.1
    mask_loss: str = "l2"
    ce_include_foreground: bool = True
    mask_threshold: float = 0.5
    sparsity_exponent: float = 0.5
    signed_sparsity: bool = False

    def __post_init__(self):
        for name in ("lambda_mask", "alpha_reg", "beta_mask", "gamma_sparsity", "sparsity_exponent"):
            if getattr(self, name) < 0:
                raise InputDomainError(f"{name} must be >= 0")
        if self.mask_loss not in ("l2", "ce", "bce", "none"):
            raise InputDomainError(f"unknown mask loss {self.mask_loss!r}")


def tface_loss_config(**overrides):
    return LossConfig(**overrides)


@dataclass
class VMField:
    resolution: tuple
    aabb: np.ndarray
    density_lines: list
    density_planes: list
    app_lines: list
    app_planes: list
    sh_map: np.ndarray
    density_shift: float = -10.0
    density_scale: float = DENSITY_SCALE
    meta: dict = dc_field(default_factory=dict)

    @property
    def density_rank(self):
        return self.density_lines[0].shape[0]

    @property
    def app_rank(self):
        return self.app_lines[0].shape[0]

    @property
    def feature_dim(self):
        return 3 * self.app_rank

    def params(self):
        out = {}
        for m in range(3):
            out[f"density_line_{m}"] = self.density_lines[m]
            out[f"density_plane_{m}"] = self.density_planes[m]
            out[f"app_line_{m}"] = self.app_lines[m]
            out[f"app_plane_{m}"] = self.app_planes[m]
        out["sh_map"] = self.sh_map
        return out

    def copy(self):
        return VMField(
            tuple(self.resolution), self.aabb.copy(),
            [a.copy() for a in self.density_lines], [a.copy() for a in self.density_planes],
            [a.copy() for a in self.app_lines], [a.copy() for a in self.app_planes],
            self.sh_map.copy(), self.density_shift, self.density_scale, dict(self.meta),
        )


def factor_shapes(resolution, rank):
    lines = [(rank, resolution[VEC_AXES[m]]) for m in range(3)]
    planes = [(rank, resolution[MAT_AXES[m][0]], resolution[MAT_AXES[m][1]]) for m in range(3)]
    return lines, planes


def init_vm_field(resolution, aabb, density_rank=8, app_rank=16, seed=0, density_shift=-10.0,
                  density_scale=None):
    resolution = tuple(int(r) for r in resolution)
    if min(resolution) < 2:
        raise InputDomainError("resolution must be >= 2 per axis")
    rng = np.random.default_rng(seed)

    def factors(rank):
        scale = 0.1 / np.sqrt(rank)
        lines, planes = factor_shapes(resolution, rank)
        return ([rng.uniform(-scale, scale, s) for s in lines],
                [rng.uniform(-scale, scale, s) for s in planes])

    dl, dp = factors(density_rank)
    al, ap = factors(app_rank)
    fdim = 3 * app_rank
    bound = 1.0 / np.sqrt(fdim)
    sh = rng.uniform(-bound, bound, (fdim, 3 * appearance.SH_DIM))
    return VMField(resolution, np.asarray(aabb, dtype=np.float64).reshape(2, 3), dl, dp, al, ap, sh, density_shift,
                   DENSITY_SCALE if density_scale is None else float(density_scale))


VERTEX_SNAP = 1e-12


def grid_coords(aabb, resolution, points):
    lo, hi = aabb
    u = (points - lo) / (hi - lo) * (np.asarray(resolution, dtype=np.float64) - 1.0)
    # snap rounding noise so world-space vertices return the stored value exactly
    r = np.rint(u)
    return np.where(np.abs(u - r) < VERTEX_SNAP, r, u)


def inside_aabb(aabb, points):
    return np.all((points >= aabb[0]) & (points <= aabb[1]), axis=-1)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _mode_values(lines, planes, u):
    """Per-mode line x plane products, each (n, R)."""
    cols = [np.ascontiguousarray(u[:, a]) for a in range(3)]
    vals = []
    for m in range(3):
        b, c = MAT_AXES[m]
        vals.append(kernels.vm_mode_gather(lines[m], planes[m], cols[VEC_AXES[m]], cols[b], cols[c]))
    return vals, cols


def _mode_scatter(lines, planes, cols, g_prod, g_lines, g_planes):
    for m in range(3):
        b, c = MAT_AXES[m]
        kernels.vm_mode_scatter(lines[m], planes[m], cols[VEC_AXES[m]], cols[b], cols[c],
                                np.ascontiguousarray(g_prod[m]), g_lines[m], g_planes[m])


def density_features(field, points):
    """Pre-activation density features for points assumed inside the aabb."""
    u = grid_coords(field.aabb, field.resolution, points)
    vals, cols = _mode_values(field.density_lines, field.density_planes, u)
    return vals[0].sum(axis=1) + vals[1].sum(axis=1) + vals[2].sum(axis=1), cols


def app_features(field, points):
    u = grid_coords(field.aabb, field.resolution, points)
    vals, cols = _mode_values(field.app_lines, field.app_planes, u)
    return np.concatenate(vals, axis=1), cols


def query_density(field, point):
    p = np.asarray(point, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(p)):
        raise InputDomainError("point must be finite")
    out = np.zeros(p.shape[0])
    ins = inside_aabb(field.aabb, p)
    if ins.any():
        feat, _ = density_features(field, p[ins])
        out[ins] = field.density_scale * _softplus(feat + field.density_shift)
    return out[0] if np.ndim(point) == 1 else out


def query_appearance(field, point, view_dir):
    p = np.asarray(point, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(view_dir, dtype=np.float64).reshape(-1, 3)
    if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-6):
        raise InputDomainError("view_dir must be unit length")
    d = np.broadcast_to(d, p.shape)
    feats, _ = app_features(field, p)
    rgb, _ = appearance.decode(feats, field.sh_map, d)
    return rgb[0] if np.ndim(point) == 1 else rgb


@dataclass
class RenderOutput:
    rgb: np.ndarray          # composited over the background
    opacity: np.ndarray
    depth: np.ndarray
    weights: np.ndarray
    cache: object = None


def render_rays(field, origins, dirs, q_count, jitter=None, background=0.0, near=None, far=None,
                weight_threshold=0.0, keep_cache=True):
    """Render a batch of rays.

    Samples are stratified over the ray/aabb overlap unless ``near``/``far``
    are given. ``jitter`` of shape (n, Q) in [0, 1); ``None`` uses bin
    midpoints. With ``weight_threshold > 0`` appearance is only evaluated
    at samples whose compositing weight exceeds it.
    """
    n = origins.shape[0]
    if near is None:
        near, far, hit = ray_aabb(origins, dirs, field.aabb)
    else:
        hit = np.ones(n, dtype=bool)
    if jitter is None:
        jitter = np.full((n, q_count), 0.5)
    t, deltas = stratified_t(near, far, q_count, jitter)
    pts = (origins[:, None, :] + t[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
    inside = inside_aabb(field.aabb, pts) & np.repeat(hit, q_count)
    idx_in = np.flatnonzero(inside)

    feat, dcache = density_features(field, pts[idx_in])
    pre = feat + field.density_shift
    sigma = np.zeros(n * q_count)
    sigma[idx_in] = field.density_scale * _softplus(pre)
    sigma = sigma.reshape(n, q_count)
    alpha = -np.expm1(-sigma * deltas)
    weights, trans = kernels.composite_forward(alpha)

    active = inside.copy()
    if weight_threshold > 0:
        active &= weights.ravel() > weight_threshold
    idx_act = np.flatnonzero(active)
    colors = np.zeros((n * q_count, 3))
    acache = None
    if idx_act.size:
        afeat, acache = app_features(field, pts[idx_act])
        vdirs = np.repeat(dirs, q_count, axis=0)[idx_act]
        rgb_act, dec_cache = appearance.decode(afeat, field.sh_map, vdirs)
        colors[idx_act] = rgb_act
        acache = (acache, dec_cache)
    colors = colors.reshape(n, q_count, 3)
    res = CompositeResult(None, None, weights, trans)
    rgb = np.einsum("nq,nqc->nc", weights, colors)
    opacity = weights.sum(axis=1)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    depth = (weights * t).sum(axis=1) + (1.0 - opacity) * far
    out = RenderOutput(rgb + (1.0 - opacity)[:, None] * bg[None, :], opacity, depth, weights)
    if keep_cache:
        out.cache = dict(alpha=alpha, deltas=deltas, colors=colors, res=res, bg=bg, idx_in=idx_in,
                         pre=pre, dcache=dcache, idx_act=idx_act, acache=acache)
    return out


def zero_grads(field):
    return {k: np.zeros_like(v) for k, v in field.params().items()}


def render_backward(field, out, g_rgb, g_opacity, grads):
    """Accumulate into ``grads`` the gradient of ``g_rgb . rgb + g_opacity . opacity``."""
    c = out.cache
    g_op = g_opacity - g_rgb @ c["bg"]
    g_alpha, g_colors = composite_alpha_gradients(c["alpha"], c["colors"], c["res"], g_rgb, g_op)
    g_sigma = (g_alpha * (1.0 - c["alpha"]) * c["deltas"]).ravel()

    g_feat = g_sigma[c["idx_in"]] * (field.density_scale * _sigmoid(c["pre"]))
    cols = c["dcache"]
    g_dl = [grads[f"density_line_{m}"] for m in range(3)]
    g_dp = [grads[f"density_plane_{m}"] for m in range(3)]
    g_rep = np.repeat(g_feat[:, None], field.density_rank, axis=1)
    _mode_scatter(field.density_lines, field.density_planes, cols, [g_rep] * 3, g_dl, g_dp)

    if c["acache"] is not None:
        cols_a, dec_cache = c["acache"]
        g_col = g_colors.reshape(-1, 3)[c["idx_act"]]
        g_af, g_sh = appearance.decode_backward(g_col, field.sh_map, dec_cache)
        grads["sh_map"] += g_sh
        r = field.app_rank
        g_al = [grads[f"app_line_{m}"] for m in range(3)]
        g_ap = [grads[f"app_plane_{m}"] for m in range(3)]
        _mode_scatter(field.app_lines, field.app_planes, cols_a, [g_af[:, m * r:(m + 1) * r] for m in range(3)],
                      g_al, g_ap)
    return grads


def render_ray(field, ray, q_count, jitter=None, background=0.0):
    """Render one :class:`Ray` between its own ``t_near`` and ``t_far``."""
    j = None if jitter is None else np.asarray(jitter, dtype=np.float64).reshape(1, q_count)
    out = render_rays(field, ray.origin[None, :], ray.direction[None, :], q_count, j, background,
                      near=np.array([ray.t_near]), far=np.array([ray.t_far]))
    c = out.cache
    return CompositeResult(out.rgb[0], out.opacity[0], c["res"].weights[0], c["res"].transmittances[0], out.depth[0])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def background_flags(mask, threshold=0.5):
    return np.asarray(mask, dtype=np.float64) < threshold


def mask_loss_l2(opacities, mask, lam=0.01, threshold=0.5, return_grad=False):
    """``lam`` times the mean squared opacity over background pixels (0 if there are none)."""
    t = np.asarray(opacities, dtype=np.float64)
    bg = background_flags(mask, threshold)
    nb = int(bg.sum())
    if nb == 0:
        loss, grad = 0.0, np.zeros_like(t)
    else:
        loss = lam * float(np.sum(t[bg] ** 2)) / nb
        grad = np.where(bg, 2.0 * lam * t / nb, 0.0)
    return (loss, grad) if return_grad else loss


def mask_loss_ce(opacities, mask, lam=0.01, threshold=0.5, eps=1e-7, include_foreground=True, return_grad=False):
    """``lam`` times the binary cross entropy between opacity and the foreground flag."""
    t = np.asarray(opacities, dtype=np.float64)
    y = 1.0 - background_flags(mask, threshold)
    use = np.ones_like(t, dtype=bool) if include_foreground else (y == 0)
    n = int(use.sum())
    if n == 0:
        return (0.0, np.zeros_like(t)) if return_grad else 0.0
    tc = np.clip(t, eps, 1.0 - eps)
    per = -(y * np.log(tc) + (1.0 - y) * np.log1p(-tc))
    loss = lam * float(per[use].sum()) / n
    if not return_grad:
        return loss
    dper = -(y / tc - (1.0 - y) / (1.0 - tc))
    dper = np.where((t > eps) & (t < 1.0 - eps) & use, dper, 0.0)
    return loss, lam * dper / n


def _all_factors(field):
    return [("density_line", field.density_lines), ("density_plane", field.density_planes),
            ("app_line", field.app_lines), ("app_plane", field.app_planes)]


def _tv_single(a, spatial_axes, need_grad=True):
    loss = 0.0
    grad = np.zeros_like(a) if need_grad else None
    for ax in spatial_axes:
        if a.shape[ax] < 2:
            continue
        d = np.diff(a, axis=ax)
        loss += float(np.mean(d ** 2))
        if need_grad:
            gd = np.moveaxis(2.0 * d / d.size, ax, 0)
            g = np.moveaxis(grad, ax, 0)
            g[1:] += gd
            g[:-1] -= gd
    return loss, grad


def tv_loss(field, return_grad=False):
    """Sum over factors of the mean squared difference between neighbouring entries."""
    total = 0.0
    grads = {}
    for name, facs in _all_factors(field):
        for m, a in enumerate(facs):
            axes = (1,) if a.ndim == 2 else (1, 2)
            l, g = _tv_single(a, axes, return_grad)
            total += l
            grads[f"{name}_{m}"] = g
    return (total, grads) if return_grad else total


def l1_reg(field, return_grad=False):
    """Mean absolute value over every density factor entry."""
    facs = field.density_lines + field.density_planes
    count = sum(a.size for a in facs)
    loss = sum(float(np.abs(a).sum()) for a in facs) / count
    if not return_grad:
        return loss
    grads = {}
    for m in range(3):
        grads[f"density_line_{m}"] = np.sign(field.density_lines[m]) / count
        grads[f"density_plane_{m}"] = np.sign(field.density_planes[m]) / count
    return loss, grads


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    jitter: np.ndarray = None


def _jitter_slice(jitter, s):
    return None if jitter is None else jitter[s]


def tface_total_loss(field, batch, config, q_count, background=0.0, weight_threshold=0.0, need_grad=True,
                     workers=1):
    """Color MSE + alpha * L1 + beta * mask loss + gamma * TV.

    Returns ``(total, terms, grads)``; ``grads`` maps parameter names to
    arrays. Rays are split into ``workers`` chunks whose gradient buffers are
    reduced pairwise in a fixed order.
    """
    n = batch.origins.shape[0]
    slices = chunk_slices(n, workers)
    outs = pmap(lambda s: render_rays(field, batch.origins[s], batch.dirs[s], q_count, _jitter_slice(batch.jitter, s),
                                      background, weight_threshold=weight_threshold, keep_cache=need_grad),
                slices, workers)
    rgb = np.concatenate([o.rgb for o in outs])
    opacity = np.concatenate([o.opacity for o in outs])
    diff = rgb - batch.target
    color = float(np.mean(diff ** 2))
    g_rgb = 2.0 * diff / diff.size
    g_op = np.zeros(n)
    terms = {"color": color, "reg": 0.0, "mask": 0.0, "sparsity": 0.0}

    if config.beta_mask > 0 and config.mask_loss in ("l2", "ce", "bce"):
        if config.mask_loss == "l2":
            lm, gm = mask_loss_l2(opacity, batch.mask, config.lambda_mask, config.mask_threshold, return_grad=True)
        else:
            lm, gm = mask_loss_ce(opacity, batch.mask, config.lambda_mask, config.mask_threshold,
                                  include_foreground=config.ce_include_foreground, return_grad=True)
        terms["mask"] = lm
        g_op += config.beta_mask * gm

    grads = zero_grads(field) if need_grad else None
    if config.alpha_reg > 0:
        lr, gr = l1_reg(field, return_grad=True) if need_grad else (l1_reg(field), None)
        terms["reg"] = lr
        if need_grad:
            for k, v in gr.items():
                grads[k] += config.alpha_reg * v
    if config.gamma_sparsity > 0:
        lt, gt = tv_loss(field, return_grad=True) if need_grad else (tv_loss(field), None)
        terms["sparsity"] = lt
        if need_grad:
            for k, v in gt.items():
                grads[k] += config.gamma_sparsity * v
    if need_grad:
        parts = pmap(lambda so: render_backward(field, so[1], g_rgb[so[0]], g_op[so[0]], zero_grads(field)),
                     zip(slices, outs), workers)
        for k, v in tree_sum(parts).items():
            grads[k] += v
    total = color + config.alpha_reg * terms["reg"] + config.beta_mask * terms["mask"] + config.gamma_sparsity * terms["sparsity"]
    terms["total"] = total
    terms["opacity"] = opacity
    terms["outputs"] = outs
    return total, terms, grads


# ---------------------------------------------------------------------------
# resolution schedule and checkpoints
# ---------------------------------------------------------------------------

def resample_axis(a, axis, new_n):
    """Vertex-aligned linear resampling of ``a`` along ``axis`` to ``new_n`` entries."""
    old_n = a.shape[axis]
    if new_n == old_n:
        return a.copy()
    x = np.arange(new_n) * ((old_n - 1) / (new_n - 1))
    i0 = np.clip(np.floor(x).astype(np.int64), 0, old_n - 2)
    f = x - i0
    a0 = np.take(a, i0, axis=axis)
    a1 = np.take(a, i0 + 1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = new_n
    f = f.reshape(shape)
    return a0 * (1.0 - f) + a1 * f


def upsample(field, new_resolution):
    new_resolution = tuple(int(r) for r in new_resolution)
    if any(n < o for n, o in zip(new_resolution, field.resolution)):
        raise InputDomainError(f"cannot shrink resolution {field.resolution} -> {new_resolution}")
    out = field.copy()
    out.resolution = new_resolution
    for lines, planes in ((out.density_lines, out.density_planes), (out.app_lines, out.app_planes)):
        for m in range(3):
            lines[m] = resample_axis(lines[m], 1, new_resolution[VEC_AXES[m]])
            b, c = MAT_AXES[m]
            planes[m] = resample_axis(resample_axis(planes[m], 1, new_resolution[b]), 2, new_resolution[c])
    return out


def field_to_arrays(field):
    arrays = {f"param/{k}": v for k, v in field.params().items()}
    arrays["aabb"] = field.aabb
    header = {"kind": "vmfield", "version": CHECKPOINT_VERSION, "resolution": list(field.resolution),
              "density_shift": field.density_shift,
              "density_scale": field.density_scale, "meta": field.meta}
    return arrays, header


def field_from_arrays(arrays, header):
    if header.get("kind") != "vmfield":
        raise InputDomainError("checkpoint does not hold a VMField")
    p = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    return VMField(
        tuple(header["resolution"]), arrays["aabb"],
        [p[f"density_line_{m}"] for m in range(3)], [p[f"density_plane_{m}"] for m in range(3)],
        [p[f"app_line_{m}"] for m in range(3)], [p[f"app_plane_{m}"] for m in range(3)],
        p["sh_map"], float(header["density_shift"]), float(header.get("density_scale", DENSITY_SCALE)), dict(header.get("meta", {})),
    )
