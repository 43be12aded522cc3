"""Training loops for both branches: sample rays, render, differentiate, step."""
import csv
from dataclasses import dataclass, field as dc_field
import math
from pathlib import Path

import numpy as np

from . import iface, tface
from .checkpoint import save_checkpoint
from .errors import InputDomainError, TrainingError
from .optim import AdamState, adam_step, dynamic_batch, lr_at

LOG_COLUMNS = ("step", "total", "color", "reg", "mask", "sparsity", "lr_tensor", "lr_decoder", "batch_rays")
MASK_MODES = {"tface": ("none", "rgba", "ce", "l2"), "iface": ("none", "rgba", "bce")}
EXTRA_POINTS = 1024
OCCUPIED_ALPHA = 1e-3
OCCUPIED_TRANS = 1e-4
CHUNK_RAYS = 4096


@dataclass
class TrainResult:
    field: object
    state: AdamState
    log: list = dc_field(default_factory=list)
    steps: int = 0


def composite_target(rgb, mask, background):
    """Reference colors with the matte applied over a constant background (RGBA training)."""
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    return rgb * mask[:, None] + (1.0 - mask[:, None]) * bg[None, :]


def configure_mask_mode(branch, loss_config, mask_mode):
    """Loss config and a 'composite the target' flag for one mask ablation mode.

    ``none`` trains on raw images; ``rgba`` composites the matte into the
    target; ``ce``/``l2``/``bce`` add the corresponding mask loss on top of the
    composited target.
    """
    if mask_mode not in MASK_MODES[branch]:
        raise InputDomainError(f"mask mode {mask_mode!r} not available for {branch}")
    if mask_mode in ("none", "rgba"):
        cfg = _replace(loss_config, mask_loss="none")
    elif mask_mode == "bce":
        cfg = _replace(loss_config, mask_loss="bce")
    else:
        cfg = _replace(loss_config, mask_loss=mask_mode)
    return cfg, mask_mode != "none"


def _replace(cfg, **kw):
    d = dict(cfg.__dict__)
    d.update(kw)
    return type(cfg)(**d)


def init_field(branch, schedule, aabb, seed, **kw):
    n = schedule.init_resolution
    if branch == "tface":
        return tface.init_vm_field((n, n, n), aabb, seed=seed, **kw)
    return iface.init_sdf_field((n, n, n), aabb, seed=seed, **kw)


def _block_lrs(branch, field, lr_t, lr_d):
    return {k: (lr_d if k == "sh_map" else lr_t) for k in _opt_names(branch, field)}


def _opt_names(branch, field):
    names = list(field.params())
    if branch == "iface":
        names = [("log_inv_std" if k == "inv_std" else k) for k in names]
    return names


def _opt_params(branch, field, log_s):
    p = dict(field.params())
    if branch == "iface":
        p.pop("inv_std")
        p["log_inv_std"] = log_s
    return p


def _weight_decay(branch, field, wd):
    if branch == "tface":
        return wd
    # decay only the appearance blocks: shrinking sdf values or the sharpness would bias geometry
    return {k: (wd if k in ("features", "sh_map") else 0.0) for k in _opt_names(branch, field)}


class _LossLog:
    def __init__(self, path, every):
        self.every = max(1, int(every))
        self.rows = []
        self._acc = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="")
            self._w = csv.writer(self._fh)
            self._w.writerow(LOG_COLUMNS)

    def add(self, step, terms, lrs, batch, force=False):
        self._acc.append([terms[k] for k in ("total", "color", "reg", "mask", "sparsity")])
        if step % self.every == 0 or force:
            mean = np.mean(np.asarray(self._acc), axis=0)
            row = [step] + [float(v) for v in mean] + [float(lrs[0]), float(lrs[1]), int(batch)]
            self._acc = []
            self.rows.append(row)
            if self._fh is not None:
                self._w.writerow([row[0]] + [repr(v) for v in row[1:-1]] + [row[-1]])
                self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _snapshot(path, field, state, step, terms):
    if path is None:
        return None
    snap = Path(path).with_name(Path(path).stem + f"_abort_{step:06d}.npz")
    finite = {k: float(v) for k, v in terms.items() if isinstance(v, float)}
    save_checkpoint(snap, field, state, extra={"aborted_at": step, "terms": {k: repr(v) for k, v in finite.items()}})
    return snap


def run_training(branch, dataset, schedule, loss_config, seed=0, mask_mode="none", background=0.0, workers=1,
                 log_path=None, checkpoint_path=None, field=None, init_kwargs=None, progress=None):
    """Optimise a T-Face (``branch="tface"``) or I-Face field on the training views of ``dataset``.

    Rays are drawn uniformly over all training pixels from a generator seeded
    with ``seed``; stratified jitter comes from the same stream. With
    ``workers=1`` the run is bit-reproducible. Losses are logged as means over
    each window of ``schedule.log_every`` steps. A non-finite loss or
    gradient raises :class:`TrainingError` after writing an ``_abort``
    snapshot next to ``checkpoint_path``.
    """
    if branch not in MASK_MODES:
        raise InputDomainError(f"unknown branch {branch!r}")
    cfg, use_matte = configure_mask_mode(branch, loss_config, mask_mode)
    # factor regularizers pull a near-empty VM field into the all-zero saddle, so they wait for the warm-up
    cfg_warm = _replace(cfg, alpha_reg=0.0, gamma_sparsity=0.0) if branch == "tface" else cfg
    if (use_matte or cfg.mask_loss != "none") and not dataset.has_masks:
        raise InputDomainError("mask mode requires dataset masks")
    idx = dataset.train_indices
    if not idx:
        raise InputDomainError("dataset has no training views")
    origins, dirs, rgb, mask = dataset.rays(idx)
    target_all = composite_target(rgb, mask, background) if use_matte else rgb

    rng = np.random.default_rng(seed)
    if field is None:
        field = init_field(branch, schedule, dataset.aabb, seed, **(init_kwargs or {}))
    state = AdamState(beta1=schedule.beta1, beta2=schedule.beta2, lr=schedule.lr_tensor,
                      weight_decay=schedule.weight_decay)
    log_s = np.log(field.inv_std).copy() if branch == "iface" else None
    milestones = dict(schedule.upsample_milestones)
    batch = schedule.initial_batch()
    log = _LossLog(log_path, schedule.log_every)
    q = schedule.q_count
    n_pix = origins.shape[0]
    lo, hi = dataset.aabb
    try:
        for step in range(schedule.total_steps):
            if branch == "tface" and step in milestones:
                r = milestones[step]
                field = tface.upsample(field, (r, r, r))
                state.reset([k for k in field.params() if k != "sh_map"])
            lrs = lr_at(schedule, step)
            sel = rng.integers(0, n_pix, batch)
            jitter = rng.random((batch, q))
            chunks = max(workers, -(-batch // CHUNK_RAYS))
            step_cfg = cfg_warm if step < schedule.reg_warmup else cfg
            if branch == "tface":
                b = tface.RayBatch(origins[sel], dirs[sel], target_all[sel], mask[sel], jitter)
                total, terms, grads = tface.tface_total_loss(field, b, step_cfg, q, background,
                                                               schedule.weight_threshold, workers=chunks)
            else:
                extra = lo + (hi - lo) * rng.random((EXTRA_POINTS, 3))
                b = iface.SDFBatch(origins[sel], dirs[sel], target_all[sel], mask[sel], jitter, extra)
                total, terms, grads = iface.iface_total_loss(field, b, step_cfg, q, background, workers=chunks)
            if not math.isfinite(total):
                snap = _snapshot(checkpoint_path, field, state, step, terms)
                raise TrainingError(f"non-finite loss at step {step} (terms {_fmt(terms)}); snapshot: {snap}")
            if branch == "iface":
                grads["log_inv_std"] = grads.pop("inv_std") * field.inv_std
            params = _opt_params(branch, field, log_s)
            try:
                adam_step(state, params, grads, lr=_block_lrs(branch, field, *lrs),
                          weight_decay=_weight_decay(branch, field, schedule.weight_decay))
            except TrainingError as exc:
                snap = _snapshot(checkpoint_path, field, state, step, terms)
                raise TrainingError(f"{exc}; snapshot: {snap}") from exc
            if branch == "iface":
                field.inv_std[:] = np.maximum(np.exp(log_s), iface.INV_STD_FLOOR)
                log_s[:] = np.log(field.inv_std)
            log.add(step + 1, terms, lrs, batch, force=step + 1 == schedule.total_steps)
            if schedule.dynamic:
                batch = dynamic_batch(batch, _occupied_per_ray(terms["outputs"]), schedule.batch_rays[2],
                                      schedule.batch_rays[:2])
            if progress is not None:
                progress(step + 1, terms)
    finally:
        log.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, field, state,
                        extra={"branch": branch, "steps": schedule.total_steps, "seed": seed, "mask_mode": mask_mode})
    return TrainResult(field, state, log.rows, schedule.total_steps)


def _fmt(terms):
    return ", ".join(f"{k}={v!r}" for k, v in terms.items() if isinstance(v, float))


def _occupied_per_ray(outs):
    total, n = 0, 0
    for out in outs:
        c = out.cache
        occ = (c["alpha"] > OCCUPIED_ALPHA) & (c["res"].transmittances > OCCUPIED_TRANS)
        total += int(occ.sum())
        n += occ.shape[0]
    return total / max(n, 1)


def render_view(field, camera, q_count=64, background=0.0, chunk=4096):
    """Render a full image; returns ``(rgb, opacity, depth, normal_or_None)`` as (H, W, ...) arrays."""
    from .render import image_rays

    o, d = image_rays(camera)
    rgbs, ops, deps, norms = [], [], [], []
    for s in range(0, o.shape[0], chunk):
        oc, dc = o[s:s + chunk], d[s:s + chunk]
        if isinstance(field, tface.VMField):
            out = tface.render_rays(field, oc, dc, q_count, None, background, keep_cache=False)
        else:
            out = iface.render_rays_sdf(field, oc, dc, q_count, None, background, keep_cache=True)
            norms.append(iface.depth_normal_images(field, out, oc, dc)[1])
        rgbs.append(out.rgb)
        ops.append(out.opacity)
        deps.append(out.depth)
    h, w = camera.height, camera.width
    rgb = np.concatenate(rgbs).reshape(h, w, 3)
    normal = np.concatenate(norms).reshape(h, w, 3) if norms else None
    return rgb, np.concatenate(ops).reshape(h, w), np.concatenate(deps).reshape(h, w), normal
