"""``tiface`` command-line entry point.

Every subcommand resolves its settings as built-in defaults, then an
optional JSON ``--config`` file, then explicit flags. The resolved settings
are validated before anything is written and echoed as ``config.json`` into
the output directory.

Exit codes: 0 success, 2 configuration error, 3 runtime or numerical error.
"""
import argparse
import json
from pathlib import Path
import sys

import numpy as np

from . import iface, images, maskgen, metrics, optim, scenesynth, tface
from .checkpoint import load_checkpoint
from .dataset import load_dataset
from .errors import ConfigError, InputDomainError, TrainingError
from .training import MASK_MODES, render_view, run_training

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
PRESET_NAMES = ("desk", "paper-tface", "paper-iface")

DEFAULTS = {
    "synth": dict(out=None, cameras=20, resolution=128, held_out_count=4, subject="superellipsoid", halos=True,
                  seed=0),
    "train": dict(data=None, out=None, branch=None, preset="desk", steps=None, lr_tensor=None, lr_decoder=None,
                  lr_decay=None, resolution=None, milestones=None, batch=None, q=None, weight_decay=None,
                  log_every=None, lambda_mask=None, alpha=None, beta=None, gamma=None, sparsity_exponent=None,
                  signed_sparsity=None, ce_foreground=None, mask_threshold=None, mask_mode=None, masks=None,
                  background=0.0, seed=0, workers=1),
    "render": dict(checkpoint=None, data=None, out=None, views="held-out", q=64, background=0.0, seed=0,
                   workers=1),
    "maskgen": dict(data=None, masks=None, out=None, erode=3, dilate=3, downsample=1, seed=0),
    "ensemble": dict(inputs=None, weights=list(metrics.DEFAULT_ENSEMBLE_WEIGHTS), out=None),
    "eval": dict(renders=None, data=None, reference=None, masks=None, out=None, method="render"),
}
REQUIRED = {"synth": ("out",), "train": ("data", "out"), "render": ("checkpoint", "data", "out"),
            "maskgen": ("out",), "ensemble": ("inputs", "out"), "eval": ("renders", "out")}


def _nonneg_float(s):
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {s}")
    return v


def build_parser():
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="tiface", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=S, help="JSON file with settings (flags override it)")
        sp.add_argument("--seed", type=int, default=S)
        return sp

    sp = common(sub.add_parser("synth", help="generate a synthetic multi-view dataset"))
    sp.add_argument("--out", default=S, help="dataset directory to create")
    sp.add_argument("--cameras", type=int, default=S, help="number of views (default 20)")
    sp.add_argument("--resolution", type=int, default=S, help="image size in pixels (default 128)")
    sp.add_argument("--held-out-count", type=int, default=S, help="held-out views (default 4)")
    sp.add_argument("--subject", choices=sorted(scenesynth.SUBJECTS), default=S)
    sp.add_argument("--no-halos", dest="halos", action="store_false", default=S)

    sp = common(sub.add_parser("train", help="train a T-Face or I-Face field"))
    sp.add_argument("--data", default=S)
    sp.add_argument("--out", default=S, help="run directory")
    sp.add_argument("--branch", choices=("tface", "iface"), default=S)
    sp.add_argument("--preset", choices=PRESET_NAMES, default=S)
    sp.add_argument("--steps", type=int, default=S)
    sp.add_argument("--lr-tensor", type=float, default=S)
    sp.add_argument("--lr-decoder", type=float, default=S)
    sp.add_argument("--lr-decay", type=float, default=S, help="lr ratio reached at the last step (1 = constant)")
    sp.add_argument("--resolution", type=int, default=S, help="initial grid resolution")
    sp.add_argument("--milestones", default=S, help="upsample schedule 'step:res,step:res,...'")
    sp.add_argument("--batch", type=int, nargs="+", default=S, help="rays per step, or MIN MAX TARGET_SAMPLES")
    sp.add_argument("--q", type=int, default=S, help="samples per ray")
    sp.add_argument("--weight-decay", type=float, default=S)
    sp.add_argument("--log-every", type=int, default=S)
    sp.add_argument("--lambda-mask", type=_nonneg_float, default=S)
    sp.add_argument("--alpha", type=_nonneg_float, default=S, help="regularizer weight (L1 or Eikonal)")
    sp.add_argument("--beta", type=_nonneg_float, default=S, help="mask loss weight")
    sp.add_argument("--gamma", type=_nonneg_float, default=S, help="TV (tface) or sparsity (iface) weight")
    sp.add_argument("--sparsity-exponent", type=_nonneg_float, default=S)
    sp.add_argument("--signed-sparsity", action="store_true", default=S)
    sp.add_argument("--no-ce-foreground", dest="ce_foreground", action="store_false", default=S)
    sp.add_argument("--mask-threshold", type=float, default=S)
    sp.add_argument("--mask-mode", default=S, help="tface: none|rgba|ce|l2, iface: none|rgba|bce")
    sp.add_argument("--masks", default=S, help="directory of 8-bit masks replacing the dataset's own")
    sp.add_argument("--background", type=float, default=S)
    sp.add_argument("--workers", type=int, default=S)

    sp = common(sub.add_parser("render", help="render views from a checkpoint"))
    sp.add_argument("--checkpoint", default=S)
    sp.add_argument("--data", default=S)
    sp.add_argument("--out", default=S)
    sp.add_argument("--views", default=S, help="'held-out', 'all' or comma-separated indices")
    sp.add_argument("--q", type=int, default=S)
    sp.add_argument("--background", type=float, default=S)
    sp.add_argument("--workers", type=int, default=S)

    sp = common(sub.add_parser("maskgen", help="trimaps and refined masks from coarse masks"))
    sp.add_argument("--data", default=S, help="dataset whose masks/ are the coarse masks")
    sp.add_argument("--masks", default=S, help="directory of coarse masks (instead of --data)")
    sp.add_argument("--out", default=S)
    sp.add_argument("--erode", type=int, default=S)
    sp.add_argument("--dilate", type=int, default=S)
    sp.add_argument("--downsample", type=int, default=S, help="process at 1/N resolution, then upsample")

    sp = sub.add_parser("ensemble", help="weighted blend of render directories")
    sp.add_argument("--config", default=S)
    sp.add_argument("--inputs", nargs="+", default=S)
    sp.add_argument("--weights", type=float, nargs="+", default=S)
    sp.add_argument("--out", default=S)

    sp = sub.add_parser("eval", help="PSNR/SSIM report for a render directory")
    sp.add_argument("--config", default=S)
    sp.add_argument("--renders", default=S)
    sp.add_argument("--data", default=S, help="dataset providing references and masks")
    sp.add_argument("--reference", default=S, help="directory of reference images (instead of --data)")
    sp.add_argument("--masks", default=S)
    sp.add_argument("--out", default=S)
    sp.add_argument("--method", default=S)
    return p


def resolve_config(command, given):
    """Merge defaults, the optional config file and explicit flags; reject unknown keys."""
    cfg = dict(DEFAULTS[command])
    path = given.pop("config", None)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        cfg.update(data)
    cfg.update(given)
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "", [])]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def _echo(out_dir, command, cfg, extra=None):
    rec = {"command": command, **cfg, **(extra or {})}
    (Path(out_dir) / "config.json").write_text(json.dumps(rec, indent=2, sort_keys=True, default=str) + "\n")


def _positive(cfg, *keys):
    for k in keys:
        if cfg.get(k) is not None and cfg[k] < 1:
            raise ConfigError(f"--{k.replace('_', '-')} must be >= 1")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(cfg):
    _positive(cfg, "resolution")
    if cfg["cameras"] < 2:
        raise ConfigError("--cameras must be at least 2 (a rig needs two views)")
    if not 0 <= cfg["held_out_count"] < cfg["cameras"]:
        raise ConfigError("--held-out-count must be in [0, cameras)")
    n, res = cfg["cameras"], cfg["resolution"]
    scene = scenesynth.default_scene(n, res, halos=cfg["halos"], seed=cfg["seed"], subject=cfg["subject"])
    held = scenesynth.default_held_out(n, cfg["held_out_count"]) if cfg["held_out_count"] else []
    out = Path(cfg["out"])
    scenesynth.export_dataset(scene, scene.rig, (res, res), out, held_out=held)
    _echo(out, "synth", cfg)
    print(f"synth: {n} views ({n - len(held)} train + {len(held)} held-out) at {res}x{res} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def parse_milestones(text):
    if isinstance(text, list):
        return [tuple(int(v) for v in m) for m in text]
    try:
        return [tuple(int(v) for v in item.split(":")) for item in str(text).split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigError(f"--milestones: expected 'step:res,...', got {text!r}") from exc


def resolve_schedule(cfg):
    """Branch and schedule from the preset plus any overrides."""
    preset, branch = cfg["preset"], cfg["branch"]
    if preset not in PRESET_NAMES:
        raise ConfigError(f"--preset must be one of {PRESET_NAMES}")
    implied = {"paper-tface": "tface", "paper-iface": "iface"}.get(preset)
    if implied and branch not in (None, implied):
        raise ConfigError(f"--preset {preset} trains the {implied} branch; drop --branch {branch}")
    branch = branch or implied
    if branch is None:
        raise ConfigError("--branch is required with --preset desk")
    if preset == "paper-tface":
        sch = optim.paper_tface_schedule()
    elif preset == "paper-iface":
        sch = optim.paper_iface_schedule()
    elif branch == "tface":
        sch = optim.desk_tface_schedule() if cfg["steps"] is None else optim.desk_tface_schedule(cfg["steps"])
    else:
        sch = optim.desk_iface_schedule() if cfg["steps"] is None else optim.desk_iface_schedule(cfg["steps"])
    d = sch.to_dict()
    overrides = {"steps": "total_steps", "lr_tensor": "lr_tensor", "lr_decoder": "lr_decoder",
                 "lr_decay": "lr_decay", "resolution": "init_resolution", "q": "q_count",
                 "weight_decay": "weight_decay", "log_every": "log_every"}
    for k, field in overrides.items():
        if cfg[k] is not None:
            d[field] = cfg[k]
    if cfg["milestones"] is not None:
        d["upsample_milestones"] = parse_milestones(cfg["milestones"])
    if cfg["batch"] is not None:
        b = cfg["batch"]
        b = [b] if isinstance(b, int) else list(b)
        if len(b) not in (1, 3):
            raise ConfigError("--batch takes one ray count or MIN MAX TARGET_SAMPLES")
        d["batch_rays"] = b[0] if len(b) == 1 else tuple(b)
    elif isinstance(d["batch_rays"], list):
        d["batch_rays"] = tuple(d["batch_rays"])
    try:
        sch = optim.TrainSchedule(**d)
    except InputDomainError as exc:
        raise ConfigError(f"invalid schedule: {exc}") from exc
    return branch, sch


def resolve_loss(cfg, branch):
    base = tface.tface_loss_config() if branch == "tface" else iface.iface_loss_config()
    d = dict(base.__dict__)
    for k, field in {"lambda_mask": "lambda_mask", "alpha": "alpha_reg", "beta": "beta_mask",
                     "gamma": "gamma_sparsity", "sparsity_exponent": "sparsity_exponent",
                     "signed_sparsity": "signed_sparsity", "ce_foreground": "ce_include_foreground",
                     "mask_threshold": "mask_threshold"}.items():
        if cfg[k] is not None:
            d[field] = cfg[k]
    try:
        return type(base)(**d)
    except InputDomainError as exc:
        raise ConfigError(str(exc)) from exc


def default_mask_mode(branch):
    return "l2" if branch == "tface" else "bce"


def prepare_train(cfg):
    """Validate a train config; returns ``(branch, schedule, loss, mask_mode, dataset)``."""
    branch, sch = resolve_schedule(cfg)
    loss = resolve_loss(cfg, branch)
    mode = cfg["mask_mode"] or default_mask_mode(branch)
    if mode not in MASK_MODES[branch]:
        raise ConfigError(f"--mask-mode {mode!r} invalid for {branch}; choose from {MASK_MODES[branch]}")
    if cfg["workers"] < 1:
        raise ConfigError("--workers must be >= 1")
    if not 0.0 <= cfg["background"] <= 1.0:
        raise ConfigError("--background must lie in [0, 1]")
    data = Path(cfg["data"])
    if not (data / "poses.txt").exists():
        raise ConfigError(f"--data {data}: no poses.txt found")
    if cfg["masks"] is not None and not Path(cfg["masks"]).is_dir():
        raise ConfigError(f"--masks {cfg['masks']}: not a directory")
    try:
        ds = load_dataset(data, masks_dir=cfg["masks"])
    except (OSError, InputDomainError) as exc:
        raise ConfigError(f"--data {data}: {exc}") from exc
    if not ds.has_masks and mode != "none":
        raise ConfigError(f"dataset has no masks but --mask-mode {mode} needs them: pass --masks DIR "
                          f"or use --mask-mode none")
    return branch, sch, loss, mode, ds


def cmd_train(cfg):
    branch, sch, loss, mode, ds = prepare_train(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, "train", cfg, {"resolved_branch": branch, "resolved_mask_mode": mode, "schedule": sch.to_dict(),
                              "loss": dict(loss.__dict__)})
    res = run_training(branch, ds, sch, loss, seed=cfg["seed"], mask_mode=mode, background=cfg["background"],
                       workers=cfg["workers"], log_path=out / "loss_log.csv", checkpoint_path=out / "checkpoint.npz")
    last = res.log[-1] if res.log else None
    msg = f"train: {branch} {sch.total_steps} steps -> {out / 'checkpoint.npz'}"
    if last:
        msg += f" (final total loss {last[1]:.6g})"
    print(msg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def _view_indices(spec, ds):
    if spec == "held-out":
        return list(ds.held_out) or list(range(len(ds.cameras)))
    if spec == "all":
        return list(range(len(ds.cameras)))
    try:
        idx = [int(v) for v in str(spec).split(",")]
    except ValueError as exc:
        raise ConfigError(f"--views: expected 'held-out', 'all' or indices, got {spec!r}") from exc
    if any(i < 0 or i >= len(ds.cameras) for i in idx):
        raise ConfigError(f"--views: index out of range (dataset has {len(ds.cameras)} views)")
    return idx


def _render_jobs(field, ds, idx, q, background, workers):
    from .parallel import pmap

    return pmap(lambda i: render_view(field, ds.cameras[i], q, background), idx, workers)


def cmd_render(cfg):
    _positive(cfg, "q", "workers")
    if not Path(cfg["checkpoint"]).is_file():
        raise ConfigError(f"--checkpoint {cfg['checkpoint']}: no such file")
    try:
        field, _, header = load_checkpoint(cfg["checkpoint"])
        ds = load_dataset(cfg["data"])
    except (OSError, InputDomainError, KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    idx = _view_indices(cfg["views"], ds)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, "render", cfg, {"checkpoint_kind": header.get("kind")})
    results = _render_jobs(field, ds, idx, cfg["q"], cfg["background"], cfg["workers"])
    for i, (rgb, op, depth, normal) in zip(idx, results):
        name = ds.names[i]
        images.write_rgb(out / f"{name}_rgb.png", rgb)
        images.write_mask(out / f"{name}_opacity.png", op)
        if normal is not None:
            images.write_depth16(out / f"{name}_depth.png", np.where(op > 1e-6, depth, 0.0))
            images.write_normals(out / f"{name}_normal.png", normal)
    print(f"render: {len(idx)} views -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# maskgen
# ---------------------------------------------------------------------------

def cmd_maskgen(cfg):
    if cfg["erode"] < 0 or cfg["dilate"] < 0:
        raise ConfigError("--erode/--dilate must be >= 0")
    _positive(cfg, "downsample")
    if (cfg["data"] is None) == (cfg["masks"] is None):
        raise ConfigError("pass exactly one of --data or --masks")
    src = Path(cfg["masks"]) if cfg["masks"] is not None else Path(cfg["data"]) / "masks"
    if not src.is_dir():
        raise ConfigError(f"mask directory {src} not found")
    files = sorted(src.glob("*.png"))
    if not files:
        raise ConfigError(f"no .png masks in {src}")
    out = Path(cfg["out"])
    (out / "trimaps").mkdir(parents=True, exist_ok=True)
    _echo(out, "maskgen", cfg)
    f = cfg["downsample"]
    for path in files:
        coarse = maskgen.AlphaMask(images.read_mask(path))
        h, w = coarse.values.shape
        work = maskgen.resize_mask(coarse, max(1, w // f), max(1, h // f)) if f > 1 else coarse
        work = maskgen.resize_mask(work, w, h) if f > 1 else work
        tri = maskgen.trimap_from_mask(work, cfg["erode"], cfg["dilate"])
        refined = maskgen.refine_trimap(np.zeros((h, w)), tri)
        images.write_trimap(out / "trimaps" / path.name, tri.labels)
        images.write_mask(out / path.name, refined.values)
    print(f"maskgen: {len(files)} masks -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ensemble / eval
# ---------------------------------------------------------------------------

def cmd_ensemble(cfg):
    inputs = [Path(p) for p in cfg["inputs"]]
    weights = [float(w) for w in cfg["weights"]]
    if len(weights) != len(inputs):
        raise ConfigError(f"{len(inputs)} inputs but {len(weights)} weights")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError(f"--weights must sum to 1 (got {sum(weights)!r})")
    for p in inputs:
        if not p.is_dir():
            raise ConfigError(f"input {p} is not a directory")
    names = sorted(set.intersection(*[{f.name for f in p.glob("*_rgb.png")} for p in inputs]))
    if not names:
        raise ConfigError("inputs share no *_rgb.png renders")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, "ensemble", cfg)
    for name in names:
        blend = metrics.ensemble([images.read_rgb(p / name) for p in inputs], weights)
        images.write_rgb(out / name, blend)
    print(f"ensemble: {len(names)} views with weights {weights} -> {out}")
    return EXIT_OK


def _view_name(path):
    stem = path.stem
    return stem[:-4] if stem.endswith("_rgb") else stem


def cmd_eval(cfg):
    renders = Path(cfg["renders"])
    if not renders.is_dir():
        raise ConfigError(f"--renders {renders}: not a directory")
    if (cfg["data"] is None) == (cfg["reference"] is None):
        raise ConfigError("pass exactly one of --data or --reference")
    files = sorted(renders.glob("*_rgb.png")) or sorted(p for p in renders.glob("*.png"))
    if not files:
        raise ConfigError(f"no renders in {renders}")
    refs, masks = {}, {}
    if cfg["data"] is not None:
        try:
            ds = load_dataset(cfg["data"], masks_dir=cfg["masks"])
        except (OSError, InputDomainError) as exc:
            raise ConfigError(f"--data: {exc}") from exc
        for i, n in enumerate(ds.names):
            refs[n] = ds.images[i]
            if ds.has_masks:
                masks[n] = ds.masks[i]
    else:
        ref_dir = Path(cfg["reference"])
        for f in files:
            n = _view_name(f)
            for cand in (ref_dir / f.name, ref_dir / f"{n}.png", ref_dir / f"{n}_rgb.png"):
                if cand.exists():
                    refs[n] = images.read_rgb(cand)
                    break
        if cfg["masks"] is not None:
            for n in refs:
                mp = Path(cfg["masks"]) / f"{n}.png"
                if mp.exists():
                    masks[n] = images.read_mask(mp)
    missing = [_view_name(f) for f in files if _view_name(f) not in refs]
    if missing:
        raise ConfigError(f"no reference for views {missing}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, "eval", cfg)
    rep = metrics.EvalReport(cfg["method"])
    for f in files:
        n = _view_name(f)
        rep.add(n, images.read_rgb(f), refs[n], masks.get(n))
    rep.write_csv(out / "report.csv")
    rep.write_json(out / "summary.json")
    m = rep.means()
    print(f"eval: {len(files)} views  PSNR {m['psnr_full']:.2f}  SSIM {m['ssim_full']:.4f}  "
          f"masked PSNR {m['psnr_masked']:.2f}  masked SSIM {m['ssim_masked']:.4f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "maskgen": cmd_maskgen,
            "ensemble": cmd_ensemble, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    try:
        cfg = resolve_config(command, args)
        return COMMANDS[command](cfg)
    except (ConfigError, InputDomainError) as exc:
        print(f"tiface {command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"tiface {command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
