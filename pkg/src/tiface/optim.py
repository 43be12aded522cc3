"""Adam/AdamW on named parameter blocks, learning-rate schedule, batch sizing and presets."""
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np

from .errors import InputDomainError, TrainingError


@dataclass
class AdamState:
    first_moment: dict = dc_field(default_factory=dict)
    second_moment: dict = dc_field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    lr: float = 1e-3
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputDomainError("betas must lie in [0, 1)")
        if self.step_count < 0:
            raise InputDomainError("step_count must be >= 0")

    def reset(self, names):
        """Drop the moments of the given blocks (used after a block changes shape)."""
        for k in names:
            self.first_moment.pop(k, None)
            self.second_moment.pop(k, None)


def _per_block(value, name, default):
    if isinstance(value, dict):
        return value.get(name, default)
    return value if value is not None else default


def adam_step(state, params, grads, lr=None, weight_decay=None):
    """One bias-corrected Adam step, updating ``params`` in place.

    ``lr`` and ``weight_decay`` may be scalars or per-block dicts and default
    to the values stored on ``state``. Weight decay is decoupled (AdamW).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in block {name!r} at step {state.step_count}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        blr = _per_block(lr, name, state.lr)
        wd = _per_block(weight_decay, name, state.weight_decay)
        m = state.first_moment.get(name)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        state.first_moment[name] = m
        if wd:
            p *= 1.0 - blr * wd
        p -= blr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class TrainSchedule:
    total_steps: int
    lr_tensor: float
    lr_decoder: float
    lr_decay: float = 0.1
    init_resolution: int = 32
    upsample_milestones: list = dc_field(default_factory=list)
    batch_rays: object = 1024
    q_count: int = 64
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    log_every: int = 50
    reg_warmup: int = 0
    weight_threshold: float = 1e-6  # T-Face appearance is skipped below this weight; init weights are ~4e-5

    def __post_init__(self):
        if self.total_steps < 0:
            raise InputDomainError("total_steps must be >= 0")
        self.upsample_milestones = [tuple(int(v) for v in m) for m in self.upsample_milestones]
        steps = [s for s, _ in self.upsample_milestones]
        res = [self.init_resolution] + [r for _, r in self.upsample_milestones]
        if any(b <= a for a, b in zip(steps, steps[1:])) or any(b <= a for a, b in zip(res, res[1:])):
            raise InputDomainError("milestones must be strictly increasing in step and resolution")
        if isinstance(self.batch_rays, (list, tuple)):
            self.batch_rays = tuple(int(v) for v in self.batch_rays)
            if len(self.batch_rays) != 3 or self.batch_rays[0] > self.batch_rays[1]:
                raise InputDomainError("dynamic batch must be (min, max, target_samples) with min <= max")
        elif int(self.batch_rays) < 1:
            raise InputDomainError("batch_rays must be >= 1")
        if self.optimizer not in ("adam", "adamw"):
            raise InputDomainError(f"unknown optimizer {self.optimizer!r}")
        if not (self.lr_tensor > 0 and self.lr_decoder > 0):
            raise InputDomainError("learning rates must be positive")

    @property
    def dynamic(self):
        return isinstance(self.batch_rays, tuple)

    def initial_batch(self):
        if self.dynamic:
            lo, hi, target = self.batch_rays
            return int(np.clip(target // self.q_count, lo, hi))
        return int(self.batch_rays)

    def to_dict(self):
        d = asdict(self)
        d["upsample_milestones"] = [list(m) for m in self.upsample_milestones]
        d["batch_rays"] = list(self.batch_rays) if self.dynamic else self.batch_rays
        return d


def lr_at(schedule, step):
    """Exponentially decayed ``(lr_tensor, lr_decoder)`` at ``step``."""
    if not 0 <= step <= schedule.total_steps:
        raise InputDomainError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.total_steps == 0:
        return schedule.lr_tensor, schedule.lr_decoder
    f = schedule.lr_decay ** (step / schedule.total_steps)
    return schedule.lr_tensor * f, schedule.lr_decoder * f


def dynamic_batch(previous_batch, measured_samples_per_ray, target_total_samples, bounds=(256, 8192)):
    lo, hi = bounds
    if lo > hi:
        raise InputDomainError("batch bounds must satisfy min <= max")
    if measured_samples_per_ray <= 0:
        return int(hi)
    return int(round(min(max(target_total_samples / measured_samples_per_ray, lo), hi)))


def upsample_resolutions(n_init, n_final, count):
    """Per-axis resolutions with voxel counts spaced log-uniformly from n_init^3 to n_final^3."""
    v = np.exp(np.linspace(np.log(n_init ** 3), np.log(n_final ** 3), count + 1))
    return [int(round(x ** (1.0 / 3.0))) for x in v[1:]]


def scaled_milestones(total_steps, reference_steps=(2000, 3000, 4000, 5500, 7000), reference_total=50000):
    return [int(round(s * total_steps / reference_total)) for s in reference_steps]


PAPER_TFACE_STEPS = (2000, 3000, 4000, 5500, 7000)


def paper_tface_schedule():
    res = upsample_resolutions(128, 300, len(PAPER_TFACE_STEPS))
    return TrainSchedule(
        total_steps=50000, lr_tensor=0.02, lr_decoder=0.001, lr_decay=0.1, init_resolution=128,
        upsample_milestones=list(zip(PAPER_TFACE_STEPS, res)), batch_rays=4096, q_count=64,
        reg_warmup=PAPER_TFACE_STEPS[0],
        optimizer="adam", beta1=0.9, beta2=0.99, weight_decay=0.0,
    )


def paper_iface_schedule():
    return TrainSchedule(
        total_steps=20000, lr_tensor=0.01, lr_decoder=0.01, lr_decay=0.1, init_resolution=96,
        batch_rays=(256, 8192, 1 << 18), q_count=64, optimizer="adamw", beta1=0.9, beta2=0.99,
        weight_decay=1e-2,
    )


def desk_tface_schedule(total_steps=2000):
    steps = scaled_milestones(total_steps)
    res = upsample_resolutions(32, 96, len(steps))
    # very short runs collapse neighbouring milestones; keep the last resolution per step
    ms = {}
    for s, r in zip(steps, res):
        if 0 < s < total_steps:
            ms[s] = r
    return TrainSchedule(
        total_steps=total_steps, lr_tensor=0.02, lr_decoder=0.001, lr_decay=0.1, init_resolution=32,
        upsample_milestones=sorted(ms.items()), reg_warmup=min(ms) if ms else 0, batch_rays=1024, q_count=64, optimizer="adam",
    )


def desk_iface_schedule(total_steps=1500):
    return TrainSchedule(
        total_steps=total_steps, lr_tensor=0.01, lr_decoder=0.01, lr_decay=0.1, init_resolution=48,
        batch_rays=(256, 8192, 1 << 12), q_count=64, optimizer="adamw", weight_decay=1e-2,
    )


PRESETS = {
    ("paper-tface", "tface"): paper_tface_schedule,
    ("paper-iface", "iface"): paper_iface_schedule,
    ("desk", "tface"): desk_tface_schedule,
    ("desk", "iface"): desk_iface_schedule,
}
