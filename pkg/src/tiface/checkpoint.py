"""Versioned ``.npz`` checkpoints holding a field and its optimizer state."""
import json

import numpy as np

from . import iface, tface
from .errors import InputDomainError
from .npzio import save_npz
from .optim import AdamState


def save_checkpoint(path, field, state=None, extra=None):
    if isinstance(field, tface.VMField):
        arrays, header = tface.field_to_arrays(field)
    else:
        arrays, header = iface.field_to_arrays(field)
    if state is not None:
        for k, v in state.first_moment.items():
            arrays[f"adam_m/{k}"] = v
        for k, v in state.second_moment.items():
            arrays[f"adam_v/{k}"] = v
        header["adam"] = {"step_count": state.step_count, "beta1": state.beta1, "beta2": state.beta2,
                          "eps": state.eps, "lr": state.lr, "weight_decay": state.weight_decay}
    header["extra"] = extra or {}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    save_npz(path, **arrays)


def load_checkpoint(path):
    """Returns ``(field, state_or_None, header)``."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    if "header" not in arrays:
        raise InputDomainError(f"{path}: not a tiface checkpoint")
    header = json.loads(arrays.pop("header").tobytes().decode())
    kind = header.get("kind")
    if kind == "vmfield":
        field = tface.field_from_arrays(arrays, header)
    elif kind == "sdffield":
        field = iface.field_from_arrays(arrays, header)
    else:
        raise InputDomainError(f"{path}: unknown checkpoint kind {kind!r}")
    state = None
    if "adam" in header:
        a = header["adam"]
        state = AdamState(
            {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
            {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")},
            a["step_count"], a["beta1"], a["beta2"], a["eps"], a["lr"], a["weight_decay"],
        )
    return field, state, header
