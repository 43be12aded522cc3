"""Coarse-mask processing: resizing, morphology, trimaps and harmonic refinement of the unknown band."""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import spsolve

from .errors import InputDomainError

BACKGROUND, UNKNOWN, FOREGROUND = 0, 1, 2


@dataclass
class AlphaMask:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputDomainError("mask must be 2-D")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise InputDomainError("mask values must lie in [0, 1]")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass
class Trimap:
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if not np.isin(self.labels, (BACKGROUND, UNKNOWN, FOREGROUND)).all():
            raise InputDomainError("trimap labels must be background/unknown/foreground")


def _values(mask):
    return mask.values if isinstance(mask, AlphaMask) else AlphaMask(mask).values


def _axis_weights(n_in, n_out):
    # half-pixel centers, edge-clamped
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(x).astype(np.int64), max(n_in - 2, 0))
    f = x - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, f


def resize_mask(mask, new_w, new_h):
    """Bilinear resampling with pixel-center alignment."""
    if new_w < 1 or new_h < 1:
        raise InputDomainError("target size must be at least 1x1")
    v = _values(mask)
    h, w = v.shape
    if (new_w, new_h) == (w, h):
        return AlphaMask(v.copy())
    y0, y1, fy = _axis_weights(h, new_h)
    x0, x1, fx = _axis_weights(w, new_w)
    top = v[y0][:, x0] * (1.0 - fx) + v[y0][:, x1] * fx
    bot = v[y1][:, x0] * (1.0 - fx) + v[y1][:, x1] * fx
    out = top * (1.0 - fy)[:, None] + bot * fy[:, None]
    return AlphaMask(np.clip(out, 0.0, 1.0))


def binarize(mask, threshold=0.5):
    if not 0.0 <= threshold <= 1.0:
        raise InputDomainError("threshold must lie in [0, 1]")
    return AlphaMask((_values(mask) >= threshold).astype(np.float64))


def disc(radius):
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def _morph(mask, radius, op):
    if radius < 0:
        raise InputDomainError("radius must be >= 0")
    v = _values(mask)
    if radius == 0:
        return AlphaMask(v.copy())
    out = op(v, footprint=disc(radius), mode="nearest")
    return AlphaMask(out)


def erode(mask, radius):
    return _morph(mask, radius, ndimage.minimum_filter)


def dilate(mask, radius):
    return _morph(mask, radius, ndimage.maximum_filter)


def trimap_from_mask(mask, erode_r=3, dilate_r=3):
    """Foreground = eroded mask, background = outside the dilated mask, unknown = the rest."""
    m = binarize(mask)
    fg = erode(m, erode_r).values >= 0.5
    inside = dilate(m, dilate_r).values >= 0.5
    labels = np.full(m.values.shape, UNKNOWN, dtype=np.int8)
    labels[fg] = FOREGROUND
    labels[~inside] = BACKGROUND
    return Trimap(labels)


def refine_trimap(image, trimap, tol=1e-4):
    """Harmonic interpolation of the known 0/1 alphas over the unknown band.

    The discrete Laplace system on unknown pixels (4-neighbour stencil,
    reflecting image borders) is solved directly, which leaves a residual far
    below ``tol``; the check is kept as a guard. Unknown regions that touch no
    known pixel get 0.5.
    """
    labels = trimap.labels if isinstance(trimap, Trimap) else Trimap(trimap).labels
    if np.shape(image)[:2] != labels.shape:
        raise InputDomainError("image and trimap dimensions differ")
    alpha = (labels == FOREGROUND).astype(np.float64)
    unk = labels == UNKNOWN
    if not unk.any():
        return AlphaMask(alpha)
    h, w = labels.shape
    comp, n_comp = ndimage.label(unk)
    known_adj = ndimage.binary_dilation(~unk) & unk
    seeded = np.zeros(n_comp + 1, dtype=bool)
    seeded[np.unique(comp[known_adj])] = True
    seeded[0] = False
    orphan = unk & ~seeded[comp]
    alpha[orphan] = 0.5
    solve = unk & ~orphan
    if not solve.any():
        return AlphaMask(alpha)

    idx = -np.ones((h, w), dtype=np.int64)
    ys, xs = np.nonzero(solve)
    n = ys.size
    idx[ys, xs] = np.arange(n)
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    deg = np.zeros(n)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ys + dy, xs + dx
        ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        deg += ok
        k = np.flatnonzero(ok)
        nb = idx[ny[k], nx[k]]
        inner = nb >= 0
        rows.append(k[inner])
        cols.append(nb[inner])
        vals.append(-np.ones(int(inner.sum())))
        ext = k[~inner]
        np.add.at(rhs, ext, alpha[ny[ext], nx[ext]])
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(deg)
    a = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    x = spsolve(a.tocsc(), rhs)
    resid = np.max(np.abs(a @ x - rhs) / deg)
    if resid >= tol:
        raise InputDomainError(f"harmonic solve did not converge (residual {resid:.3g})")
    alpha[ys, xs] = np.clip(x, 0.0, 1.0)
    return AlphaMask(alpha)
