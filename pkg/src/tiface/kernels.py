"""Hot inner loops: grid interpolation, its adjoint, and alpha compositing.

Every kernel exists twice: a numba version (``_nb_*``) and a pure-numpy
version (``_np_*``). The public names are bound to one of the two at import
time according to :mod:`tiface._accel`. Grid coordinates are continuous
vertex coordinates, i.e. ``0`` is the first vertex and ``N - 1`` the last;
callers are responsible for masking points outside the grid.
"""
import numpy as np

from ._accel import USE_NUMBA, HAVE_NUMBA, njit


def _cell(u, n):
    i0 = np.clip(np.floor(u).astype(np.int64), 0, n - 2)
    return i0, u - i0


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_linear_gather(line, u):
    i0, f = _cell(u, line.shape[1])
    return (line[:, i0] * (1.0 - f) + line[:, i0 + 1] * f).T


def _np_linear_scatter(grad, u, out):
    rank, n = out.shape
    i0, f = _cell(u, n)
    offs = (np.arange(rank) * n)[None, :]
    idx = np.concatenate([i0[:, None] + offs, i0[:, None] + 1 + offs]).ravel()
    w = np.concatenate([grad * (1.0 - f)[:, None], grad * f[:, None]]).ravel()
    out += np.bincount(idx, weights=w, minlength=rank * n).reshape(rank, n)


def _np_bilinear_gather(plane, a, b):
    i0, fa = _cell(a, plane.shape[1])
    j0, fb = _cell(b, plane.shape[2])
    p00 = plane[:, i0, j0]
    p01 = plane[:, i0, j0 + 1]
    p10 = plane[:, i0 + 1, j0]
    p11 = plane[:, i0 + 1, j0 + 1]
    top = p00 * (1.0 - fb) + p01 * fb
    bot = p10 * (1.0 - fb) + p11 * fb
    return (top * (1.0 - fa) + bot * fa).T


def _np_bilinear_scatter(grad, a, b, out):
    rank, h, w = out.shape
    i0, fa = _cell(a, h)
    j0, fb = _cell(b, w)
    base = (i0 * w + j0)[:, None] + (np.arange(rank) * (h * w))[None, :]
    idx = np.concatenate([base, base + 1, base + w, base + w + 1]).ravel()
    wts = np.concatenate([
        grad * ((1.0 - fa) * (1.0 - fb))[:, None],
        grad * ((1.0 - fa) * fb)[:, None],
        grad * (fa * (1.0 - fb))[:, None],
        grad * (fa * fb)[:, None],
    ]).ravel()
    out += np.bincount(idx, weights=wts, minlength=rank * h * w).reshape(rank, h, w)


def _np_corner_weights(p, shape):
    i0, fx = _cell(p[:, 0], shape[0])
    j0, fy = _cell(p[:, 1], shape[1])
    k0, fz = _cell(p[:, 2], shape[2])
    return i0, j0, k0, fx, fy, fz


def _np_trilinear_gather(grid, p):
    i0, j0, k0, fx, fy, fz = _np_corner_weights(p, grid.shape)
    out = np.zeros((p.shape[0], grid.shape[3]))
    for di in (0, 1):
        wx = fx if di else 1.0 - fx
        for dj in (0, 1):
            wy = fy if dj else 1.0 - fy
            for dk in (0, 1):
                wz = fz if dk else 1.0 - fz
                out += grid[i0 + di, j0 + dj, k0 + dk] * (wx * wy * wz)[:, None]
    return out


def _np_trilinear_scatter(grad, p, out):
    nx, ny, nz, nc = out.shape
    i0, j0, k0, fx, fy, fz = _np_corner_weights(p, out.shape)
    flat = out.reshape(-1, nc)
    chans = np.arange(nc)[None, :]
    idx, wts = [], []
    for di in (0, 1):
        wx = fx if di else 1.0 - fx
        for dj in (0, 1):
            wy = fy if dj else 1.0 - fy
            for dk in (0, 1):
                wz = fz if dk else 1.0 - fz
                cell = ((i0 + di) * ny + (j0 + dj)) * nz + (k0 + dk)
                idx.append(cell[:, None] * nc + chans)
                wts.append(grad * (wx * wy * wz)[:, None])
    flat += np.bincount(
        np.concatenate(idx).ravel(), weights=np.concatenate(wts).ravel(), minlength=flat.size
    ).reshape(flat.shape)


def _np_trilinear_grad(grid, p):
    """Spatial derivative of the trilinear interpolant of a scalar grid (grid units)."""
    i0, j0, k0, fx, fy, fz = _np_corner_weights(p, grid.shape)
    c = {}
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                c[di, dj, dk] = grid[i0 + di, j0 + dj, k0 + dk]
    gx = np.zeros(p.shape[0])
    gy = np.zeros(p.shape[0])
    gz = np.zeros(p.shape[0])
    for dj in (0, 1):
        wy = fy if dj else 1.0 - fy
        for dk in (0, 1):
            wz = fz if dk else 1.0 - fz
            gx += (c[1, dj, dk] - c[0, dj, dk]) * wy * wz
    for di in (0, 1):
        wx = fx if di else 1.0 - fx
        for dk in (0, 1):
            wz = fz if dk else 1.0 - fz
            gy += (c[di, 1, dk] - c[di, 0, dk]) * wx * wz
    for di in (0, 1):
        wx = fx if di else 1.0 - fx
        for dj in (0, 1):
            wy = fy if dj else 1.0 - fy
            gz += (c[di, dj, 1] - c[di, dj, 0]) * wx * wy
    return np.stack([gx, gy, gz], axis=1)


def _np_trilinear_grad_scatter(grad, p, out):
    """Adjoint of :func:`_np_trilinear_grad`: accumulate ``grad . d(grad d)/d(vertex)``."""
    nx, ny, nz = out.shape
    i0, j0, k0, fx, fy, fz = _np_corner_weights(p, out.shape)
    gx, gy, gz = grad[:, 0], grad[:, 1], grad[:, 2]
    idx, wts = [], []
    for di in (0, 1):
        sx = 1.0 if di else -1.0
        wx = fx if di else 1.0 - fx
        for dj in (0, 1):
            sy = 1.0 if dj else -1.0
            wy = fy if dj else 1.0 - fy
            for dk in (0, 1):
                sz = 1.0 if dk else -1.0
                wz = fz if dk else 1.0 - fz
                idx.append(((i0 + di) * ny + (j0 + dj)) * nz + (k0 + dk))
                wts.append(gx * sx * wy * wz + gy * sy * wx * wz + gz * sz * wx * wy)
    out += np.bincount(
        np.concatenate(idx), weights=np.concatenate(wts), minlength=out.size
    ).reshape(out.shape)


def _np_composite_forward(alpha):
    """Return ``(weights, transmittance)`` for per-sample alphas of shape (n, Q)."""
    trans = np.ones_like(alpha)
    if alpha.shape[1] > 1:
        trans[:, 1:] = np.cumprod(1.0 - alpha[:, :-1], axis=1)
    return alpha * trans, trans


def _np_composite_backward(alpha, trans, e):
    """Gradient w.r.t. alpha of ``sum_q w_q e_q``.

    Uses the suffix recursion ``R_k = a_{k+1} e_{k+1} + (1 - a_{k+1}) R_{k+1}``
    so no division by transmittance is needed.
    """
    n, q = alpha.shape
    g = np.empty_like(alpha)
    rest = np.zeros(n, dtype=alpha.dtype)
    for k in range(q - 1, -1, -1):
        g[:, k] = trans[:, k] * (e[:, k] - rest)
        rest = alpha[:, k] * e[:, k] + (1.0 - alpha[:, k]) * rest
    return g


def _np_vm_mode_gather(line, plane, ua, ub, uc):
    return _np_linear_gather(line, ua) * _np_bilinear_gather(plane, ub, uc)


def _np_vm_mode_scatter(line, plane, ua, ub, uc, grad, g_line, g_plane):
    """Adjoint of :func:`vm_mode_gather` for both factors (values are recomputed)."""
    lv = _np_linear_gather(line, ua)
    pv = _np_bilinear_gather(plane, ub, uc)
    _np_linear_scatter(grad * pv, ua, g_line)
    _np_bilinear_scatter(grad * lv, ub, uc, g_plane)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _nb_idx(u, n):
    i = int(np.floor(u))
    if i < 0:
        i = 0
    elif i > n - 2:
        i = n - 2
    return i, u - i


@njit(cache=True, nogil=True)
def _nb_linear_gather(line, u):
    rank, n = line.shape
    out = np.empty((u.shape[0], rank), dtype=line.dtype)
    for p in range(u.shape[0]):
        i, f = _nb_idx(u[p], n)
        for r in range(rank):
            out[p, r] = line[r, i] * (1.0 - f) + line[r, i + 1] * f
    return out


@njit(cache=True, nogil=True)
def _nb_linear_scatter(grad, u, out):
    rank, n = out.shape
    for p in range(u.shape[0]):
        i, f = _nb_idx(u[p], n)
        for r in range(rank):
            out[r, i] += grad[p, r] * (1.0 - f)
            out[r, i + 1] += grad[p, r] * f


@njit(cache=True, nogil=True)
def _nb_bilinear_gather(plane, a, b):
    rank, h, w = plane.shape
    out = np.empty((a.shape[0], rank), dtype=plane.dtype)
    for p in range(a.shape[0]):
        i, fa = _nb_idx(a[p], h)
        j, fb = _nb_idx(b[p], w)
        w00 = (1.0 - fa) * (1.0 - fb)
        w01 = (1.0 - fa) * fb
        w10 = fa * (1.0 - fb)
        w11 = fa * fb
        for r in range(rank):
            out[p, r] = (plane[r, i, j] * w00 + plane[r, i, j + 1] * w01
                         + plane[r, i + 1, j] * w10 + plane[r, i + 1, j + 1] * w11)
    return out


@njit(cache=True, nogil=True)
def _nb_bilinear_scatter(grad, a, b, out):
    rank, h, w = out.shape
    for p in range(a.shape[0]):
        i, fa = _nb_idx(a[p], h)
        j, fb = _nb_idx(b[p], w)
        w00 = (1.0 - fa) * (1.0 - fb)
        w01 = (1.0 - fa) * fb
        w10 = fa * (1.0 - fb)
        w11 = fa * fb
        for r in range(rank):
            g = grad[p, r]
            out[r, i, j] += g * w00
            out[r, i, j + 1] += g * w01
            out[r, i + 1, j] += g * w10
            out[r, i + 1, j + 1] += g * w11


@njit(cache=True, nogil=True)
def _nb_trilinear_gather(grid, pts):
    nx, ny, nz, nc = grid.shape
    out = np.zeros((pts.shape[0], nc), dtype=grid.dtype)
    for p in range(pts.shape[0]):
        i, fx = _nb_idx(pts[p, 0], nx)
        j, fy = _nb_idx(pts[p, 1], ny)
        k, fz = _nb_idx(pts[p, 2], nz)
        for di in range(2):
            wx = fx if di == 1 else 1.0 - fx
            for dj in range(2):
                wy = fy if dj == 1 else 1.0 - fy
                for dk in range(2):
                    wz = fz if dk == 1 else 1.0 - fz
                    wt = wx * wy * wz
                    for c in range(nc):
                        out[p, c] += grid[i + di, j + dj, k + dk, c] * wt
    return out


@njit(cache=True, nogil=True)
def _nb_trilinear_scatter(grad, pts, out):
    nx, ny, nz, nc = out.shape
    for p in range(pts.shape[0]):
        i, fx = _nb_idx(pts[p, 0], nx)
        j, fy = _nb_idx(pts[p, 1], ny)
        k, fz = _nb_idx(pts[p, 2], nz)
        for di in range(2):
            wx = fx if di == 1 else 1.0 - fx
            for dj in range(2):
                wy = fy if dj == 1 else 1.0 - fy
                for dk in range(2):
                    wz = fz if dk == 1 else 1.0 - fz
                    wt = wx * wy * wz
                    for c in range(nc):
                        out[i + di, j + dj, k + dk, c] += grad[p, c] * wt


@njit(cache=True, nogil=True)
def _nb_trilinear_grad(grid, pts):
    nx, ny, nz = grid.shape
    out = np.zeros((pts.shape[0], 3), dtype=grid.dtype)
    for p in range(pts.shape[0]):
        i, fx = _nb_idx(pts[p, 0], nx)
        j, fy = _nb_idx(pts[p, 1], ny)
        k, fz = _nb_idx(pts[p, 2], nz)
        for di in range(2):
            sx = 1.0 if di == 1 else -1.0
            wx = fx if di == 1 else 1.0 - fx
            for dj in range(2):
                sy = 1.0 if dj == 1 else -1.0
                wy = fy if dj == 1 else 1.0 - fy
                for dk in range(2):
                    sz = 1.0 if dk == 1 else -1.0
                    wz = fz if dk == 1 else 1.0 - fz
                    v = grid[i + di, j + dj, k + dk]
                    out[p, 0] += v * sx * wy * wz
                    out[p, 1] += v * sy * wx * wz
                    out[p, 2] += v * sz * wx * wy
    return out


@njit(cache=True, nogil=True)
def _nb_trilinear_grad_scatter(grad, pts, out):
    nx, ny, nz = out.shape
    for p in range(pts.shape[0]):
        i, fx = _nb_idx(pts[p, 0], nx)
        j, fy = _nb_idx(pts[p, 1], ny)
        k, fz = _nb_idx(pts[p, 2], nz)
        gx = grad[p, 0]
        gy = grad[p, 1]
        gz = grad[p, 2]
        for di in range(2):
            sx = 1.0 if di == 1 else -1.0
            wx = fx if di == 1 else 1.0 - fx
            for dj in range(2):
                sy = 1.0 if dj == 1 else -1.0
                wy = fy if dj == 1 else 1.0 - fy
                for dk in range(2):
                    sz = 1.0 if dk == 1 else -1.0
                    wz = fz if dk == 1 else 1.0 - fz
                    out[i + di, j + dj, k + dk] += gx * sx * wy * wz + gy * sy * wx * wz + gz * sz * wx * wy


@njit(cache=True, nogil=True)
def _nb_composite_forward(alpha):
    n, q = alpha.shape
    weights = np.empty_like(alpha)
    trans = np.empty_like(alpha)
    for r in range(n):
        t = 1.0
        for k in range(q):
            trans[r, k] = t
            weights[r, k] = alpha[r, k] * t
            t *= 1.0 - alpha[r, k]
    return weights, trans


@njit(cache=True, nogil=True)
def _nb_composite_backward(alpha, trans, e):
    n, q = alpha.shape
    g = np.empty_like(alpha)
    for r in range(n):
        rest = 0.0
        for k in range(q - 1, -1, -1):
            g[r, k] = trans[r, k] * (e[r, k] - rest)
            rest = alpha[r, k] * e[r, k] + (1.0 - alpha[r, k]) * rest
    return g


@njit(cache=True, nogil=True)
def _nb_vm_mode_gather(line, plane, ua, ub, uc):
    rank, n = line.shape
    _, h, w = plane.shape
    out = np.empty((ua.shape[0], rank), dtype=line.dtype)
    for p in range(ua.shape[0]):
        k, f = _nb_idx(ua[p], n)
        i, fa = _nb_idx(ub[p], h)
        j, fb = _nb_idx(uc[p], w)
        w00 = (1.0 - fa) * (1.0 - fb)
        w01 = (1.0 - fa) * fb
        w10 = fa * (1.0 - fb)
        w11 = fa * fb
        for r in range(rank):
            lv = line[r, k] * (1.0 - f) + line[r, k + 1] * f
            pv = (plane[r, i, j] * w00 + plane[r, i, j + 1] * w01
                  + plane[r, i + 1, j] * w10 + plane[r, i + 1, j + 1] * w11)
            out[p, r] = lv * pv
    return out


@njit(cache=True, nogil=True)
def _nb_vm_mode_scatter(line, plane, ua, ub, uc, grad, g_line, g_plane):
    rank, n = line.shape
    _, h, w = plane.shape
    for p in range(ua.shape[0]):
        k, f = _nb_idx(ua[p], n)
        i, fa = _nb_idx(ub[p], h)
        j, fb = _nb_idx(uc[p], w)
        w00 = (1.0 - fa) * (1.0 - fb)
        w01 = (1.0 - fa) * fb
        w10 = fa * (1.0 - fb)
        w11 = fa * fb
        for r in range(rank):
            g = grad[p, r]
            lv = line[r, k] * (1.0 - f) + line[r, k + 1] * f
            pv = (plane[r, i, j] * w00 + plane[r, i, j + 1] * w01
                  + plane[r, i + 1, j] * w10 + plane[r, i + 1, j + 1] * w11)
            gl = g * pv
            g_line[r, k] += gl * (1.0 - f)
            g_line[r, k + 1] += gl * f
            gp = g * lv
            g_plane[r, i, j] += gp * w00
            g_plane[r, i, j + 1] += gp * w01
            g_plane[r, i + 1, j] += gp * w10
            g_plane[r, i + 1, j + 1] += gp * w11


_NAMES = (
    "linear_gather", "linear_scatter", "bilinear_gather", "bilinear_scatter",
    "trilinear_gather", "trilinear_scatter", "trilinear_grad", "trilinear_grad_scatter",
    "composite_forward", "composite_backward", "vm_mode_gather", "vm_mode_scatter",
)

NUMPY_KERNELS = {name: globals()["_np_" + name] for name in _NAMES}
NUMBA_KERNELS = {name: globals()["_nb_" + name] for name in _NAMES} if HAVE_NUMBA else {}
ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

linear_gather = ACTIVE["linear_gather"]
linear_scatter = ACTIVE["linear_scatter"]
bilinear_gather = ACTIVE["bilinear_gather"]
bilinear_scatter = ACTIVE["bilinear_scatter"]
trilinear_gather = ACTIVE["trilinear_gather"]
trilinear_scatter = ACTIVE["trilinear_scatter"]
trilinear_grad = ACTIVE["trilinear_grad"]
trilinear_grad_scatter = ACTIVE["trilinear_grad_scatter"]
composite_forward = ACTIVE["composite_forward"]
composite_backward = ACTIVE["composite_backward"]
vm_mode_gather = ACTIVE["vm_mode_gather"]
vm_mode_scatter = ACTIVE["vm_mode_scatter"]
