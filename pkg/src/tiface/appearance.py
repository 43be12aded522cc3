"""Linear feature -> degree-2 spherical harmonics -> sigmoid color decoder."""
import numpy as np

SH_DIM = 9
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)


def sh_basis(dirs):
    """Real SH basis up to degree 2 evaluated at unit directions, shape (n, 9)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    return np.stack([
        np.full_like(x, _C0),
        -_C1 * y, _C1 * z, -_C1 * x,
        _C2[0] * x * y, _C2[1] * y * z, _C2[2] * (2.0 * z * z - x * x - y * y),
        _C2[3] * x * z, _C2[4] * (x * x - y * y),
    ], axis=1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode(features, sh_map, dirs):
    """Return ``(rgb, cache)``; ``sh_map`` has shape (feature_dim, 3 * 9)."""
    basis = sh_basis(dirs)
    coeffs = (features @ sh_map).reshape(-1, 3, SH_DIM)
    rgb = _sigmoid(np.einsum("nck,nk->nc", coeffs, basis))
    return rgb, (features, basis, rgb)


def decode_backward(g_rgb, sh_map, cache):
    """Return ``(d/d features, d/d sh_map)``."""
    features, basis, rgb = cache
    g_logit = g_rgb * rgb * (1.0 - rgb)
    g_coeff = (g_logit[:, :, None] * basis[:, None, :]).reshape(-1, 3 * SH_DIM)
    return g_coeff @ sh_map.T, features.T @ g_coeff
