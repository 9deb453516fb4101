"""Image quality metrics on [0, 1]-range float images.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5, truncate 3.5),
C1 = 0.01^2, C2 = 0.03^2, per channel then averaged, with the 5-pixel
border cropped before the mean (the protocol of the original reference
implementation).  ssim_map keeps the full-size per-pixel map and carries
a hand-derived backward pass so the D-SSIM loss can weight pixels.
"""

import numpy as np
from scipy import ndimage

_SIGMA = 1.5
_RADIUS = 5  # int(3.5 * 1.5 + 0.5) -> 11 taps
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _kernel():
    x = np.arange(-_RADIUS, _RADIUS + 1, dtype=float)
    k = np.exp(-0.5 * (x / _SIGMA) ** 2)
    return k / k.sum()

_K = _kernel()


def _refl(n, j):
    m = np.arange(n) + j
    m = np.where(m < 0, -m - 1, m)
    return np.where(m >= n, 2 * n - 1 - m, m)


def _blur_axis(z, axis):
    # scipy's 'reflect' matches the edge-inclusive mirror used by _refl
    return ndimage.correlate1d(z, _K, axis=axis, mode="reflect")


def _blur_axis_adjoint(g, axis):
    """Adjoint of _blur_axis: scatter g[h] onto index reflect(h + j).

    Interior targets are slice-contiguous; only the <= _RADIUS reflected
    rows per border need individual adds.
    """
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0]
    out = np.zeros_like(g)
    for j in range(-_RADIUS, _RADIUS + 1):
        k = _K[j + _RADIUS]
        lo = max(0, -j)
        hi = min(n, n - j)
        out[lo + j:hi + j] += k * g[lo:hi]
        for h in range(0, lo):            # h + j < 0 reflects to -(h+j)-1
            out[-(h + j) - 1] += k * g[h]
        for h in range(hi, n):            # h + j >= n reflects to 2n-1-(h+j)
            out[2 * n - 1 - (h + j)] += k * g[h]
    return np.moveaxis(out, 0, axis)


def _blur(z):
    return _blur_axis(_blur_axis(z, 0), 1)


def _blur_adjoint(g):
    return _blur_axis_adjoint(_blur_axis_adjoint(g, 1), 0)


def _as_hwc(img):
    img = np.asarray(img, dtype=float)
    return img[:, :, None] if img.ndim == 2 else img


def psnr(a, b):
    """10 log10(1 / MSE); +inf for identical images."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return np.inf
    return float(-10.0 * np.log10(mse))


def dyn_psnr(a, b, mask):
    """PSNR restricted to mask pixels; NaN for an empty mask."""
    a, b = _as_hwc(a), _as_hwc(b)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.nan
    diff = (a - b)[mask]
    mse = np.mean(diff ** 2)
    if mse == 0.0:
        return np.inf
    return float(-10.0 * np.log10(mse))


def ssim_map(x, y, with_cache=False):
    """Full-size per-pixel SSIM map averaged over channels, in [-1, 1]."""
    x, y = _as_hwc(x), _as_hwc(y)
    mu_x, mu_y = _blur(x), _blur(y)
    xx, yy, xy = _blur(x * x), _blur(y * y), _blur(x * y)
    vx = xx - mu_x ** 2
    vy = yy - mu_y ** 2
    vxy = xy - mu_x * mu_y
    A1 = 2.0 * mu_x * mu_y + C1
    A2 = 2.0 * vxy + C2
    B1 = mu_x ** 2 + mu_y ** 2 + C1
    B2 = vx + vy + C2
    S = (A1 * A2) / (B1 * B2)
    m = S.mean(axis=2)
    if not with_cache:
        return m
    return m, {"x": x, "y": y, "mu_x": mu_x, "mu_y": mu_y, "S": S,
               "A1": A1, "A2": A2, "B1": B1, "B2": B2}


def ssim_map_backward(cache, g_map):
    """d(loss)/dx for a per-pixel gradient on the channel-averaged map."""
    x, y = cache["x"], cache["y"]
    mu_x, mu_y = cache["mu_x"], cache["mu_y"]
    S, A1, A2, B1, B2 = (cache[k] for k in ("S", "A1", "A2", "B1", "B2"))
    c = x.shape[2]
    gS = np.repeat(g_map[:, :, None], c, axis=2) / c
    den = B1 * B2
    gA1 = gS * A2 / den
    gA2 = gS * A1 / den
    gB1 = -gS * S / B1
    gB2 = -gS * S / B2
    g_vxy = 2.0 * gA2
    g_vx = gB2
    g_mu_x = (2.0 * mu_y * gA1 + 2.0 * mu_x * gB1
              - 2.0 * mu_x * g_vx - mu_y * g_vxy)
    g_x = _blur_adjoint(g_mu_x) + 2.0 * x * _blur_adjoint(g_vx) \
        + y * _blur_adjoint(g_vxy)
    return g_x


def ssim(a, b):
    """Mean SSIM with the window border cropped, matching the standard protocol."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    S = ssim_map_channels(a, b)
    r = _RADIUS
    return float(S[r:-r, r:-r].mean())


def ssim_map_channels(x, y):
    x, y = _as_hwc(x), _as_hwc(y)
    mu_x, mu_y = _blur(x), _blur(y)
    vx = _blur(x * x) - mu_x ** 2
    vy = _blur(y * y) - mu_y ** 2
    vxy = _blur(x * y) - mu_x * mu_y
    return ((2 * mu_x * mu_y + C1) * (2 * vxy + C2)
            / ((mu_x ** 2 + mu_y ** 2 + C1) * (vx + vy + C2)))
