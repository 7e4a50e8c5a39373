"""Hot numeric kernels: patch extraction, patch scatter-add, and squared distances.

Each kernel exists twice: a numba ``@njit`` loop and a pure-numpy path. Both
accumulate in the same order, so the two backends agree bit for bit. The numba
path is used when numba imports and ``PROTOPNETPP_NUMBA`` is not set to ``0``.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

__all__ = ["BACKEND", "im2col", "col2im", "pairwise_sqdist", "use_backend"]


def _flag_enabled():
    return os.environ.get("PROTOPNETPP_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def _im2col_numpy(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def _col2im_numpy(cols, n, c, hp, wp, k, stride, ho, wo):
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    blocks = cols.reshape(n, ho, wo, c, k, k)
    for di in range(k):
        for dj in range(k):
            out[:, :, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride] += (
                blocks[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            )
    return out


def _sqdist_numpy(features, prototypes):
    n, d, h, w = features.shape
    m = prototypes.shape[0]
    f64 = features.astype(np.float64)
    p64 = prototypes.astype(np.float64)
    out = np.zeros((n, m, h, w), dtype=np.float64)
    for j in range(d):
        diff = f64[:, None, j, :, :] - p64[None, :, j, None, None]
        out += diff * diff
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def _im2col_numba(xp, k, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((n * ho * wo, c * k * k), dtype=xp.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    col = 0
                    for ch in range(c):
                        for di in range(k):
                            for dj in range(k):
                                cols[row, col] = xp[b, ch, i * stride + di, j * stride + dj]
                                col += 1
        return cols

    @numba.njit(cache=True)
    def _col2im_numba(cols, n, c, hp, wp, k, stride, ho, wo):
        out = np.zeros((n, c, hp, wp), dtype=np.float64)
        for di in range(k):
            for dj in range(k):
                for b in range(n):
                    for i in range(ho):
                        for j in range(wo):
                            row = (b * ho + i) * wo + j
                            for ch in range(c):
                                out[b, ch, i * stride + di, j * stride + dj] += cols[row, (ch * k + di) * k + dj]
        return out

    @numba.njit(cache=True)
    def _sqdist_numba(features, prototypes):
        n, d, h, w = features.shape
        m = prototypes.shape[0]
        out = np.zeros((n, m, h, w), dtype=np.float64)
        for b in range(n):
            for p in range(m):
                for j in range(d):
                    pv = np.float64(prototypes[p, j])
                    for r in range(h):
                        for q in range(w):
                            diff = np.float64(features[b, j, r, q]) - pv
                            out[b, p, r, q] += diff * diff
        return out


BACKEND = "numba" if (numba is not None and _flag_enabled()) else "numpy"


def use_backend(name):
    """Switch kernel backend at runtime (``"numba"`` or ``"numpy"``); returns the previous one."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    previous, BACKEND = BACKEND, name
    return previous


def im2col(xp, k, stride, ho, wo):
    """Unfold a padded ``(N, C, Hp, Wp)`` array into ``(N*Ho*Wo, C*k*k)`` patch rows."""
    xp = np.ascontiguousarray(xp)
    if BACKEND == "numba":
        return _im2col_numba(xp, k, stride, ho, wo)
    return _im2col_numpy(xp, k, stride, ho, wo)


def col2im(cols, n, c, hp, wp, k, stride, ho, wo):
    """Scatter-add patch rows back into a float64 ``(N, C, Hp, Wp)`` array."""
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if BACKEND == "numba":
        return _col2im_numba(cols, n, c, hp, wp, k, stride, ho, wo)
    return _col2im_numpy(cols, n, c, hp, wp, k, stride, ho, wo)


def pairwise_sqdist(features, prototypes):
    """Squared distances ``(N, M, h, w)`` between every feature vector and every prototype.

    Accumulated in float64, channel by channel.
    """
    features = np.ascontiguousarray(features)
    prototypes = np.ascontiguousarray(prototypes)
    if BACKEND == "numba":
        return _sqdist_numba(features, prototypes)
    return _sqdist_numpy(features, prototypes)
