"""Pure numpy versions of the hot kernels.

These are the reference the compiled kernels are tested against; both use the
same accumulation order so results agree bit for bit.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold ``x`` [B, C, H, W] into same-padded patches [B, H, W, C*k*k]."""
    b, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((b, c, h + 2 * p, w + 2 * p))
    xp[:, :, p : p + h, p : p + w] = x
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, shape=(b, c, h, w, k, k), strides=(s0, s1, s2, s3, s2, s3), writeable=False)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, h, w, c * k * k)


def col2im(cols: np.ndarray, c: int, k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches [B, H, W, C*k*k] back to [B, C, H, W]."""
    b, h, w, _ = cols.shape
    p = k // 2
    g = cols.reshape(b, h, w, c, k, k)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + h, j : j + w] += g[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out[:, :, p : p + h, p : p + w])


def span_pool(feats: np.ndarray, mode: str) -> np.ndarray:
    """Pool clip features [N, d] over every span a..b into a map [d, N, N].

    Cells with a > b stay zero.
    """
    n, d = feats.shape
    out = np.zeros((d, n, n))
    if mode == "max":
        for a in range(n):
            run = feats[a].copy()
            out[:, a, a] = run
            for b in range(a + 1, n):
                np.maximum(run, feats[b], out=run)
                out[:, a, b] = run
    elif mode == "mean":
        for a in range(n):
            run = feats[a].copy()
            out[:, a, a] = run
            for b in range(a + 1, n):
                run += feats[b]
                out[:, a, b] = run / (b - a + 1)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return out


def im2col_nhwc(x: np.ndarray, k: int, pos: np.ndarray) -> np.ndarray:
    """Channels-last unfold at selected positions.

    ``x`` is [B, H, W, C], ``pos`` an int [P, 2] array of (row, col) output
    positions; returns [B, P, k*k*C] with patch order (i, j, c).
    """
    b, h, w, c = x.shape
    p = k // 2
    xp = np.zeros((b, h + 2 * p, w + 2 * p, c))
    xp[:, p : p + h, p : p + w, :] = x
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, shape=(b, h, w, k, k, c), strides=(s0, s1, s2, s1, s2, s3), writeable=False)
    return win[:, pos[:, 0], pos[:, 1]].reshape(b, len(pos), k * k * c)


def col2im_nhwc(cols: np.ndarray, pos: np.ndarray, h: int, w: int, c: int, k: int) -> np.ndarray:
    """Adjoint of :func:`im2col_nhwc`: scatter-add [B, P, k*k*C] into [B, H, W, C]."""
    b = cols.shape[0]
    p = k // 2
    full = np.zeros((b, h, w, k, k, c))
    full[:, pos[:, 0], pos[:, 1]] = cols.reshape(b, len(pos), k, k, c)
    out = np.zeros((b, h + 2 * p, w + 2 * p, c))
    for i in range(k):
        for j in range(k):
            out[:, i : i + h, j : j + w, :] += full[:, :, :, i, j, :]
    return np.ascontiguousarray(out[:, p : p + h, p : p + w, :])
