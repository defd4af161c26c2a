"""Hot-kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``LGN_PURE_PYTHON=1`` before import to force the fallback.
"""

import logging
import os

import numpy as np

from . import _pykernels

logger = logging.getLogger(__name__)

_impl = _pykernels
BACKEND = "python"

if os.environ.get("LGN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        logger.debug("compiled kernels unavailable, using numpy fallback")


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), int(k))


def col2im(cols: np.ndarray, c: int, k: int) -> np.ndarray:
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), int(c), int(k))


def span_pool(feats: np.ndarray, mode: str = "max") -> np.ndarray:
    return _impl.span_pool(np.ascontiguousarray(feats, dtype=np.float64), mode)


def grid_positions(h: int, w: int, where: np.ndarray | None = None) -> np.ndarray:
    """Row-major (row, col) int64 positions of an h x w grid, optionally only where True."""
    if where is None:
        where = np.ones((h, w), dtype=bool)
    return np.ascontiguousarray(np.argwhere(where), dtype=np.int64)


def im2col_nhwc(x: np.ndarray, k: int, pos: np.ndarray | None = None) -> np.ndarray:
    """[B, H, W, C] -> patches [B, P, k*k*C] at ``pos`` (all cells by default)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if pos is None:
        pos = grid_positions(x.shape[1], x.shape[2])
    return _impl.im2col_nhwc(x, int(k), np.ascontiguousarray(pos, dtype=np.int64))


def col2im_nhwc(cols: np.ndarray, pos: np.ndarray, h: int, w: int, c: int, k: int) -> np.ndarray:
    return _impl.col2im_nhwc(
        np.ascontiguousarray(cols, dtype=np.float64),
        np.ascontiguousarray(pos, dtype=np.int64),
        int(h),
        int(w),
        int(c),
        int(k),
    )
