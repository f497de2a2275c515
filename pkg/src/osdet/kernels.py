"""Hot numeric kernels: numba-jitted loops with a pure-numpy fallback.

The backend is picked once at import time from the ``OSDET_BACKEND``
environment variable ("numba" or "numpy"); the default is numba whenever it
imports cleanly. Both variants stay importable so they can be benchmarked
side by side (see ``benchmarks/kernel_bench.py``). Everything downstream
calls the dispatched aliases:

    pairwise_iou, nms_keep, im2col, col2im, roi_gather, roi_scatter

All kernels operate on float64 C-contiguous arrays. Results of the two
backends agree to floating-point rounding (summation order may differ).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - environment without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def pairwise_iou_numpy(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """IoU matrix between (N, 4) and (M, 4) xyxy boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms_keep_numpy(boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression over boxes already sorted by priority.

    Returns a boolean keep mask; box i is dropped when its IoU with an
    earlier kept box exceeds ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    keep = np.ones(n, dtype=np.bool_)
    for i in range(n):
        if not keep[i]:
            continue
        if i + 1 < n:
            rest = boxes[i + 1 :]
            ious = pairwise_iou_numpy(boxes[i : i + 1], rest)[0]
            keep[i + 1 :] &= ~(ious > iou_threshold)
    return keep


def im2col_numpy(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (C, H, W) into (C*kh*kw, OH*OW) patch columns."""
    c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, OH, OW, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, oh * ow)


def col2im_numpy(
    cols: np.ndarray, c: int, h: int, w: int, kh: int, kw: int, stride: int, pad: int
) -> np.ndarray:
    """Fold patch columns back onto a (C, H, W) grid, summing overlaps."""
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    col6 = cols.reshape(c, kh, kw, oh, ow)
    for ki in range(kh):
        for kj in range(kw):
            xp[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += col6[:, ki, kj]
    return xp[:, pad : pad + h, pad : pad + w]


def _roi_sample_coords(boxes: np.ndarray, out_size: int, scale: float, fh: int, fw: int):
    """Bilinear sample coordinates (per roi, per bin center) on the feature grid."""
    n = boxes.shape[0]
    g = (np.arange(out_size) + 0.5) / out_size
    sx = boxes[:, 0:1] + g[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])  # (N, S)
    sy = boxes[:, 1:2] + g[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])
    fx = np.clip(sx * scale - 0.5, 0.0, fw - 1.0)
    fy = np.clip(sy * scale - 0.5, 0.0, fh - 1.0)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, fw - 1)
    y1 = np.minimum(y0 + 1, fh - 1)
    tx = fx - x0
    ty = fy - y0
    del n
    return (y0, y1, ty), (x0, x1, tx)


def roi_gather_numpy(feat: np.ndarray, boxes: np.ndarray, out_size: int, scale: float) -> np.ndarray:
    """Crop-and-resize (C, H, W) features to (N, C, S, S) with bilinear sampling."""
    c, fh, fw = feat.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    if n == 0:
        return np.zeros((0, c, out_size, out_size))
    (y0, y1, ty), (x0, x1, tx) = _roi_sample_coords(boxes, out_size, scale, fh, fw)
    # broadcast bins to (N, S, S) grids
    y0g = y0[:, :, None] * np.ones((1, 1, out_size), dtype=np.int64)
    y1g = y1[:, :, None] * np.ones((1, 1, out_size), dtype=np.int64)
    x0g = np.ones((1, out_size, 1), dtype=np.int64) * x0[:, None, :]
    x1g = np.ones((1, out_size, 1), dtype=np.int64) * x1[:, None, :]
    tyg = ty[:, :, None]
    txg = tx[:, None, :]
    w00 = (1 - tyg) * (1 - txg)
    w01 = (1 - tyg) * txg
    w10 = tyg * (1 - txg)
    w11 = tyg * txg
    out = (
        feat[:, y0g, x0g] * w00[None]
        + feat[:, y0g, x1g] * w01[None]
        + feat[:, y1g, x0g] * w10[None]
        + feat[:, y1g, x1g] * w11[None]
    )
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def roi_scatter_numpy(
    grad_out: np.ndarray, boxes: np.ndarray, fh: int, fw: int, scale: float
) -> np.ndarray:
    """Backward of roi_gather: scatter (N, C, S, S) grads onto (C, H, W)."""
    n, c, s, _ = grad_out.shape
    grad_feat = np.zeros((c, fh, fw))
    if n == 0:
        return grad_feat
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    (y0, y1, ty), (x0, x1, tx) = _roi_sample_coords(boxes, s, scale, fh, fw)
    g = grad_out.transpose(1, 0, 2, 3)  # (C, N, S, S)
    ci = np.arange(c)[:, None, None, None]
    y0g = np.broadcast_to(y0[:, :, None], (n, s, s))[None]
    y1g = np.broadcast_to(y1[:, :, None], (n, s, s))[None]
    x0g = np.broadcast_to(x0[:, None, :], (n, s, s))[None]
    x1g = np.broadcast_to(x1[:, None, :], (n, s, s))[None]
    tyg = ty[:, :, None]
    txg = tx[:, None, :]
    w00 = ((1 - tyg) * (1 - txg))[None]
    w01 = ((1 - tyg) * txg)[None]
    w10 = (tyg * (1 - txg))[None]
    w11 = (tyg * txg)[None]
    np.add.at(grad_feat, (ci, y0g, x0g), g * w00)
    np.add.at(grad_feat, (ci, y0g, x1g), g * w01)
    np.add.at(grad_feat, (ci, y1g, x0g), g * w10)
    np.add.at(grad_feat, (ci, y1g, x1g), g * w11)
    return grad_feat


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------


@njit(cache=True)
def _pairwise_iou_jit(a, b, out):  # pragma: no cover - exercised via wrapper
    for i in range(a.shape[0]):
        ax0, ay0, ax1, ay1 = a[i, 0], a[i, 1], a[i, 2], a[i, 3]
        area_a = (ax1 - ax0) * (ay1 - ay0)
        for j in range(b.shape[0]):
            ix = min(ax1, b[j, 2]) - max(ax0, b[j, 0])
            iy = min(ay1, b[j, 3]) - max(ay0, b[j, 1])
            if ix <= 0.0 or iy <= 0.0:
                out[i, j] = 0.0
                continue
            inter = ix * iy
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            union = area_a + area_b - inter
            out[i, j] = inter / union if union > 0.0 else 0.0


def pairwise_iou_numba(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4))
    b = np.ascontiguousarray(np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4))
    out = np.empty((a.shape[0], b.shape[0]))
    if out.size:
        _pairwise_iou_jit(a, b, out)
    return out


@njit(cache=True)
def _nms_keep_jit(boxes, iou_threshold, keep):  # pragma: no cover
    n = boxes.shape[0]
    for i in range(n):
        if not keep[i]:
            continue
        x0, y0, x1, y1 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
        area_i = (x1 - x0) * (y1 - y0)
        for j in range(i + 1, n):
            if not keep[j]:
                continue
            ix = min(x1, boxes[j, 2]) - max(x0, boxes[j, 0])
            iy = min(y1, boxes[j, 3]) - max(y0, boxes[j, 1])
            if ix <= 0.0 or iy <= 0.0:
                continue
            inter = ix * iy
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            union = area_i + area_j - inter
            if union > 0.0 and inter / union > iou_threshold:
                keep[j] = False


def nms_keep_numba(boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
    b = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    keep = np.ones(b.shape[0], dtype=np.bool_)
    if b.shape[0] > 1:
        _nms_keep_jit(b, float(iou_threshold), keep)
    return keep


@njit(cache=True)
def _im2col_jit(x, kh, kw, stride, pad, out):  # pragma: no cover
    c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    for ci in range(c):
        for ki in range(kh):
            for kj in range(kw):
                row = (ci * kh + ki) * kw + kj
                for oy in range(oh):
                    iy = oy * stride + ki - pad
                    base = oy * ow
                    if iy < 0 or iy >= h:
                        for ox in range(ow):
                            out[row, base + ox] = 0.0
                        continue
                    for ox in range(ow):
                        ix = ox * stride + kj - pad
                        out[row, base + ox] = x[ci, iy, ix] if 0 <= ix < w else 0.0


def im2col_numba(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.empty((c * kh * kw, oh * ow))
    _im2col_jit(x, kh, kw, stride, pad, out)
    return out


@njit(cache=True)
def _col2im_jit(cols, kh, kw, stride, pad, grad):  # pragma: no cover
    c, h, w = grad.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    for ci in range(c):
        for ki in range(kh):
            for kj in range(kw):
                row = (ci * kh + ki) * kw + kj
                for oy in range(oh):
                    iy = oy * stride + ki - pad
                    if iy < 0 or iy >= h:
                        continue
                    base = oy * ow
                    for ox in range(ow):
                        ix = ox * stride + kj - pad
                        if 0 <= ix < w:
                            grad[ci, iy, ix] += cols[row, base + ox]


def col2im_numba(
    cols: np.ndarray, c: int, h: int, w: int, kh: int, kw: int, stride: int, pad: int
) -> np.ndarray:
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    grad = np.zeros((c, h, w))
    _col2im_jit(cols, kh, kw, stride, pad, grad)
    return grad


@njit(cache=True)
def _roi_gather_jit(feat, boxes, out_size, scale, out):  # pragma: no cover
    c, fh, fw = feat.shape
    n = boxes.shape[0]
    for i in range(n):
        bw = boxes[i, 2] - boxes[i, 0]
        bh = boxes[i, 3] - boxes[i, 1]
        for gy in range(out_size):
            sy = boxes[i, 1] + (gy + 0.5) / out_size * bh
            fy = sy * scale - 0.5
            if fy < 0.0:
                fy = 0.0
            if fy > fh - 1.0:
                fy = fh - 1.0
            y0 = int(np.floor(fy))
            y1 = min(y0 + 1, fh - 1)
            ty = fy - y0
            for gx in range(out_size):
                sx = boxes[i, 0] + (gx + 0.5) / out_size * bw
                fx = sx * scale - 0.5
                if fx < 0.0:
                    fx = 0.0
                if fx > fw - 1.0:
                    fx = fw - 1.0
                x0 = int(np.floor(fx))
                x1 = min(x0 + 1, fw - 1)
                tx = fx - x0
                w00 = (1.0 - ty) * (1.0 - tx)
                w01 = (1.0 - ty) * tx
                w10 = ty * (1.0 - tx)
                w11 = ty * tx
                for ci in range(c):
                    out[i, ci, gy, gx] = (
                        feat[ci, y0, x0] * w00
                        + feat[ci, y0, x1] * w01
                        + feat[ci, y1, x0] * w10
                        + feat[ci, y1, x1] * w11
                    )


def roi_gather_numba(feat: np.ndarray, boxes: np.ndarray, out_size: int, scale: float) -> np.ndarray:
    feat = np.ascontiguousarray(feat, dtype=np.float64)
    boxes = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    out = np.zeros((boxes.shape[0], feat.shape[0], out_size, out_size))
    if boxes.shape[0]:
        _roi_gather_jit(feat, boxes, out_size, float(scale), out)
    return out


@njit(cache=True)
def _roi_scatter_jit(grad_out, boxes, scale, grad_feat):  # pragma: no cover
    c, fh, fw = grad_feat.shape
    n, _, s, _ = grad_out.shape
    for i in range(n):
        bw = boxes[i, 2] - boxes[i, 0]
        bh = boxes[i, 3] - boxes[i, 1]
        for gy in range(s):
            sy = boxes[i, 1] + (gy + 0.5) / s * bh
            fy = sy * scale - 0.5
            if fy < 0.0:
                fy = 0.0
            if fy > fh - 1.0:
                fy = fh - 1.0
            y0 = int(np.floor(fy))
            y1 = min(y0 + 1, fh - 1)
            ty = fy - y0
            for gx in range(s):
                sx = boxes[i, 0] + (gx + 0.5) / s * bw
                fx = sx * scale - 0.5
                if fx < 0.0:
                    fx = 0.0
                if fx > fw - 1.0:
                    fx = fw - 1.0
                x0 = int(np.floor(fx))
                x1 = min(x0 + 1, fw - 1)
                tx = fx - x0
                w00 = (1.0 - ty) * (1.0 - tx)
                w01 = (1.0 - ty) * tx
                w10 = ty * (1.0 - tx)
                w11 = ty * tx
                for ci in range(c):
                    g = grad_out[i, ci, gy, gx]
                    grad_feat[ci, y0, x0] += g * w00
                    grad_feat[ci, y0, x1] += g * w01
                    grad_feat[ci, y1, x0] += g * w10
                    grad_feat[ci, y1, x1] += g * w11


def roi_scatter_numba(
    grad_out: np.ndarray, boxes: np.ndarray, fh: int, fw: int, scale: float
) -> np.ndarray:
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    boxes = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    grad_feat = np.zeros((grad_out.shape[1], fh, fw))
    if grad_out.shape[0]:
        _roi_scatter_jit(grad_out, boxes, float(scale), grad_feat)
    return grad_feat


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

_BACKEND = os.environ.get("OSDET_BACKEND", "").strip().lower()
if _BACKEND not in ("numba", "numpy"):
    _BACKEND = "numba" if HAS_NUMBA else "numpy"
if _BACKEND == "numba" and not HAS_NUMBA:
    _BACKEND = "numpy"

if _BACKEND == "numba":
    pairwise_iou = pairwise_iou_numba
    nms_keep = nms_keep_numba
    im2col = im2col_numba
    col2im = col2im_numba
    roi_gather = roi_gather_numba
    roi_scatter = roi_scatter_numba
else:
    pairwise_iou = pairwise_iou_numpy
    nms_keep = nms_keep_numpy
    im2col = im2col_numpy
    col2im = col2im_numpy
    roi_gather = roi_gather_numpy
    roi_scatter = roi_scatter_numpy


def backend_name() -> str:
    """Name of the active kernel backend ("numba" or "numpy")."""
    return _BACKEND
