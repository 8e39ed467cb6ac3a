"""Differentiable fixed-size feature extraction from variably sized boxes.

A box in image pixels is projected onto the feature map (divide by the
backbone stride) and sampled on an X x Y grid of sub-cell centers with the
triangular kernel k(d) = max(0, 1 - |d|).  Both stages are recorded on the
autodiff tape, so gradients reach the feature map *and* the box coordinates —
the property that lets losses downstream train the proposal coordinates.

Grid convention: ``grid[b, a, c] = (x, y)`` where x = (xc - w/2)/s +
(a + 0.5) * (w/s)/X and y = (yc - h/2)/s + (c + 0.5) * (h/s)/Y.  Coordinate
(x, y) indexes the feature map as U[channel, y, x]; outside [0, extent-1] the
map is zero-padded.  Kernel derivative at exact-integer coordinates is 0.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation


def build_grid(boxes: ad.Tensor, stride: float, x_res: int, y_res: int) -> ad.Tensor:
    """Sampling grid for (B,4) center-form boxes -> (B, X, Y, 2) coordinates.

    The grid is an affine function of each box's center/extent, hence linear
    in the box parameters; its backward pass is a fixed matrix.
    """
    if x_res < 1 or y_res < 1:
        raise ContractViolation("grid resolution must be >= 1")
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ContractViolation(f"boxes must be (B,4), got {boxes.shape}")
    b = boxes.shape[0]
    d = boxes.data
    # fractional offsets of sub-cell centers within the box, in [0, 1)
    fx = ((np.arange(x_res) + 0.5) / x_res - 0.5).astype(d.dtype)  # (X,)
    fy = ((np.arange(y_res) + 0.5) / y_res - 0.5).astype(d.dtype)  # (Y,)
    gx = (d[:, 0:1] + d[:, 2:3] * fx[None, :]) / stride            # (B, X)
    gy = (d[:, 1:2] + d[:, 3:4] * fy[None, :]) / stride            # (B, Y)
    grid = np.empty((b, x_res, y_res, 2), dtype=d.dtype)
    grid[..., 0] = gx[:, :, None]
    grid[..., 1] = gy[:, None, :]

    def bw(g):
        ggx = g[..., 0].sum(axis=2)  # (B, X)
        ggy = g[..., 1].sum(axis=1)  # (B, Y)
        gb = np.empty_like(d)
        gb[:, 0] = ggx.sum(axis=1) / stride
        gb[:, 1] = ggy.sum(axis=1) / stride
        gb[:, 2] = (ggx * fx[None, :]).sum(axis=1) / stride
        gb[:, 3] = (ggy * fy[None, :]).sum(axis=1) / stride
        return (gb,)

    return ad._apply((boxes,), grid, bw)


def bilinear_sample(u: ad.Tensor, grid: ad.Tensor) -> ad.Tensor:
    """Sample (C,H,W) features at (B,X,Y,2) real coordinates -> (B,C,X,Y).

    Each output is the kernel-weighted sum over the (at most) four feature
    cells supporting its coordinate; cells outside the map contribute zero.
    Gradients flow to the features and to the grid coordinates.
    """
    if u.ndim != 3:
        raise ContractViolation(f"feature map must be (C,H,W), got {u.shape}")
    if grid.ndim != 4 or grid.shape[3] != 2:
        raise ContractViolation(f"grid must be (B,X,Y,2), got {grid.shape}")
    c, h, w = u.shape
    b, xr, yr, _ = grid.shape

    gx = grid.data[..., 0].reshape(-1)  # (B*X*Y,)
    gy = grid.data[..., 1].reshape(-1)
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    tx = gx - x0  # in [0, 1)
    ty = gy - y0
    x0i = x0.astype(np.intp)
    y0i = y0.astype(np.intp)

    u2 = u.data.reshape(c, h * w)
    corner_cache = []
    out_flat = np.zeros((c, gx.size), dtype=u.dtype)
    for dx, wxf in ((0, 1.0 - tx), (1, tx)):
        for dy, wyf in ((0, 1.0 - ty), (1, ty)):
            xi = x0i + dx
            yi = y0i + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = wxf * wyf * valid
            flat = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
            vals = u2[:, flat] * valid[None, :]  # masked values, zero padding
            out_flat += vals * wgt[None, :]
            corner_cache.append((dx, dy, flat, valid, wxf, wyf, vals))
    out = out_flat.reshape(c, b, xr, yr).transpose(1, 0, 2, 3)

    def bw(g):
        gflat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c, -1)  # (C, B*X*Y)
        ggx = np.zeros_like(gx)
        ggy = np.zeros_like(gy)
        scatter_idx = []
        scatter_val = []
        row_offset = (np.arange(c) * (h * w))[:, None]
        for dx, dy, flat, valid, wxf, wyf, vals in corner_cache:
            wgt = wxf * wyf * valid
            scatter_idx.append((row_offset + flat[None, :]).reshape(-1))
            scatter_val.append((gflat * wgt[None, :]).reshape(-1))
            inner = (gflat * vals).sum(axis=0)  # sum over channels
            dwx = -1.0 if dx == 0 else 1.0
            dwy = -1.0 if dy == 0 else 1.0
            ggx += inner * (dwx * wyf)
            ggy += inner * (dwy * wxf)
        gu2 = np.bincount(np.concatenate(scatter_idx),
                          weights=np.concatenate(scatter_val),
                          minlength=c * h * w).astype(u.dtype)
        # kernel kinks at integer coordinates: derivative defined as 0 there
        ggx[tx == 0.0] = 0.0
        ggy[ty == 0.0] = 0.0
        ggrid = np.stack([ggx, ggy], axis=-1).reshape(grid.shape).astype(grid.dtype)
        return (gu2.reshape(u.shape), ggrid)

    return ad._apply((u, grid), np.ascontiguousarray(out), bw)


def extract_regions(u: ad.Tensor, boxes: ad.Tensor, stride: float,
                    x_res: int, y_res: int) -> ad.Tensor:
    """Fixed-size features for B boxes: (C,H,W) x (B,4) -> (B,C,X,Y)."""
    if boxes.shape[0] < 1:
        raise ContractViolation("extract_regions requires at least one box")
    return bilinear_sample(u, build_grid(boxes, stride, x_res, y_res))
