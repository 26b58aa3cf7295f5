"""Vectorized triangle/column intersection shared by the renderer and voxelizer.

A "column" is a line parallel to the z axis through the center of a cell of a
regular grid over the xy square [-0.5, 0.5]^2. Cell (ix, iy) has its center at
x = -0.5 + (ix + 0.5) / nx, y = -0.5 + (iy + 0.5) / ny.
"""

import numpy as np

_CHUNK_PAIRS = 4_000_000


def column_hits(triangles, nx, ny, tol=0.0, offset=(0.0, 0.0)):
    """Intersect every z-parallel cell column with every triangle.

    Returns ``(ix, iy, z)`` arrays with one entry per (column, triangle) hit.
    ``tol`` is a barycentric slack (>0 closes hairline cracks between adjacent
    triangles; 0 counts each crossing once for parity). ``offset`` shifts all
    columns, which keeps them off edges that lie exactly on the cell grid.
    """
    tris = np.asarray(triangles, dtype=np.float64)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    e0, e1 = b - a, c - a
    den = e0[:, 0] * e1[:, 1] - e1[:, 0] * e0[:, 1]
    keep = np.abs(den) > 1e-15
    ox, oy = offset

    xy_lo = tris[:, :, :2].min(axis=1)
    xy_hi = tris[:, :, :2].max(axis=1)
    ix_lo = np.ceil((xy_lo[:, 0] - ox + 0.5) * nx - 0.5 - 1e-9).astype(np.int64)
    ix_hi = np.floor((xy_hi[:, 0] - ox + 0.5) * nx - 0.5 + 1e-9).astype(np.int64)
    iy_lo = np.ceil((xy_lo[:, 1] - oy + 0.5) * ny - 0.5 - 1e-9).astype(np.int64)
    iy_hi = np.floor((xy_hi[:, 1] - oy + 0.5) * ny - 0.5 + 1e-9).astype(np.int64)
    ix_lo, iy_lo = np.maximum(ix_lo, 0), np.maximum(iy_lo, 0)
    ix_hi, iy_hi = np.minimum(ix_hi, nx - 1), np.minimum(iy_hi, ny - 1)
    wx = np.where(keep, np.maximum(ix_hi - ix_lo + 1, 0), 0)
    wy = np.where(keep, np.maximum(iy_hi - iy_lo + 1, 0), 0)
    counts = wx * wy

    out_ix, out_iy, out_z = [], [], []
    cum = np.cumsum(counts)
    start = 0
    while start < len(tris):
        # take as many triangles as fit in the pair budget (at least one)
        base = cum[start - 1] if start else 0
        stop = int(np.searchsorted(cum, base + _CHUNK_PAIRS, side="right"))
        stop = max(stop, start + 1)
        sl = slice(start, stop)
        n = counts[sl]
        total = int(n.sum())
        start = stop
        if total == 0:
            continue
        t = np.repeat(np.arange(sl.start, sl.stop), n)
        local = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
        ix = ix_lo[t] + local % wx[t]
        iy = iy_lo[t] + local // wx[t]
        px = -0.5 + (ix + 0.5) / nx + ox - a[t, 0]
        py = -0.5 + (iy + 0.5) / ny + oy - a[t, 1]
        d = den[t]
        u = (px * e1[t, 1] - e1[t, 0] * py) / d
        v = (e0[t, 0] * py - px * e0[t, 1]) / d
        w = 1.0 - u - v
        inside = (u >= -tol) & (v >= -tol) & (w >= -tol)
        t, u, v = t[inside], u[inside], v[inside]
        out_ix.append(ix[inside])
        out_iy.append(iy[inside])
        out_z.append(a[t, 2] + u * e0[t, 2] + v * e1[t, 2])

    if not out_z:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0)
    return np.concatenate(out_ix), np.concatenate(out_iy), np.concatenate(out_z)
