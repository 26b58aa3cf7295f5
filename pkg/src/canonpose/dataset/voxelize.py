from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError, ValidationError
from .mesh import face_components, is_closed
from .raster import column_hits
from .render import check_in_frustum

VOXEL_RESOLUTIONS = (8, 16, 32, 64, 128, 256)
# Sub-voxel column shift so axis-aligned test geometry never puts a ray exactly on an edge.
_COLUMN_JITTER = (1.2345e-7, 2.3456e-7)


@dataclass
class VoxelGrid:
    """Cubic occupancy grid indexed [ix, iy, iz] over [-0.5, 0.5]^3."""

    occupancy: np.ndarray
    surface_only: bool = False

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=np.float32)
        s = self.occupancy.shape
        if len(s) != 3 or len(set(s)) != 1:
            raise ShapeError(f"voxel grid must be cubic, got {s}")

    @property
    def resolution(self):
        return self.occupancy.shape[0]

    def binarized(self, threshold=0.5):
        return (self.occupancy >= threshold).astype(np.float32)

    def validate(self):
        occ = self.occupancy
        if not np.all(np.isfinite(occ)) or occ.min() < 0 or occ.max() > 1:
            raise ValidationError("occupancy values must be finite and within [0, 1]")
        return self


def voxel_centers(resolution):
    return -0.5 + (np.arange(resolution) + 0.5) / resolution


def _parity_fill(triangles, r):
    ix, iy, z = column_hits(triangles, r, r, tol=0.0, offset=_COLUMN_JITTER)
    below = np.clip(np.ceil((z + 0.5) * r - 0.5), 0, r).astype(np.int64)
    counts = np.zeros((r * r, r + 1), dtype=np.int32)
    np.add.at(counts, (ix * r + iy, below), 1)
    # hits strictly above center k are those with below > k
    above = np.cumsum(counts[:, ::-1], axis=1)[:, ::-1][:, 1:]
    return (above % 2 == 1).reshape(r, r, r)


def _surface_marks(triangles, r):
    occ = np.zeros((r, r, r), dtype=bool)
    edge = np.linalg.norm(triangles - np.roll(triangles, 1, axis=1), axis=2).max(axis=1)
    steps = np.ceil(edge * r * 2).astype(np.int64) + 1
    for n in np.unique(steps):
        tri = triangles[steps == n]
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        ok = i + j <= n
        bary = np.column_stack([i[ok], j[ok]]) / n
        pts = (tri[:, None, 0] + bary[None, :, :1] * (tri[:, None, 1] - tri[:, None, 0])
               + bary[None, :, 1:] * (tri[:, None, 2] - tri[:, None, 0])).reshape(-1, 3)
        idx = np.clip(np.floor((pts + 0.5) * r).astype(np.int64), 0, r - 1)
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return occ


def voxelize(mesh, resolution):
    """Occupy voxels whose center lies inside a closed component of ``mesh``.

    Each connected component is filled independently by ray parity along z, so
    overlapping closed parts union correctly. Components that are not closed
    fall back to surface voxels and set ``surface_only`` on the result.
    """
    r = int(resolution)
    if r not in VOXEL_RESOLUTIONS:
        raise ConfigError(f"voxel resolution must be one of {VOXEL_RESOLUTIONS}, got {resolution}")
    check_in_frustum(mesh)
    tris = mesh.triangles()
    labels = face_components(mesh)
    occ = np.zeros((r, r, r), dtype=bool)
    surface_only = False
    for comp in range(labels.max() + 1):
        sel = labels == comp
        if is_closed(mesh.faces[sel]):
            occ |= _parity_fill(tris[sel], r)
        else:
            surface_only = True
            occ |= _surface_marks(tris[sel], r)
    return VoxelGrid(occ.astype(np.float32), surface_only=surface_only)
