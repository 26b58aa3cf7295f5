from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, OutOfFrustumError, ShapeError, ValidationError
from .raster import column_hits

# Depth assigned to the far plane; keeps the farthest surface distinct from background (0).
DEPTH_EPS = 1.0 / 65535
FRUSTUM_HALF = 0.5
_FRUSTUM_TOL = 1e-9


@dataclass
class DepthMaskPair:
    """Depth image in [0, 1] (near = 1, background = 0) and its foreground mask."""

    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.depth.ndim != 2 or self.depth.shape != self.mask.shape:
            raise ShapeError(f"depth {self.depth.shape} and mask {self.mask.shape} must be equal 2-D grids")

    @property
    def resolution(self):
        return self.depth.shape

    def validate(self):
        if not (np.all(np.isfinite(self.depth)) and np.all(np.isfinite(self.mask))):
            raise ValidationError("non-finite depth or mask values")
        for name, arr in (("depth", self.depth), ("mask", self.mask)):
            if arr.min() < 0 or arr.max() > 1:
                raise ValidationError(f"{name} values outside [0, 1]")
        if np.any(self.depth[self.mask == 0] != 0):
            raise ValidationError("background pixels must have depth 0")
        return self

    def stacked(self):
        return np.stack([self.depth, self.mask])


def depth_from_z(z):
    """Linear map from z in [-0.5, 0.5] to depth in [eps, 1]."""
    return DEPTH_EPS + (1.0 - DEPTH_EPS) * (np.asarray(z) + FRUSTUM_HALF)


def check_in_frustum(mesh):
    lo, hi = mesh.bounds()
    if np.any(lo < -FRUSTUM_HALF - _FRUSTUM_TOL) or np.any(hi > FRUSTUM_HALF + _FRUSTUM_TOL):
        raise OutOfFrustumError(
            f"mesh bounds {lo.round(4).tolist()}..{hi.round(4).tolist()} leave the [-0.5, 0.5]^3 view volume"
        )


def render_depth(mesh, resolution):
    """Orthographic depth render looking down -z; row 0 of the image is +y."""
    h, w = resolution
    if h < 16 or w < 16:
        raise ConfigError(f"render resolution must be at least 16x16, got {h}x{w}")
    check_in_frustum(mesh)
    ix, iy, z = column_hits(mesh.triangles(), w, h, tol=1e-9)
    zbuf = np.full(h * w, -np.inf)
    np.maximum.at(zbuf, (h - 1 - iy) * w + ix, z)
    hit = np.isfinite(zbuf)
    depth = np.zeros(h * w)
    depth[hit] = depth_from_z(np.clip(zbuf[hit], -FRUSTUM_HALF, FRUSTUM_HALF))
    return DepthMaskPair(depth.reshape(h, w), hit.reshape(h, w).astype(np.float32))
