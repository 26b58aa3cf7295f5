"""Single-view depth images of articulated shapes: canonical-pose depth completion and voxel pose recovery."""

__version__ = "0.1.0"
