from .mesh import Mesh, box_mesh, load_obj, normalize_mesh, save_obj, uv_sphere
from .procedural import ShapeSpec, generate_procedural_sample
from .render import DEPTH_EPS, DepthMaskPair, render_depth
from .splits import SplitPlan, holdout_validation, make_splits
from .store import (ArrayDataset, Sample, generate_dataset, load_sample, make_sample, read_manifest,
                    sample_from_meshes, save_sample, write_manifest)
from .voxelize import VoxelGrid, voxelize

__all__ = [
    "ArrayDataset", "DEPTH_EPS", "DepthMaskPair", "Mesh", "Sample", "ShapeSpec", "SplitPlan", "VoxelGrid",
    "box_mesh", "generate_dataset", "generate_procedural_sample", "holdout_validation", "load_obj",
    "load_sample", "make_sample", "make_splits", "normalize_mesh", "read_manifest", "render_depth",
    "sample_from_meshes", "save_obj", "save_sample", "uv_sphere", "voxelize", "write_manifest",
]
