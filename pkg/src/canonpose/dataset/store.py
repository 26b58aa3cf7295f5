"""Samples, on-disk dataset layout and the JSON-lines manifest."""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import DimensionMismatchError, FormatError, ShapeError, ValidationError, VersionMismatchError
from ..tensorio import load_tensor, save_ndt, save_voxb
from .mesh import normalize_mesh
from .procedural import ShapeSpec, generate_procedural_sample
from .render import DepthMaskPair, render_depth
from .voxelize import VoxelGrid, voxelize

FORMAT_VERSION = 1
MANIFEST = "manifest.jsonl"
DATASET_INFO = "dataset.json"
MANIFEST_KEYS = ("id", "subject_id", "pose_id", "seed", "posed_depth", "posed_mask",
                 "canon_depth", "canon_mask", "voxels", "format_version")


@dataclass
class Sample:
    posed: DepthMaskPair
    canonical: DepthMaskPair
    gt_voxels: VoxelGrid
    subject_id: str
    pose_id: str
    seed: int

    def __post_init__(self):
        if self.posed.resolution != self.canonical.resolution:
            raise ValidationError("posed and canonical pairs must share a resolution")
        if not self.subject_id or not self.pose_id:
            raise ValidationError("subject_id and pose_id must be non-empty")

    @property
    def id(self):
        return f"{self.subject_id}_{self.pose_id}"


def make_sample(seed, spec, resolution=(64, 64), voxel_resolution=32):
    """Render and voxelize one procedural sample; a pure function of its arguments."""
    canonical, posed, subject_id, pose_id = generate_procedural_sample(seed, spec)
    posed_n = normalize_mesh(posed)
    return Sample(
        posed=render_depth(posed_n, resolution),
        canonical=render_depth(normalize_mesh(canonical), resolution),
        gt_voxels=voxelize(posed_n, voxel_resolution),
        subject_id=subject_id,
        pose_id=pose_id,
        seed=int(seed),
    )


def sample_from_meshes(canonical, posed, subject_id, pose_id, resolution=(64, 64), voxel_resolution=32, seed=0):
    """Build a sample from externally supplied (e.g. OBJ) canonical/posed meshes."""
    posed_n = normalize_mesh(posed)
    return Sample(render_depth(posed_n, resolution), render_depth(normalize_mesh(canonical), resolution),
                  voxelize(posed_n, voxel_resolution), subject_id, pose_id, seed)


def save_sample(directory, sample, voxel_format="voxb"):
    """Write the sample's tensors under ``directory`` and return its manifest entry."""
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    stem = f"samples/{sample.id}"
    files = {
        "posed_depth": f"{stem}.posed_depth.ndt",
        "posed_mask": f"{stem}.posed_mask.ndt",
        "canon_depth": f"{stem}.canon_depth.ndt",
        "canon_mask": f"{stem}.canon_mask.ndt",
        "voxels": f"{stem}.voxels.{voxel_format}",
    }
    save_ndt(directory / files["posed_depth"], sample.posed.depth)
    save_ndt(directory / files["posed_mask"], sample.posed.mask)
    save_ndt(directory / files["canon_depth"], sample.canonical.depth)
    save_ndt(directory / files["canon_mask"], sample.canonical.mask)
    if voxel_format == "voxb":
        save_voxb(directory / files["voxels"], sample.gt_voxels.occupancy)
    elif voxel_format == "ndt":
        save_ndt(directory / files["voxels"], sample.gt_voxels.occupancy)
    else:
        raise ValidationError(f"unknown voxel format {voxel_format!r}")
    return {
        "id": sample.id,
        "subject_id": sample.subject_id,
        "pose_id": sample.pose_id,
        "seed": sample.seed,
        **files,
        "format_version": FORMAT_VERSION,
        "resolution": list(sample.posed.resolution),
        "voxel_resolution": sample.gt_voxels.resolution,
        "surface_only": sample.gt_voxels.surface_only,
    }


def load_sample(directory, entry):
    directory = Path(directory)
    missing = [k for k in MANIFEST_KEYS if k not in entry]
    if missing:
        raise FormatError(f"manifest entry {entry.get('id', '?')} lacks keys {missing}")
    if entry["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(
            f"sample {entry['id']}: format version {entry['format_version']}, this reader handles {FORMAT_VERSION}"
        )
    hw = tuple(entry["resolution"]) if "resolution" in entry else None
    r = entry.get("voxel_resolution")
    vshape = (r, r, r) if r is not None else None

    def get(key, shape):
        return load_tensor(directory / entry[key], expected_shape=shape)

    try:
        posed = DepthMaskPair(get("posed_depth", hw), get("posed_mask", hw))
        canonical = DepthMaskPair(get("canon_depth", hw), get("canon_mask", hw))
        voxels = VoxelGrid(get("voxels", vshape), surface_only=bool(entry.get("surface_only", False)))
    except ShapeError as exc:
        raise DimensionMismatchError(f"sample {entry['id']}: {exc}") from exc
    return Sample(posed, canonical, voxels, entry["subject_id"], entry["pose_id"], int(entry["seed"]))


def read_manifest(directory):
    path = Path(directory) / MANIFEST
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    entries.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{lineno}: invalid JSON") from exc
    return entries


def write_manifest(directory, entries):
    path = Path(directory) / MANIFEST
    tmp = path.with_suffix(".tmp")
    tmp.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in entries))
    tmp.replace(path)


def read_dataset_info(directory):
    path = Path(directory) / DATASET_INFO
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def _make_sample_job(args):
    seed, spec_dict, resolution, voxel_resolution = args
    return make_sample(seed, ShapeSpec(**spec_dict), resolution, voxel_resolution)


def generate_dataset(directory, spec, n_samples, resolution=(64, 64), voxel_resolution=32, first_seed=0,
                     workers=1):
    """Generate ``n_samples`` consecutive seeds into ``directory``; returns the manifest entries.

    Samples are produced in parallel when ``workers > 1``; the manifest is
    always written in seed order by this process.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    jobs = [(s, asdict(spec), tuple(resolution), voxel_resolution) for s in range(first_seed, first_seed + n_samples)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            samples = list(pool.map(_make_sample_job, jobs))
    else:
        samples = [_make_sample_job(j) for j in jobs]
    entries = [save_sample(directory, s) for s in samples]
    write_manifest(directory, entries)
    info = {
        "format_version": FORMAT_VERSION,
        "spec": asdict(spec),
        "resolution": list(resolution),
        "voxel_resolution": voxel_resolution,
        "n_samples": n_samples,
        "first_seed": first_seed,
    }
    (directory / DATASET_INFO).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return entries


@dataclass
class ArrayDataset:
    """All samples of a dataset directory stacked into dense arrays."""

    ids: list
    subject_ids: list
    pose_ids: list
    posed: np.ndarray  # (N, 2, H, W) depth, mask
    canonical: np.ndarray  # (N, 2, H, W)
    voxels: np.ndarray  # (N, R, R, R)

    @property
    def resolution(self):
        return tuple(self.posed.shape[-2:])

    @property
    def voxel_resolution(self):
        return self.voxels.shape[-1]

    def index_of(self, ids):
        lookup = {k: i for i, k in enumerate(self.ids)}
        return np.array([lookup[i] for i in ids], dtype=np.int64)

    @classmethod
    def from_samples(cls, samples):
        return cls(
            ids=[s.id for s in samples],
            subject_ids=[s.subject_id for s in samples],
            pose_ids=[s.pose_id for s in samples],
            posed=np.stack([s.posed.stacked() for s in samples]),
            canonical=np.stack([s.canonical.stacked() for s in samples]),
            voxels=np.stack([s.gt_voxels.occupancy for s in samples]),
        )

    @classmethod
    def load(cls, directory):
        return cls.from_samples([load_sample(directory, e) for e in read_manifest(directory)])
