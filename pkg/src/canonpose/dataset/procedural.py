"""Procedural articulated shapes standing in for scanned human/animal datasets.

Every subject is a set of capsule segments on a small kinematic tree. The
canonical mesh is the rest pose (T-pose for bipeds, standing for
quadrupeds); posed meshes rotate joints by angles drawn from per-pose ranges,
with a linear blend between a segment and its parent near each joint.

Subjects and poses are independent: subject k always has the same limb
lengths/thicknesses and pose p always has the same joint angles, so a dataset
forms a subject x pose grid like the scanned collections it replaces.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .mesh import Mesh, _cap_and_ring_faces, merge_meshes

FAMILIES = ("biped", "quadruped")
_FAMILY_CODE = {"biped": 1, "quadruped": 2}

# Ranges in degrees, one (lo, hi) per rotation axis in the listed axis order.
BIPED_JOINTS = {
    "spine": ("xz", [(-25, 20), (-15, 15)]),
    "neck": ("xz", [(-20, 20), (-20, 20)]),
    "shoulder_l": ("zy", [(-75, 60), (-50, 50)]),
    "elbow_l": ("y", [(-110, 0)]),
    "shoulder_r": ("zy", [(-60, 75), (-50, 50)]),
    "elbow_r": ("y", [(0, 110)]),
    "hip_l": ("xz", [(-70, 25), (-5, 35)]),
    "knee_l": ("x", [(0, 100)]),
    "hip_r": ("xz", [(-70, 25), (-35, 5)]),
    "knee_r": ("x", [(0, 100)]),
}

QUADRUPED_JOINTS = {
    "neck": ("zy", [(-35, 25), (-25, 25)]),
    "head": ("z", [(-30, 30)]),
    "shoulder_fl": ("zx", [(-40, 40), (-15, 15)]),
    "knee_fl": ("z", [(-60, 10)]),
    "shoulder_fr": ("zx", [(-40, 40), (-15, 15)]),
    "knee_fr": ("z", [(-60, 10)]),
    "hip_bl": ("zx", [(-40, 40), (-15, 15)]),
    "knee_bl": ("z", [(-10, 60)]),
    "hip_br": ("zx", [(-40, 40), (-15, 15)]),
    "knee_br": ("z", [(-10, 60)]),
    "tail": ("zy", [(-40, 60), (-40, 40)]),
}

BIPED_DIMENSIONS = {
    "torso_length": 0.55, "torso_width": 0.16, "torso_depth": 0.10,
    "head_radius": 0.095, "head_length": 0.2, "shoulder_width": 0.2, "hip_width": 0.1,
    "upper_arm": 0.3, "forearm": 0.28, "arm_radius": 0.05,
    "thigh": 0.44, "shin": 0.44, "leg_radius": 0.075,
}

QUADRUPED_DIMENSIONS = {
    "body_length": 1.1, "body_height": 0.2, "body_depth": 0.16,
    "neck_length": 0.35, "neck_radius": 0.08, "head_length": 0.25, "head_radius": 0.09,
    "upper_leg": 0.3, "lower_leg": 0.3, "leg_radius": 0.065, "tail_length": 0.4, "tail_radius": 0.035,
}

_DEFAULTS = {"biped": (BIPED_JOINTS, BIPED_DIMENSIONS), "quadruped": (QUADRUPED_JOINTS, QUADRUPED_DIMENSIONS)}


@dataclass
class ShapeSpec:
    """Shape-family configuration.

    ``family`` is ``biped``, ``quadruped`` or ``mixed`` (even subjects biped,
    odd subjects quadruped). ``joint_ranges`` and ``dimensions`` override the
    family defaults by name; ``variation`` is the relative per-subject spread of
    limb proportions.
    """

    family: str = "biped"
    n_subjects: int = 15
    n_poses: int = 20
    seed: int = 0
    joint_ranges: dict = field(default_factory=dict)
    dimensions: dict = field(default_factory=dict)
    variation: float = 0.2
    segments: int = 12

    def __post_init__(self):
        self.validate()

    def families(self):
        return FAMILIES if self.family == "mixed" else (self.family,)

    def validate(self):
        if self.family not in FAMILIES + ("mixed",):
            raise ConfigError(f"unknown shape family {self.family!r}")
        if self.n_subjects < 1 or self.n_poses < 1:
            raise ConfigError("n_subjects and n_poses must be positive")
        if not 0 <= self.variation < 0.5:
            raise ConfigError("variation must lie in [0, 0.5)")
        if self.segments < 3:
            raise ConfigError("capsules need at least 3 segments")
        known_joints = set().union(*(_DEFAULTS[f][0] for f in FAMILIES))
        known_dims = set().union(*(_DEFAULTS[f][1] for f in FAMILIES))
        for name, ranges in self.joint_ranges.items():
            if name not in known_joints:
                raise ConfigError(f"unknown joint {name!r}")
            ranges = list(ranges)
            if not ranges:
                raise ConfigError(f"joint {name!r} has an empty range list")
            for lo, hi in ranges:
                if not lo <= hi:
                    raise ConfigError(f"joint {name!r} has empty range ({lo}, {hi})")
        for name, value in self.dimensions.items():
            if name not in known_dims:
                raise ConfigError(f"unknown dimension {name!r}")
            if not value > 0:
                raise ConfigError(f"dimension {name!r} must be positive, got {value}")

    def joints_for(self, family):
        joints = {}
        for name, (axes, ranges) in _DEFAULTS[family][0].items():
            override = self.joint_ranges.get(name)
            if override is not None:
                override = [tuple(r) for r in override]
                if len(override) != len(axes):
                    raise ConfigError(f"joint {name!r} takes {len(axes)} ranges, got {len(override)}")
            joints[name] = (axes, override or ranges)
        return joints

    def dimensions_for(self, family):
        dims = dict(_DEFAULTS[family][1])
        dims.update({k: v for k, v in self.dimensions.items() if k in dims})
        return dims

    def zero_pose(self):
        """Copy of this spec whose every joint range is [0, 0]."""
        ranges = {}
        for fam in self.families():
            for name, (axes, _) in _DEFAULTS[fam][0].items():
                ranges[name] = [(0.0, 0.0)] * len(axes)
        return ShapeSpec(self.family, self.n_subjects, self.n_poses, self.seed, ranges,
                         dict(self.dimensions), self.variation, self.segments)


@dataclass
class Bone:
    name: str
    parent: str | None
    head: np.ndarray
    tail: np.ndarray
    radii: tuple
    joint: str | None = None


def _rotation(axis, degrees):
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _biped_bones(d):
    p = np.array
    pelvis_y = d["thigh"] + d["shin"] + d["leg_radius"]
    neck_y = pelvis_y + d["torso_length"]
    sh_y = neck_y - 0.6 * d["arm_radius"] - 0.05
    sw, hw = d["shoulder_width"], d["hip_width"]
    bones = [
        Bone("torso", None, p([0, pelvis_y, 0]), p([0, neck_y, 0]), (d["torso_width"], d["torso_depth"]), "spine"),
        Bone("head", "torso", p([0, neck_y + d["head_radius"] * 0.4, 0]),
             p([0, neck_y + d["head_radius"] * 0.4 + d["head_length"], 0]), (d["head_radius"],) * 2, "neck"),
    ]
    for side, sx in (("l", 1.0), ("r", -1.0)):
        elbow = sx * (sw + d["upper_arm"])
        bones += [
            Bone(f"upper_arm_{side}", "torso", p([sx * sw, sh_y, 0]), p([elbow, sh_y, 0]),
                 (d["arm_radius"],) * 2, f"shoulder_{side}"),
            Bone(f"forearm_{side}", f"upper_arm_{side}", p([elbow, sh_y, 0]), p([elbow + sx * d["forearm"], sh_y, 0]),
                 (0.85 * d["arm_radius"],) * 2, f"elbow_{side}"),
            Bone(f"thigh_{side}", None, p([sx * hw, pelvis_y - 0.03, 0]), p([sx * hw, pelvis_y - d["thigh"], 0]),
                 (d["leg_radius"],) * 2, f"hip_{side}"),
            Bone(f"shin_{side}", f"thigh_{side}", p([sx * hw, pelvis_y - d["thigh"], 0]),
                 p([sx * hw, pelvis_y - d["thigh"] - d["shin"], 0]), (0.75 * d["leg_radius"],) * 2, f"knee_{side}"),
        ]
    return bones


def _quadruped_bones(d):
    p = np.array
    half = d["body_length"] / 2
    body_y = d["upper_leg"] + d["lower_leg"] + d["leg_radius"]
    neck_end = p([half + 0.6 * d["neck_length"], body_y + 0.8 * d["neck_length"], 0])
    bones = [
        Bone("torso", None, p([-half, body_y, 0]), p([half, body_y, 0]), (d["body_height"], d["body_depth"])),
        Bone("neck", "torso", p([half, body_y + 0.3 * d["body_height"], 0]), neck_end, (d["neck_radius"],) * 2, "neck"),
        Bone("head", "neck", neck_end, neck_end + p([d["head_length"], -0.2 * d["head_length"], 0]),
             (d["head_radius"],) * 2, "head"),
        Bone("tail", "torso", p([-half, body_y + 0.3 * d["body_height"], 0]),
             p([-half - d["tail_length"], body_y + 0.45 * d["body_height"], 0]), (d["tail_radius"],) * 2, "tail"),
    ]
    z = 0.75 * d["body_depth"]
    for key, jname, kname, x, sz in (("fl", "shoulder_fl", "knee_fl", 0.8 * half, 1.0),
                                     ("fr", "shoulder_fr", "knee_fr", 0.8 * half, -1.0),
                                     ("bl", "hip_bl", "knee_bl", -0.8 * half, 1.0),
                                     ("br", "hip_br", "knee_br", -0.8 * half, -1.0)):
        top = p([x, body_y - 0.3 * d["body_height"], sz * z])
        knee = p([x, body_y - d["upper_leg"], sz * z])
        foot = p([x, body_y - d["upper_leg"] - d["lower_leg"], sz * z])
        bones += [
            Bone(f"upper_{key}", "torso", top, knee, (d["leg_radius"],) * 2, jname),
            Bone(f"lower_{key}", f"upper_{key}", knee, foot, (0.75 * d["leg_radius"],) * 2, kname),
        ]
    return bones


def _capsule(bone, n_seg, n_cap=3, n_body=4):
    """Capsule vertices plus the axial coordinate t (0 at head, 1 at tail) of each."""
    axis = bone.tail - bone.head
    length = np.linalg.norm(axis)
    d = axis / length
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    r_axial = max(bone.radii)
    theta = np.arange(1, n_cap + 1) * (np.pi / 2) / n_cap
    rings = [(-r_axial * np.cos(t), np.sin(t)) for t in theta]
    rings += [(length * j / (n_body + 1), 1.0) for j in range(1, n_body + 1)]
    rings += [(length + r_axial * np.cos(t), np.sin(t)) for t in theta[::-1]]
    phi = np.arange(n_seg) * 2 * np.pi / n_seg
    circle = np.outer(np.cos(phi), e1 * bone.radii[0]) + np.outer(np.sin(phi), e2 * bone.radii[1])
    verts = [bone.head - r_axial * d]
    axial = [-r_axial]
    for a, s in rings:
        verts.extend(bone.head + a * d + s * circle)
        axial.extend([a] * n_seg)
    verts.append(bone.tail + r_axial * d)
    axial.append(length + r_axial)
    faces = _cap_and_ring_faces(len(rings), n_seg)
    return np.array(verts), faces, np.array(axial) / length


def _subject_dimensions(spec, family, subject_index):
    rng = np.random.default_rng([spec.seed, _FAMILY_CODE[family], 1, subject_index])
    base = spec.dimensions_for(family)
    v = spec.variation
    if v == 0:
        return base
    # correlated groups so subjects differ in visible proportions, not just noise
    groups = {
        "biped": {
            "torso": ["torso_length"], "width": ["torso_width", "shoulder_width", "hip_width"],
            "depth": ["torso_depth"], "head": ["head_radius", "head_length"],
            "arms": ["upper_arm", "forearm"], "legs": ["thigh", "shin"],
            "limb_r": ["arm_radius", "leg_radius"],
        },
        "quadruped": {
            "body": ["body_length"], "girth": ["body_height", "body_depth"],
            "neck": ["neck_length", "neck_radius"], "head": ["head_length", "head_radius"],
            "legs": ["upper_leg", "lower_leg"], "limb_r": ["leg_radius"], "tail": ["tail_length", "tail_radius"],
        },
    }[family]
    dims = dict(base)
    for names in groups.values():
        f = rng.uniform(1 - v, 1 + v)
        for n in names:
            dims[n] = base[n] * f
    return dims


def _pose_angles(spec, family, pose_index):
    rng = np.random.default_rng([spec.seed, _FAMILY_CODE[family], 2, pose_index])
    angles = {}
    for name, (axes, ranges) in spec.joints_for(family).items():
        angles[name] = [(ax, float(lo + (hi - lo) * rng.random())) for ax, (lo, hi) in zip(axes, ranges)]
    return angles


def build_subject(spec, family, subject_index, pose_index=None, blend=0.2):
    """Return (canonical, posed) meshes; posed is None when pose_index is None."""
    dims = _subject_dimensions(spec, family, subject_index)
    bones = _biped_bones(dims) if family == "biped" else _quadruped_bones(dims)
    by_name = {b.name: b for b in bones}
    parts = [_capsule(b, spec.segments) for b in bones]
    canonical = merge_meshes([Mesh(v, f) for v, f, _ in parts])
    if pose_index is None:
        return canonical, None

    angles = _pose_angles(spec, family, pose_index)
    rot, disp = {}, {}
    eye = np.eye(3)
    for b in bones:  # parents precede children
        local = eye
        for ax, deg in angles.get(b.joint, []):
            local = local @ _rotation(ax, deg)
        if b.parent is None:
            rot[b.name], disp[b.name] = local, np.zeros(3)
        else:
            par = by_name[b.parent]
            rot[b.name] = rot[b.parent] @ local
            disp[b.name] = disp[b.parent] + (rot[b.parent] - eye) @ (b.head - par.head)

    posed_parts = []
    for b, (verts, faces, t) in zip(bones, parts):

        def offset(name, v=verts):
            bone = by_name[name]
            return (v - bone.head) @ (rot[name] - eye).T + disp[name]

        moved = offset(b.name)
        if b.parent is not None:
            w_parent = (0.5 * np.clip(1 - t / blend, 0, 1))[:, None]
            moved = (1 - w_parent) * moved + w_parent * offset(b.parent)
        posed_parts.append(Mesh(verts + moved, faces))
    return canonical, merge_meshes(posed_parts)


def sample_indices(seed, spec):
    return (seed // spec.n_poses) % spec.n_subjects, seed % spec.n_poses


def family_of(spec, subject_index):
    fams = spec.families()
    return fams[subject_index % len(fams)]


def generate_procedural_sample(seed, spec):
    """Map a sample seed to (canonical mesh, posed mesh, subject_id, pose_id).

    ``seed // n_poses`` selects the subject and ``seed % n_poses`` the pose, so
    seeds 0 .. n_subjects * n_poses - 1 enumerate the full grid once.
    """
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    spec.validate()
    subject, pose = sample_indices(seed, spec)
    family = family_of(spec, subject)
    canonical, posed = build_subject(spec, family, subject, pose)
    return canonical, posed, f"{family}-s{subject:02d}", f"p{pose:02d}"
