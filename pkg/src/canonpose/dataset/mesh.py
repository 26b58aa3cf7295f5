from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ..errors import DegenerateMeshError, FormatError, ValidationError

NORMALIZED_EXTENT = 0.9


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValidationError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValidationError(f"faces must be (F, 3), got {self.faces.shape}")
        if len(self.vertices) < 4:
            raise ValidationError("a mesh needs at least 4 vertices")
        if len(self.faces) < 1:
            raise ValidationError("a mesh needs at least one face")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise ValidationError("face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValidationError("non-finite vertex coordinates")

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def triangles(self):
        """(F, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.faces]

    def translated(self, offset):
        return Mesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces.copy())


def normalize_mesh(mesh):
    """Center the bounding box at the origin and scale its longest side to 0.9."""
    lo, hi = mesh.bounds()
    extent = float(np.max(hi - lo))
    if not extent > 0:
        raise DegenerateMeshError("bounding box has zero extent on every axis")
    center = (lo + hi) / 2
    verts = (mesh.vertices - center) * (NORMALIZED_EXTENT / extent)
    return Mesh(verts, mesh.faces.copy())


def merge_meshes(meshes):
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def face_components(mesh):
    """Label each face with the index of its vertex-connected component."""
    n = len(mesh.vertices)
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    graph = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    _, vertex_labels = connected_components(graph, directed=False)
    return np.unique(vertex_labels[f[:, 0]], return_inverse=True)[1]


def is_closed(faces):
    """True when every undirected edge is shared by exactly two faces."""
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def load_obj(path):
    """Read ``v x y z`` / ``f i j k`` lines; polygons are fan-triangulated."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(p) for p in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from exc
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(path, mesh):
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def box_mesh(center=(0.0, 0.0, 0.0), size=1.0):
    """Closed axis-aligned box made of 12 outward-facing triangles."""
    size = np.broadcast_to(np.asarray(size, dtype=np.float64), (3,))
    corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    verts = corners * size + np.asarray(center, dtype=np.float64)
    faces = np.array([
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ])
    return Mesh(verts, faces)


def uv_sphere(radius=0.5, center=(0.0, 0.0, 0.0), n_lon=32, n_lat=16):
    lat = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    lon = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    ring = np.stack(np.meshgrid(lat, lon, indexing="ij"), -1).reshape(-1, 2)
    body = np.column_stack([np.sin(ring[:, 0]) * np.cos(ring[:, 1]),
                            np.cos(ring[:, 0]),
                            np.sin(ring[:, 0]) * np.sin(ring[:, 1])])
    verts = np.vstack([[0, 1, 0], body, [0, -1, 0]]) * radius + np.asarray(center, dtype=np.float64)
    faces = _cap_and_ring_faces(n_rings=n_lat - 1, n_seg=n_lon)
    return Mesh(verts, faces)


def _cap_and_ring_faces(n_rings, n_seg):
    """Faces for [top pole, n_rings rings of n_seg vertices, bottom pole]."""
    faces = []
    top, bottom = 0, 1 + n_rings * n_seg
    for j in range(n_seg):
        faces.append([top, 1 + (j + 1) % n_seg, 1 + j])
    for i in range(n_rings - 1):
        a0, b0 = 1 + i * n_seg, 1 + (i + 1) * n_seg
        for j in range(n_seg):
            j1 = (j + 1) % n_seg
            faces.append([a0 + j, a0 + j1, b0 + j])
            faces.append([a0 + j1, b0 + j1, b0 + j])
    last = 1 + (n_rings - 1) * n_seg
    for j in range(n_seg):
        faces.append([bottom, last + j, last + (j + 1) % n_seg])
    return np.array(faces, dtype=np.int64)
