"""Triangle meshes, uniform surface sampling, nearest neighbors, Chamfer.

All geometry is in meters. Meshes are validated on construction: face
indices must be in range and degenerate faces (area below
``DEGENERATE_AREA``) are expected to have been filtered by the loader.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import meshio
from .errors import EmptyCloud, EmptyMesh

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12  # m^2; faces below this are dropped on load


@dataclass
class TriangleMesh:
    """Indexed triangle surface. ``vertices`` (n,3) float, ``faces`` (m,3) int."""

    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """Corner coordinates per face, shape (m, 3, 3)."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit normals from winding; zero vector for degenerate faces."""
        tri = self.triangles()
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norms = np.linalg.norm(cross, axis=1, keepdims=True)
        return np.divide(cross, norms, out=np.zeros_like(cross), where=norms > 0)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, transform) -> "TriangleMesh":
        return TriangleMesh(transform.apply(self.vertices), self.faces.copy())

    def is_watertight(self) -> bool:
        """Every undirected edge shared by exactly two faces with opposite
        direction (consistent winding)."""
        if self.n_faces == 0:
            return False
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        keys = directed[:, 0] * len(self.vertices) + directed[:, 1]
        if len(np.unique(keys)) != len(keys):
            return False  # a directed edge repeats: inconsistent winding
        swapped = directed[:, 1] * len(self.vertices) + directed[:, 0]
        return bool(np.all(np.isin(keys, swapped)))


@dataclass
class PointCloud:
    """Surface samples with optional unit normals and source-face indices."""

    points: np.ndarray
    normals: np.ndarray | None = None
    face_indices: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals cardinality differs from points")
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals are not unit length")
        if self.face_indices is not None:
            self.face_indices = np.asarray(self.face_indices, dtype=np.int64).reshape(-1)
            if len(self.face_indices) != len(self.points):
                raise ValueError("face_indices cardinality differs from points")

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, transform) -> "PointCloud":
        normals = None
        if self.normals is not None:
            normals = transform.rotate_only(self.normals)
        return PointCloud(transform.apply(self.points), normals, self.face_indices)

    def select(self, mask) -> "PointCloud":
        mask = np.asarray(mask)
        return PointCloud(
            self.points[mask],
            None if self.normals is None else self.normals[mask],
            None if self.face_indices is None else self.face_indices[mask],
        )


@dataclass
class ChamferResult:
    mean_recon_to_gt: float
    mean_gt_to_recon: float
    symmetric: float
    per_point_recon_to_gt: np.ndarray = field(repr=False)


class NNIndex:
    """Exact Euclidean nearest-neighbor index over a point cloud.

    Immutable after construction and shareable across threads.
    """

    def __init__(self, cloud: PointCloud | np.ndarray):
        points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
        if len(points) == 0:
            raise EmptyCloud("cannot index an empty cloud")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the nearest indexed point per query."""
        d, i = self._tree.query(np.asarray(points, dtype=float))
        return np.atleast_1d(d), np.atleast_1d(i)


def build_nn_index(cloud: PointCloud) -> NNIndex:
    return NNIndex(cloud)


def load_mesh(path: str | Path, fmt: str | None = None, scale: float = 1.0) -> TriangleMesh:
    """Load a mesh, apply a unit-scale factor, and drop degenerate faces.

    Raises UnreadableFile / UnsupportedFormat on bad input and EmptyMesh if
    no face survives the degenerate filter.
    """
    vertices, faces = meshio.read_mesh_file(path, fmt)
    if scale != 1.0:
        vertices = vertices * float(scale)
    mesh = TriangleMesh(vertices, faces)
    if mesh.n_faces:
        areas = mesh.face_areas()
        keep = areas >= DEGENERATE_AREA
        dropped = int((~keep).sum())
        if dropped:
            log.info("dropped %d degenerate faces from %s", dropped, path)
            mesh = TriangleMesh(mesh.vertices, mesh.faces[keep])
    if mesh.n_faces == 0:
        raise EmptyMesh(f"{path}: no non-degenerate faces")
    log.info("loaded %s: %d vertices, %d faces", path, mesh.n_vertices, mesh.n_faces)
    return mesh


def sample_surface(mesh: TriangleMesh, n: int, seed: int | np.random.Generator = 0) -> PointCloud:
    """Draw ``n`` area-weighted uniform samples from the mesh surface.

    Faces are chosen with probability proportional to area and barycentric
    coordinates are uniform on each triangle (square-root reflection).
    Deterministic for a fixed seed. Normals come from the face planes.
    """
    if mesh.n_faces == 0:
        raise EmptyMesh("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    areas = mesh.face_areas()
    cum = np.cumsum(areas)
    face_idx = np.searchsorted(cum, rng.random(n) * cum[-1])
    face_idx = np.minimum(face_idx, mesh.n_faces - 1)

    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[face_idx]]
    points = (
        (1.0 - r1)[:, None] * tri[:, 0]
        + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
        + (r1 * r2)[:, None] * tri[:, 2]
    )
    normals = mesh.face_normals()[face_idx]
    return PointCloud(points, normals, face_idx)


def chamfer_distance(recon: PointCloud, gt: PointCloud, gt_index: NNIndex | None = None) -> ChamferResult:
    """Symmetric Chamfer distance: mean of the two directed mean-L2 terms.

    ``gt_index`` may be passed to reuse a prebuilt index for the gt cloud.
    """
    if len(recon) == 0 or len(gt) == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    gt_index = gt_index or NNIndex(gt)
    d_r2g, _ = gt_index.query(recon.points)
    d_g2r, _ = NNIndex(recon).query(gt.points)
    mean_r2g = float(d_r2g.mean())
    mean_g2r = float(d_g2r.mean())
    return ChamferResult(
        mean_recon_to_gt=mean_r2g,
        mean_gt_to_recon=mean_g2r,
        symmetric=0.5 * (mean_r2g + mean_g2r),
        per_point_recon_to_gt=d_r2g,
    )


@dataclass
class MassProperties:
    """Center of mass plus the data stability analysis needs.

    ``watertight`` is False when the volumetric integral was impossible and
    the area-weighted surface centroid / shell inertia were used instead.
    """

    center: np.ndarray
    watertight: bool
    volume: float
    inertia: np.ndarray  # 3x3 about the center of mass, unit density


def center_of_mass(mesh: TriangleMesh) -> MassProperties:
    """Uniform-density centroid.

    Watertight meshes get the exact volumetric centroid via signed
    tetrahedron decomposition; open meshes fall back to the area-weighted
    surface centroid (flagged via ``watertight=False``).
    """
    if mesh.n_faces == 0:
        raise EmptyMesh("center of mass of an empty mesh")
    if mesh.is_watertight():
        return _volume_mass_properties(mesh)
    return _surface_mass_properties(mesh)


def _volume_mass_properties(mesh: TriangleMesh) -> MassProperties:
    tri = mesh.triangles()
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    signed = np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0
    volume = float(signed.sum())
    if abs(volume) < 1e-15:
        return _surface_mass_properties(mesh)
    center = (signed[:, None] * (a + b + c)).sum(axis=0) / (4.0 * volume)
    if volume < 0:  # inward winding; centroid formula is sign-safe, volume is not
        volume = -volume
    inertia = _volume_inertia(tri, center)
    return MassProperties(center=center, watertight=True, volume=volume, inertia=inertia)


def _surface_mass_properties(mesh: TriangleMesh) -> MassProperties:
    tri = mesh.triangles()
    areas = mesh.face_areas()
    centroids = tri.mean(axis=1)
    total = areas.sum()
    center = (areas[:, None] * centroids).sum(axis=0) / total
    # thin-shell inertia: lump each face's area at its three corners
    w = np.repeat(areas / 3.0, 3)
    r = tri.reshape(-1, 3) - center
    r2 = np.einsum("ij,ij->i", r, r)
    point_terms = np.eye(3)[None] * r2[:, None, None] - np.einsum("ij,ik->ijk", r, r)
    inertia = np.einsum("i,ijk->jk", w, point_terms)
    return MassProperties(center=center, watertight=False, volume=0.0, inertia=inertia)


def _volume_inertia(tri: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Inertia tensor of the enclosed solid about ``center``, unit density.

    Canonical covariance-of-tetrahedra accumulation (signed, so holes and
    inward-facing regions cancel correctly).
    """
    canonical = np.array(
        [[1 / 60, 1 / 120, 1 / 120], [1 / 120, 1 / 60, 1 / 120], [1 / 120, 1 / 120, 1 / 60]]
    )
    verts = tri - center
    det = np.einsum("ij,ij->i", verts[:, 0], np.cross(verts[:, 1], verts[:, 2]))
    # covariance of each tetrahedron (origin, a, b, c): det * V^T C V
    cov = np.einsum("n,nai,ab,nbj->ij", det, verts, canonical, verts)
    return np.trace(cov) * np.eye(3) - cov
