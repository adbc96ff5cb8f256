"""Mesh-mesh collision detection for posed objects.

Broad phase is a dual traversal of per-mesh AABB trees; narrow phase is a
vectorized triangle-triangle interval test. Grazing contact within
``contact_epsilon`` does not count as collision, so objects resting
against each other are not flagged.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMesh
from .mesh import TriangleMesh
from .transforms import SimilarityTransform, quat_to_matrix

CONTACT_EPSILON = 1e-6  # meters; penetration below this is contact, not collision
_LEAF_SIZE = 8


@dataclass
class CollisionResult:
    in_collision: bool
    intersecting_triangle_pairs: int
    max_penetration_estimate: float | None = None


@dataclass
class SceneCollisionReport:
    pairwise: list  # square matrix of CollisionResult (diagonal None)
    n_objects_in_collision: int
    n_objects_total: int

    @property
    def n_colliding_pairs(self) -> int:
        n = len(self.pairwise)
        return sum(
            1
            for i in range(n)
            for j in range(i + 1, n)
            if self.pairwise[i][j].in_collision
        )

    def objects_in_collision(self) -> list:
        n = len(self.pairwise)
        return [
            i
            for i in range(n)
            if any(j != i and self.pairwise[i][j].in_collision for j in range(n))
        ]


class BVH:
    """Static axis-aligned bounding-box tree over mesh triangles.

    Nodes are stored in flat arrays; leaves reference contiguous runs of
    the permuted triangle index list. Read-only after construction.
    """

    def __init__(self, mesh: TriangleMesh):
        if mesh.n_faces == 0:
            raise EmptyMesh("cannot build a BVH over an empty mesh")
        tri = mesh.triangles()
        self.tri_lo = tri.min(axis=1)
        self.tri_hi = tri.max(axis=1)
        centers = 0.5 * (self.tri_lo + self.tri_hi)

        order = np.arange(mesh.n_faces)
        nodes_lo, nodes_hi, lefts, rights, starts, counts = [], [], [], [], [], []

        def build(lo_i: int, hi_i: int) -> int:
            node = len(nodes_lo)
            idx = order[lo_i:hi_i]
            nodes_lo.append(self.tri_lo[idx].min(axis=0))
            nodes_hi.append(self.tri_hi[idx].max(axis=0))
            lefts.append(-1)
            rights.append(-1)
            starts.append(lo_i)
            counts.append(hi_i - lo_i)
            if hi_i - lo_i > _LEAF_SIZE:
                axis = int(np.argmax(nodes_hi[node] - nodes_lo[node]))
                mid = (lo_i + hi_i) // 2
                part = np.argsort(centers[idx][:, axis], kind="stable")
                order[lo_i:hi_i] = idx[part]
                left = build(lo_i, mid)
                right = build(mid, hi_i)
                lefts[node], rights[node] = left, right
            return node

        build(0, mesh.n_faces)
        self.order = order
        self.node_lo = np.array(nodes_lo)
        self.node_hi = np.array(nodes_hi)
        self.left = np.array(lefts)
        self.right = np.array(rights)
        self.start = np.array(starts)
        self.count = np.array(counts)
        self.triangles = tri

    @property
    def root_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.node_lo[0], self.node_hi[0]

    def leaf_triangle_indices(self) -> np.ndarray:
        """Every triangle index reachable through leaves, in tree order."""
        out = []
        stack = [0]
        while stack:
            n = stack.pop()
            if self.left[n] < 0:
                out.extend(self.order[self.start[n] : self.start[n] + self.count[n]])
            else:
                stack.append(self.right[n])
                stack.append(self.left[n])
        return np.array(out, dtype=np.int64)


def build_bvh(mesh: TriangleMesh) -> BVH:
    return BVH(mesh)


def candidate_pairs(bvh_a: BVH, bvh_b: BVH, b_from_a: SimilarityTransform) -> np.ndarray:
    """Triangle index pairs (i_a, i_b) whose boxes may overlap.

    ``b_from_a`` maps A-local coordinates into B's frame; A's boxes are
    conservatively re-axis-aligned in B's frame, so the pruning never
    discards a truly intersecting pair.
    """
    rot = quat_to_matrix(b_from_a.rotation) * b_from_a.scale
    absrot = np.abs(rot)
    t = b_from_a.translation

    def a_box_in_b(lo, hi):
        c = 0.5 * (lo + hi)
        e = 0.5 * (hi - lo)
        c2 = rot @ c + t
        e2 = absrot @ e
        return c2 - e2, c2 + e2

    pairs = []
    stack = [(0, 0)]
    while stack:
        na, nb = stack.pop()
        lo_a, hi_a = a_box_in_b(bvh_a.node_lo[na], bvh_a.node_hi[na])
        if np.any(lo_a > bvh_b.node_hi[nb]) or np.any(bvh_b.node_lo[nb] > hi_a):
            continue
        leaf_a = bvh_a.left[na] < 0
        leaf_b = bvh_b.left[nb] < 0
        if leaf_a and leaf_b:
            ia = bvh_a.order[bvh_a.start[na] : bvh_a.start[na] + bvh_a.count[na]]
            ib = bvh_b.order[bvh_b.start[nb] : bvh_b.start[nb] + bvh_b.count[nb]]
            pairs.append(np.stack(np.meshgrid(ia, ib, indexing="ij"), axis=-1).reshape(-1, 2))
        elif leaf_b or (not leaf_a and (bvh_a.count[na] >= bvh_b.count[nb])):
            stack.append((bvh_a.right[na], nb))
            stack.append((bvh_a.left[na], nb))
        else:
            stack.append((na, bvh_b.right[nb]))
            stack.append((na, bvh_b.left[nb]))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    return np.concatenate(pairs)


def tri_tri_intersections(tris_a: np.ndarray, tris_b: np.ndarray, epsilon: float):
    """Batched triangle-pair intersection with contact snapping.

    Args:
        tris_a, tris_b: (k, 3, 3) paired corner coordinates.
        epsilon: plane distances within this snap to zero, so penetration
            at most epsilon is treated as touching contact.

    Returns:
        (hit, penetration): boolean (k,) and per-pair penetration estimate
        (k,), zero where not hit. Coplanar contact is never a hit.
    """
    k = len(tris_a)
    if k == 0:
        return np.zeros(0, dtype=bool), np.zeros(0)

    da = _plane_side(tris_a, tris_b, epsilon)  # A verts against B's plane
    db = _plane_side(tris_b, tris_a, epsilon)
    hit = np.zeros(k, dtype=bool)
    pen = np.zeros(k)

    # transversal case: both triangles strictly straddle the other's plane
    # and their crossing segments on the common line overlap
    straddle_a = (da > 0).any(axis=1) & (da < 0).any(axis=1)
    straddle_b = (db > 0).any(axis=1) & (db < 0).any(axis=1)
    alive = straddle_a & straddle_b
    n_a = _unit_normals(tris_a)
    n_b = _unit_normals(tris_b)
    if alive.any():
        d_line = np.cross(n_a, n_b)
        proj_a = np.einsum("kij,kj->ki", tris_a, d_line)
        proj_b = np.einsum("kij,kj->ki", tris_b, d_line)
        lo_a, hi_a = _cross_interval(da, proj_a)
        lo_b, hi_b = _cross_interval(db, proj_b)
        overlap = np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b)
        hit = alive & (overlap > 0)
        if hit.any():
            pen_a = np.minimum(np.maximum(da, 0).max(axis=1), np.maximum(-da, 0).max(axis=1))
            pen_b = np.minimum(np.maximum(db, 0).max(axis=1), np.maximum(-db, 0).max(axis=1))
            pen[hit] = np.minimum(pen_a, pen_b)[hit]

    # coplanar case: tangential contact. Opposite winding normals mean the
    # volumes rest against each other (contact, not collision); aligned
    # normals mean both interiors extend to the same side, i.e. the meshes
    # overlap wherever the planar regions do by more than epsilon.
    coplanar = (da == 0).all(axis=1) & (db == 0).all(axis=1)
    if coplanar.any():
        aligned = np.einsum("ki,ki->k", n_a, n_b) > 0
        check = coplanar & aligned
        if check.any():
            deep = _coplanar_overlap(tris_a[check], tris_b[check], n_a[check], epsilon)
            hit[check] |= deep
    return hit, pen


def _unit_normals(tris: np.ndarray) -> np.ndarray:
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, length, out=np.zeros_like(n), where=length > 0)


def _plane_side(tris: np.ndarray, plane_tris: np.ndarray, epsilon: float) -> np.ndarray:
    """Signed vertex distances of ``tris`` to each partner's plane, snapped."""
    n = _unit_normals(plane_tris)
    offs = np.einsum("ki,ki->k", n, plane_tris[:, 0])
    d = np.einsum("kij,kj->ki", tris, n) - offs[:, None]
    d[np.abs(d) <= epsilon] = 0.0
    return d


def _cross_interval(d: np.ndarray, proj: np.ndarray):
    """Projection interval of each triangle's plane-crossing segment.

    ``d`` holds snapped signed distances; a vertex on the plane is its own
    endpoint, and strictly-crossing edges contribute interpolated points.
    Rows that do not straddle get empty (inverted) intervals.
    """
    k = len(d)
    cand = np.full((k, 6), np.nan)
    edges = ((0, 1), (1, 2), (2, 0))
    for e, (i, j) in enumerate(edges):
        m = d[:, i] * d[:, j] < 0
        if m.any():
            frac = d[m, i] / (d[m, i] - d[m, j])
            cand[m, e] = proj[m, i] + frac * (proj[m, j] - proj[m, i])
    for i in range(3):
        m = d[:, i] == 0.0
        cand[m, 3 + i] = proj[m, i]
    cand.sort(axis=1)  # NaNs move to the end
    # a straddling triangle has exactly two endpoints; other rows yield NaN
    # intervals whose comparisons are False, so they can never become hits
    return cand[:, 0], cand[:, 1]


def _coplanar_overlap(tris_a, tris_b, normals, epsilon) -> np.ndarray:
    """Do coplanar triangle pairs overlap by more than epsilon?

    Separating-axis test in the common plane over the six edge normals;
    a pair counts only if every axis shows overlap above epsilon, so
    sliver overlaps from grazing contact stay below the line.
    """
    k = len(tris_a)
    # build an in-plane basis per pair
    ref = np.where(np.abs(normals[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    u = np.cross(normals, ref)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(normals, u)
    a2 = np.stack([np.einsum("kij,kj->ki", tris_a, u), np.einsum("kij,kj->ki", tris_a, v)], axis=-1)
    b2 = np.stack([np.einsum("kij,kj->ki", tris_b, u), np.einsum("kij,kj->ki", tris_b, v)], axis=-1)

    overlap_all = np.ones(k, dtype=bool)
    for tri in (a2, b2):
        for e in range(3):
            edge = tri[:, (e + 1) % 3] - tri[:, e]
            axis = np.stack([-edge[:, 1], edge[:, 0]], axis=-1)
            norm = np.linalg.norm(axis, axis=1, keepdims=True)
            axis = np.divide(axis, norm, out=np.zeros_like(axis), where=norm > 0)
            pa = np.einsum("kij,kj->ki", a2, axis)
            pb = np.einsum("kij,kj->ki", b2, axis)
            overlap = np.minimum(pa.max(axis=1), pb.max(axis=1)) - np.maximum(
                pa.min(axis=1), pb.min(axis=1)
            )
            overlap_all &= overlap > epsilon
    return overlap_all


def mesh_pair_collision(
    a: TriangleMesh,
    pose_a: SimilarityTransform,
    b: TriangleMesh,
    pose_b: SimilarityTransform,
    contact_epsilon: float = CONTACT_EPSILON,
    bvh_a: BVH | None = None,
    bvh_b: BVH | None = None,
) -> CollisionResult:
    """Do two posed meshes interpenetrate by more than contact_epsilon?

    Poses must be rigid. Prebuilt BVHs may be passed to amortize scenes.
    """
    if not (pose_a.is_rigid() and pose_b.is_rigid()):
        raise ValueError("collision poses must be rigid")
    bvh_a = bvh_a or BVH(a)
    bvh_b = bvh_b or BVH(b)
    b_from_a = pose_b.inverse().compose(pose_a)
    pairs = candidate_pairs(bvh_a, bvh_b, b_from_a)
    if len(pairs) == 0:
        return CollisionResult(False, 0, None)
    # narrow phase in B's local frame
    tris_a = b_from_a.apply(a.triangles()[pairs[:, 0]].reshape(-1, 3)).reshape(-1, 3, 3)
    tris_b = b.triangles()[pairs[:, 1]]
    hit, pen = tri_tri_intersections(tris_a, tris_b, contact_epsilon)
    n_hit = int(hit.sum())
    return CollisionResult(n_hit > 0, n_hit, float(pen.max()) if n_hit else None)


def scene_collision_report(objects, contact_epsilon: float = CONTACT_EPSILON) -> SceneCollisionReport:
    """All-pairs collision over posed meshes.

    Args:
        objects: list of (TriangleMesh, SimilarityTransform).
        contact_epsilon: grazing-contact allowance in meters.
    """
    n = len(objects)
    if n < 2:
        raise ValueError("scene collision needs at least 2 objects")
    bvhs = [BVH(mesh) for mesh, _ in objects]
    matrix = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            res = mesh_pair_collision(
                objects[i][0], objects[i][1], objects[j][0], objects[j][1],
                contact_epsilon, bvh_a=bvhs[i], bvh_b=bvhs[j],
            )
            matrix[i][j] = res
            matrix[j][i] = CollisionResult(
                res.in_collision, res.intersecting_triangle_pairs, res.max_penetration_estimate
            )
    in_collision = sum(
        1 for i in range(n) if any(j != i and matrix[i][j].in_collision for j in range(n))
    )
    return SceneCollisionReport(matrix, in_collision, n)
