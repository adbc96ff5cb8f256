"""Camera model, software depth rendering, and point visibility.

The depth rasterizer is a plain z-buffer over pinhole projection with
perspective-correct depth interpolation and near-plane clipping; back-face
culling is disabled because input meshes may be non-orientable. Visibility
of a point is a depth comparison against the rendered scene at its pixel,
with a small epsilon to absorb discretization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import PointCloud, NNIndex
from .transforms import SimilarityTransform

VISIBILITY_EPSILON = 0.002  # meters
NEAR_PLANE = 1e-6  # meters; geometry closer than this is clipped
SENTINEL = np.inf  # depth-map value for pixels no surface covers


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: z forward, x right, y down, units of pixels/meters."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_from_camera: SimilarityTransform = field(default_factory=SimilarityTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if not self.world_from_camera.is_rigid():
            raise ValueError("camera pose must be rigid (scale 1)")

    def camera_from_world(self) -> SimilarityTransform:
        return self.world_from_camera.inverse()

    def project(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (n, 2) and camera-space depth (n,) of points.

        Points at or behind the camera get non-finite pixel coordinates.
        """
        cam = self.camera_from_world().apply(points_world)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(z > 0, self.fx * cam[:, 0] / z + self.cx, np.nan)
            v = np.where(z > 0, self.fy * cam[:, 1] / z + self.cy, np.nan)
        return np.stack([u, v], axis=1), z


@dataclass
class DepthMap:
    """Per-pixel nearest-surface depth in meters; SENTINEL where empty."""

    width: int
    height: int
    depth: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        if self.depth.shape != (self.height, self.width):
            raise ValueError("depth array shape must be (height, width)")

    def hit_fraction(self) -> float:
        return float(np.isfinite(self.depth).mean())


@dataclass
class VisibilityMask:
    visible: np.ndarray
    epsilon: float

    def __post_init__(self):
        self.visible = np.asarray(self.visible, dtype=bool)

    def __len__(self) -> int:
        return len(self.visible)

    @property
    def n_visible(self) -> int:
        return int(self.visible.sum())


def render_depth(scene_meshes, camera: CameraModel, resolution_scale: float = 1.0) -> DepthMap:
    """Z-buffer depth of posed meshes from the camera.

    Args:
        scene_meshes: iterable of (TriangleMesh, SimilarityTransform) pairs;
            the pose maps mesh-local coordinates to world.
        camera: view to render from.
        resolution_scale: multiplier on the native camera resolution.

    Returns:
        DepthMap at the scaled resolution; pixels nothing covers hold the
        sentinel. An empty frustum is not an error.
    """
    w = max(1, int(round(camera.width * resolution_scale)))
    h = max(1, int(round(camera.height * resolution_scale)))
    sx, sy = w / camera.width, h / camera.height
    fx, fy = camera.fx * sx, camera.fy * sy
    cx, cy = camera.cx * sx, camera.cy * sy
    buf = np.full((h, w), SENTINEL)

    world_to_cam = camera.camera_from_world()
    for mesh, pose in scene_meshes:
        cam_pose = world_to_cam.compose(pose)
        verts = cam_pose.apply(mesh.vertices)
        for tri in _clip_near(verts[mesh.faces]):
            _raster_triangle(buf, tri, fx, fy, cx, cy)
    return DepthMap(width=w, height=h, depth=buf)


def _clip_near(tris: np.ndarray):
    """Clip camera-space triangles against z >= NEAR_PLANE.

    Yields triangles; a quad produced by clipping is fanned into two.
    """
    z = tris[:, :, 2]
    front = z >= NEAR_PLANE
    n_front = front.sum(axis=1)
    for t in tris[n_front == 3]:
        yield t
    for tri, keep in zip(tris[(n_front == 1) | (n_front == 2)], front[(n_front == 1) | (n_front == 2)]):
        poly = _clip_poly_near(tri, keep)
        for k in range(1, len(poly) - 1):
            yield np.stack([poly[0], poly[k], poly[k + 1]])


def _clip_poly_near(tri: np.ndarray, keep: np.ndarray) -> list:
    out = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        ka, kb = keep[i], keep[(i + 1) % 3]
        if ka:
            out.append(a)
        if ka != kb:
            t = (NEAR_PLANE - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return out


def _raster_triangle(buf: np.ndarray, tri: np.ndarray, fx, fy, cx, cy):
    h, w = buf.shape
    z = tri[:, 2]
    u = fx * tri[:, 0] / z + cx
    v = fy * tri[:, 1] / z + cy

    u0 = max(int(np.floor(u.min() - 0.5)), 0)
    u1 = min(int(np.ceil(u.max() + 0.5)), w - 1)
    v0 = max(int(np.floor(v.min() - 0.5)), 0)
    v1 = min(int(np.ceil(v.max() + 0.5)), h - 1)
    if u1 < u0 or v1 < v0:
        return

    area = (u[1] - u[0]) * (v[2] - v[0]) - (v[1] - v[0]) * (u[2] - u[0])
    if area == 0.0:
        return

    px, py = np.meshgrid(np.arange(u0, u1 + 1) + 0.5, np.arange(v0, v1 + 1) + 0.5)
    e0 = (u[2] - u[1]) * (py - v[1]) - (v[2] - v[1]) * (px - u[1])
    e1 = (u[0] - u[2]) * (py - v[2]) - (v[0] - v[2]) * (px - u[2])
    e2 = (u[1] - u[0]) * (py - v[0]) - (v[1] - v[0]) * (px - u[0])
    b0, b1, b2 = e0 / area, e1 / area, e2 / area
    inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
    if not inside.any():
        return

    inv_z = b0 * (1.0 / z[0]) + b1 * (1.0 / z[1]) + b2 * (1.0 / z[2])
    depth = np.where(inside & (inv_z > 0), 1.0 / inv_z, SENTINEL)
    window = buf[v0 : v1 + 1, u0 : u1 + 1]
    np.minimum(window, depth, out=window)


def points_visible(
    points: np.ndarray,
    camera: CameraModel,
    scene_depth: DepthMap,
    epsilon: float = VISIBILITY_EPSILON,
) -> np.ndarray:
    """Boolean visibility of world-space points against a rendered scene.

    A point is visible iff it is in front of the camera, projects inside
    the image, and its depth is at most the scene depth at its pixel plus
    epsilon. Points outside the frustum count as occluded.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pix, z = camera.project(points)
    sx = scene_depth.width / camera.width
    sy = scene_depth.height / camera.height
    with np.errstate(invalid="ignore"):
        col = np.floor(pix[:, 0] * sx).astype(np.int64, copy=False) if len(points) else np.zeros(0, np.int64)
        row = np.floor(pix[:, 1] * sy).astype(np.int64, copy=False) if len(points) else np.zeros(0, np.int64)
    ok = (z > 0) & np.isfinite(pix[:, 0]) & np.isfinite(pix[:, 1])
    inb = ok & (col >= 0) & (col < scene_depth.width) & (row >= 0) & (row < scene_depth.height)
    visible = np.zeros(len(points), dtype=bool)
    if inb.any():
        visible[inb] = z[inb] <= scene_depth.depth[row[inb], col[inb]] + epsilon
    return visible


def classify_visibility(
    points: PointCloud,
    camera: CameraModel,
    scene_depth: DepthMap,
    epsilon: float = VISIBILITY_EPSILON,
) -> VisibilityMask:
    """VisibilityMask over a cloud; see points_visible for the rule."""
    return VisibilityMask(points_visible(points.points, camera, scene_depth, epsilon), epsilon)


def classify_with_image_mask(
    points: PointCloud,
    camera: CameraModel,
    mask_image: np.ndarray,
    self_depth: DepthMap,
    epsilon: float = VISIBILITY_EPSILON,
) -> VisibilityMask:
    """Dataset-mask visibility: inside the object's image mask and on its
    front surface (depth test against the object's own depth render).

    ``mask_image`` is a (height, width) boolean array at camera resolution.
    """
    mask_image = np.asarray(mask_image, dtype=bool)
    if mask_image.shape != (camera.height, camera.width):
        raise ValueError("mask resolution must match the camera")
    pts = points.points
    pix, z = camera.project(pts)
    ok = (z > 0) & np.isfinite(pix[:, 0]) & np.isfinite(pix[:, 1])
    col = np.zeros(len(pts), dtype=np.int64)
    row = np.zeros(len(pts), dtype=np.int64)
    with np.errstate(invalid="ignore"):
        col[ok] = np.floor(pix[ok, 0]).astype(np.int64)
        row[ok] = np.floor(pix[ok, 1]).astype(np.int64)
    inb = ok & (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
    front = points_visible(pts, camera, self_depth, epsilon)
    visible = np.zeros(len(pts), dtype=bool)
    visible[inb] = mask_image[row[inb], col[inb]]
    return VisibilityMask(visible & front, epsilon)


@dataclass
class OcclusionSplit:
    """Directed gt-to-recon Chamfer, split by gt-point visibility.

    ``ratio`` is occluded_cd / visible_cd - 1 (0 when both are 0). A side
    with no points reports None and names itself in ``empty_partition``.
    """

    visible_cd: float | None
    occluded_cd: float | None
    ratio: float | None
    n_visible: int
    n_occluded: int
    empty_partition: str | None = None


def occlusion_split_chamfer(
    recon: PointCloud,
    gt: PointCloud,
    alignment,
    camera: CameraModel,
    scene_depth: DepthMap,
    epsilon: float = VISIBILITY_EPSILON,
) -> OcclusionSplit:
    """Split the directed gt-to-recon Chamfer by gt-point visibility.

    The recon cloud is first moved by the alignment transform. Empty
    partitions are reported, not fatal.
    """
    aligned = recon.transformed(alignment.transform)
    d, _ = NNIndex(aligned).query(gt.points)
    visible = points_visible(gt.points, camera, scene_depth, epsilon)

    n_vis = int(visible.sum())
    n_occ = len(gt) - n_vis
    visible_cd = float(d[visible].mean()) if n_vis else None
    occluded_cd = float(d[~visible].mean()) if n_occ else None
    empty = None if (n_vis and n_occ) else ("visible" if not n_vis else "occluded")

    ratio = None
    if visible_cd is not None and occluded_cd is not None:
        if visible_cd == 0.0:
            ratio = 0.0 if occluded_cd == 0.0 else float("inf")
        else:
            ratio = occluded_cd / visible_cd - 1.0
    return OcclusionSplit(visible_cd, occluded_cd, ratio, n_vis, n_occ, empty)
