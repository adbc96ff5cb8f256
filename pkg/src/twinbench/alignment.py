"""Similarity-transform registration of reconstructions to ground truth.

Pipeline: estimate a frozen scale from PCA statistics, then run
point-to-point ICP from many low-discrepancy rotation starts and keep the
lowest-RMSE result. A masked variant drops camera-occluded points from the
correspondences at every iteration. A symmetry pass corrects flip
ambiguities for objects with declared rotational symmetries.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AllPointsOccluded, DegenerateCloud, EmptyCloud, NonFiniteUpdate
from .mesh import NNIndex, PointCloud, chamfer_distance
from .transforms import (
    SimilarityTransform,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_to_matrix,
)

log = logging.getLogger(__name__)

N_STARTS = 512
MAX_ITER = 60
CONVERGENCE_TOL = 1e-7  # meters of RMSE improvement
MAX_ICP_POINTS = 256  # correspondence subsample cap per start

# constants of the S^3 double spiral (sqrt(2) and the real root of x^4 = x + 4)
_PHI = math.sqrt(2.0)
_PSI = 1.533751168755204288118041


@dataclass
class AlignmentResult:
    transform: SimilarityTransform
    rmse: float
    n_iterations: int
    start_index: int = 0
    converged: bool = False


@dataclass(frozen=True)
class SymmetrySpec:
    """Finite rotational symmetries of an object: (axis, order) pairs.

    Order k contributes the k-1 non-identity rotations by 2*pi*j/k about
    the axis. Axes are in the ground-truth object frame.
    """

    axes: tuple = field(default_factory=tuple)  # ((unit 3-vector, order), ...)

    @classmethod
    def from_manifest(cls, entries) -> "SymmetrySpec":
        axes = []
        for e in entries or []:
            axis = np.asarray(e["axis"], dtype=float)
            norm = np.linalg.norm(axis)
            if norm == 0:
                raise ValueError("symmetry axis must be nonzero")
            axes.append((tuple(axis / norm), int(e["order"])))
        return cls(axes=tuple(axes))

    def flip_rotations(self):
        """Non-identity candidate rotations as unit quaternions."""
        quats = []
        for axis, order in self.axes:
            for j in range(1, order):
                quats.append(quat_from_axis_angle(np.asarray(axis), 2.0 * math.pi * j / order))
        return quats


def estimate_scale(gt: PointCloud, recon: PointCloud) -> float:
    """Median ratio of principal-axis standard deviations (gt over recon).

    Each cloud is analyzed independently; components are paired by rank of
    eigenvalue. Raises DegenerateCloud when either covariance has rank < 3.
    """
    stds_gt = _principal_stds(gt.points)
    stds_recon = _principal_stds(recon.points)
    return float(np.median(stds_gt / stds_recon))


def _principal_stds(points: np.ndarray) -> np.ndarray:
    if len(points) < 4:
        raise DegenerateCloud("need at least 4 points for scale estimation")
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    evals = np.linalg.eigvalsh(cov)[::-1]  # descending
    if evals[0] <= 0 or evals[-1] < 1e-12 * evals[0]:
        raise DegenerateCloud("covariance rank < 3")
    return np.sqrt(evals)


def sample_unit_quaternions(n: int) -> np.ndarray:
    """Deterministic low-discrepancy rotation set on S^3, shape (n, 4) wxyz.

    Element 0 is the identity; the rest follow a double-Fibonacci spiral.
    Signs are canonicalized so antipodal representatives coincide (q and -q
    are the same rotation).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    quats = np.zeros((n, 4))
    quats[0, 0] = 1.0
    if n > 1:
        m = n - 1
        i = np.arange(m, dtype=float)
        s = i + 0.5
        t = s / m
        r = np.sqrt(t)
        big_r = np.sqrt(1.0 - t)
        alpha = 2.0 * math.pi * s / _PHI
        beta = 2.0 * math.pi * s / _PSI
        # spiral gives (x, y, z, w); store as (w, x, y, z)
        quats[1:, 1] = r * np.sin(alpha)
        quats[1:, 2] = r * np.cos(alpha)
        quats[1:, 3] = big_r * np.sin(beta)
        quats[1:, 0] = big_r * np.cos(beta)
    # canonical sign: first nonzero component positive
    for k in range(4):
        col = quats[:, k]
        undecided = np.all(np.abs(quats[:, :k]) < 1e-15, axis=1) if k else np.ones(n, bool)
        quats[undecided & (col < 0)] *= -1.0
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    return quats / norms


def min_pairwise_rotation_angle(quats: np.ndarray) -> float:
    """Smallest geodesic rotation angle (radians) over all pairs."""
    dots = np.abs(quats @ quats.T)
    np.fill_diagonal(dots, 0.0)
    return float(2.0 * math.acos(min(dots.max(), 1.0)))


def icp_refine(
    source: PointCloud,
    target_index: NNIndex,
    init: SimilarityTransform,
    max_iter: int = MAX_ITER,
    convergence_tol: float = CONVERGENCE_TOL,
    start_index: int = 0,
    source_mask_fn=None,
) -> AlignmentResult:
    """Point-to-point ICP with the scale frozen at ``init.scale``.

    Alternates nearest-neighbor correspondence with a closed-form rigid
    update until the RMSE improvement drops below ``convergence_tol`` or
    ``max_iter`` is reached. When ``source_mask_fn`` is given it is applied
    to the transformed source at every iteration and masked-out points are
    excluded from both the update and the RMSE.
    """
    if len(source) == 0 or len(target_index) == 0:
        raise EmptyCloud("icp needs non-empty clouds")
    pts = source.points
    scale = init.scale
    current = init
    prev_rmse = _masked_rmse(pts, current, target_index, source_mask_fn)
    rmse = prev_rmse
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        moved = current.apply(pts)
        keep = _apply_mask(moved, source_mask_fn)
        d, idx = target_index.query(moved[keep])
        current = _rigid_update(pts[keep] * scale, target_index.points[idx], scale)
        rmse = _masked_rmse(pts, current, target_index, source_mask_fn)
        if prev_rmse - rmse < convergence_tol:
            converged = True
            break
        prev_rmse = rmse
    return AlignmentResult(current, rmse, n_iter, start_index, converged)


def _apply_mask(points: np.ndarray, mask_fn) -> np.ndarray:
    if mask_fn is None:
        return slice(None)
    keep = np.asarray(mask_fn(points), dtype=bool)
    if not keep.any():
        raise AllPointsOccluded("mask removed every source point")
    return keep


def _masked_rmse(pts, transform, target_index, mask_fn) -> float:
    moved = transform.apply(pts)
    keep = _apply_mask(moved, mask_fn)
    d, _ = target_index.query(moved[keep])
    return float(np.sqrt(np.mean(d * d)))


def _rigid_update(scaled_src: np.ndarray, tgt: np.ndarray, scale: float) -> SimilarityTransform:
    """Closed-form rotation/translation minimizing ||R p + t - q||^2."""
    pc = scaled_src.mean(axis=0)
    qc = tgt.mean(axis=0)
    h = (scaled_src - pc).T @ (tgt - qc)
    if not np.all(np.isfinite(h)):
        raise NonFiniteUpdate("non-finite correspondence covariance")
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = qc - rot @ pc
    if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(t))):
        raise NonFiniteUpdate("non-finite rigid update")
    return SimilarityTransform(scale, quat_from_matrix(rot), t)


def multistart_align(
    recon: PointCloud,
    gt: PointCloud,
    n_starts: int = N_STARTS,
    max_iter: int = MAX_ITER,
    convergence_tol: float = CONVERGENCE_TOL,
    seed: int = 0,
    max_icp_points: int = MAX_ICP_POINTS,
    visibility_fn=None,
    gt_index: NNIndex | None = None,
) -> AlignmentResult:
    """Best-of-``n_starts`` ICP registration of recon onto gt.

    The scale comes from estimate_scale and stays frozen; every start uses
    the rotation from the low-discrepancy quaternion set with a translation
    that aligns centroids. Correspondences are capped at ``max_icp_points``
    source samples (deterministic for a given seed) to bound runtime; the
    reported RMSE is over that subsample, which preserves the argmin.
    Ties in RMSE resolve to the lowest start index.
    """
    if len(recon) == 0 or len(gt) == 0:
        raise EmptyCloud("alignment needs non-empty clouds")
    scale = estimate_scale(gt, recon)

    if visibility_fn is not None:
        gt_keep = np.asarray(visibility_fn(gt.points), dtype=bool)
        if not gt_keep.any():
            raise AllPointsOccluded("every ground-truth point is occluded")
        target = NNIndex(gt.points[gt_keep])
    else:
        target = gt_index or NNIndex(gt)

    source = recon
    if len(recon) > max_icp_points:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(recon), size=max_icp_points, replace=False))
        source = recon.select(pick)

    centroid_recon = recon.points.mean(axis=0)
    centroid_gt = gt.points.mean(axis=0)
    quats = sample_unit_quaternions(n_starts)
    rotations = np.stack([quat_to_matrix(q) for q in quats])
    translations = centroid_gt - scale * np.einsum("kij,j->ki", rotations, centroid_recon)

    best = _lockstep_icp(
        source.points * scale,
        target,
        scale,
        rotations,
        translations,
        max_iter=max_iter,
        convergence_tol=convergence_tol,
        mask_fn=visibility_fn,
    )
    log.debug("multistart_align: best start %d rmse %.3e", best.start_index, best.rmse)
    return best


def _lockstep_icp(
    scaled_pts: np.ndarray,
    target: NNIndex,
    scale: float,
    rotations: np.ndarray,
    translations: np.ndarray,
    max_iter: int,
    convergence_tol: float,
    mask_fn=None,
) -> AlignmentResult:
    """All ICP starts advanced in lockstep; returns the argmin-RMSE result.

    Each start runs the exact per-start iteration of icp_refine; batching
    only changes execution order, and the post-update correspondences of
    one iteration are reused as the next iteration's input. A start whose
    mask empties is abandoned with infinite RMSE; if every start is
    abandoned the mask hid everything and AllPointsOccluded is raised.
    """
    k = len(rotations)
    rot = rotations.copy()
    trans = translations.copy()
    rmse = np.full(k, np.inf)
    n_iter = np.zeros(k, dtype=int)
    converged = np.zeros(k, dtype=bool)
    alive = np.ones(k, dtype=bool)

    def correspond(r, t):
        """Mask weights, NN distances, NN indices for a batch of transforms."""
        moved = np.einsum("aij,mj->ami", r, scaled_pts) + t[:, None, :]
        if mask_fn is None:
            w = np.ones(moved.shape[:2])
        else:
            w = np.asarray(mask_fn(moved.reshape(-1, 3)), dtype=float).reshape(moved.shape[:2])
        d, idx = target.query(moved.reshape(-1, 3))
        return w, d.reshape(len(r), -1), idx.reshape(len(r), -1)

    def batch_rmse(w, d):
        wsum = w.sum(axis=1)
        safe = np.where(wsum == 0, 1.0, wsum)
        return np.where(wsum == 0, np.inf, np.sqrt(np.sum(w * d * d, axis=1) / safe))

    active = np.arange(k)
    w, d, idx = correspond(rot, trans)
    prev = batch_rmse(w, d)
    rmse[:] = prev[:]

    for it in range(1, max_iter + 1):
        dead = w.sum(axis=1) == 0
        if dead.any():
            alive[active[dead]] = False
            rmse[active[dead]] = np.inf
            active, w, idx = active[~dead], w[~dead], idx[~dead]
        if len(active) == 0:
            break

        wsum = w.sum(axis=1)
        q = target.points[idx]
        pc = (w[:, :, None] * scaled_pts[None]).sum(axis=1) / wsum[:, None]
        qc = (w[:, :, None] * q).sum(axis=1) / wsum[:, None]
        vc = scaled_pts[None] - pc[:, None]
        qd = q - qc[:, None]
        h = np.einsum("am,ami,amj->aij", w, vc, qd)
        if not np.all(np.isfinite(h)):
            raise NonFiniteUpdate("non-finite correspondence covariance")
        u, _, vt = np.linalg.svd(h)
        v = vt.transpose(0, 2, 1)
        det = np.linalg.det(v @ u.transpose(0, 2, 1))
        v[:, :, 2] *= np.where(det < 0, -1.0, 1.0)[:, None]
        rot[active] = v @ u.transpose(0, 2, 1)
        trans[active] = qc - np.einsum("aij,aj->ai", rot[active], pc)

        w, d, idx = correspond(rot[active], trans[active])
        new_rmse = batch_rmse(w, d)
        rmse[active] = new_rmse
        n_iter[active] = it
        emptied = np.isinf(new_rmse)
        alive[active[emptied]] = False
        done = (prev[active] - new_rmse < convergence_tol) & ~emptied
        converged[active[done]] = True
        prev[active] = new_rmse
        keep = ~done & ~emptied
        active, w, idx = active[keep], w[keep], idx[keep]

    if not alive.any():
        raise AllPointsOccluded("mask removed every point for every start")
    best = int(np.argmin(rmse))
    q_best = quat_from_matrix(rot[best])
    transform = SimilarityTransform(scale, q_best, trans[best])
    return AlignmentResult(transform, float(rmse[best]), int(n_iter[best]), best, bool(converged[best]))


def masked_icp(
    recon: PointCloud,
    gt: PointCloud,
    camera,
    scene_depth,
    n_starts: int = N_STARTS,
    epsilon: float | None = None,
    **params,
) -> AlignmentResult:
    """multistart_align with camera-occluded points excluded each iteration.

    Points of either cloud that the scene depth map hides from the camera
    (under the current transform, for the moving cloud) are dropped from
    correspondence and RMSE. With nothing occluded this reduces exactly to
    multistart_align.
    """
    from .visibility import VISIBILITY_EPSILON, points_visible

    eps = VISIBILITY_EPSILON if epsilon is None else epsilon

    def mask_fn(points):
        return points_visible(points, camera, scene_depth, eps)

    return multistart_align(recon, gt, n_starts=n_starts, visibility_fn=mask_fn, **params)


def symmetry_flip_correction(
    aligned: AlignmentResult,
    recon: PointCloud,
    gt: PointCloud,
    symmetry: SymmetrySpec,
) -> AlignmentResult:
    """Resolve symmetry-induced flips by minimum symmetric Chamfer.

    Each declared flip, applied about the gt centroid on top of the aligned
    transform, is scored by symmetric Chamfer distance; the minimum wins
    and ties keep the identity (the input result is returned unchanged).
    """
    flips = symmetry.flip_rotations() if symmetry else []
    if not flips:
        return aligned

    gt_idx = NNIndex(gt)
    center = gt.points.mean(axis=0)

    def score(transform):
        return chamfer_distance(recon.transformed(transform), gt, gt_index=gt_idx).symmetric

    best_transform = aligned.transform
    best_cd = score(aligned.transform)
    improved = False
    for q in flips:
        rot = quat_to_matrix(q)
        flip = SimilarityTransform(1.0, q, center - rot @ center)
        candidate = flip.compose(aligned.transform)
        cd = score(candidate)
        if cd < best_cd:
            best_transform, best_cd, improved = candidate, cd, True
    if not improved:
        return aligned
    d, _ = gt_idx.query(best_transform.apply(recon.points))
    rmse = float(np.sqrt(np.mean(d * d)))
    log.debug("symmetry flip applied: cd %.3e rmse %.3e", best_cd, rmse)
    return replace(aligned, transform=best_transform, rmse=rmse)
