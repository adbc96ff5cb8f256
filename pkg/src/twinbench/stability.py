"""Resting-pose enumeration and perturbation-settling stability checks.

A pose is a candidate when the center of mass projects into the support
polygon of the lowest vertices; candidates near the scene pose are then
perturbed by small tilts and settled with a deterministic impulse-based
rigid-body simulation on the ground plane. A candidate counts as stable
when at least one perturbed run reverts to it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateHull, NonFiniteState
from .mesh import TriangleMesh, center_of_mass
from .transforms import (
    quat_from_axis_angle,
    quat_from_matrix,
    quat_geodesic_angle,
    quat_multiply,
    quat_to_matrix,
)

ELEVATION_TOL = 1e-4  # meters; vertices within this of the lowest are support
MAX_TILT_DEG = 5.0
N_PERTURBATIONS = 8
PERTURB_ANGLE_DEG = 5.0
REVERT_TOL_DEG = 2.0
DRIFT_TOL = 0.005  # meters of COM displacement still counting as reverted
PENETRATION_TOL = 1e-3

_GRAVITY = 9.81
_SOLVER_PASSES = 8
_BAUMGARTE = 0.2
_SLOP = 1e-5
_SLEEP_LIN = 1e-4
_SLEEP_ANG = 1e-3
_SLEEP_STEPS = 30


@dataclass(frozen=True)
class SimParams:
    timestep: float = 1.0 / 240.0
    duration: float = 5.0
    friction: float = 0.8
    restitution: float = 0.0


@dataclass
class RestingPose:
    rotation: np.ndarray  # body-to-world unit quaternion, face down on z=0
    support_polygon: np.ndarray  # (k, 2) convex polygon vertices, meters
    tilt_from_scene: float = 0.0  # degrees

    def polygon_area(self) -> float:
        p = self.support_polygon
        x, y = p[:, 0], p[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass
class SettleResult:
    final_rotation: np.ndarray
    final_com: np.ndarray
    com_displacement: np.ndarray
    n_steps: int
    slept: bool
    min_com_z: float


@dataclass
class PerturbationTrace:
    axis_angle_deg: float
    reverted: bool
    final_tilt_deg: float
    com_drift: float


@dataclass
class StabilityVerdict:
    has_stable_pose_near_scene: bool
    candidate_poses: list
    surviving_pose: RestingPose | None
    perturbations_reverted: int
    traces: list = field(default_factory=list)


def _rotation_to_down(normal: np.ndarray) -> np.ndarray:
    """Quaternion rotating ``normal`` onto -z (the face-down direction)."""
    target = np.array([0.0, 0.0, -1.0])
    c = float(np.dot(normal, target))
    if c > 1.0 - 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    if c < -1.0 + 1e-12:
        return quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), math.pi)
    axis = np.cross(normal, target)
    axis /= np.linalg.norm(axis)
    return quat_from_axis_angle(axis, math.acos(max(-1.0, min(1.0, c))))


def _point_in_convex_polygon(pt: np.ndarray, poly: np.ndarray, tol: float = 1e-12) -> bool:
    """Inclusive test; ``poly`` must be counterclockwise-ordered."""
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        cross = (b[0] - a[0]) * (pt[1] - a[1]) - (b[1] - a[1]) * (pt[0] - a[0])
        if cross < -tol:
            return False
    return True


def enumerate_resting_orientations(mesh: TriangleMesh) -> list[RestingPose]:
    """Resting poses from the convex hull: one per hull plane whose support
    polygon contains the COM projection.

    Coplanar hull facets merge into a single plane; the support polygon is
    the 2D hull of all vertices within ELEVATION_TOL of the lowest.
    """
    try:
        hull = ConvexHull(mesh.vertices)
    except QhullError as exc:
        raise DegenerateHull(str(exc)) from exc
    com = center_of_mass(mesh).center
    hull_pts = mesh.vertices[hull.vertices]

    planes = np.unique(np.round(hull.equations, 9), axis=0)
    poses = []
    for eq in planes:
        normal = eq[:3] / np.linalg.norm(eq[:3])
        q = _rotation_to_down(normal)
        rot = quat_to_matrix(q)
        rotated = hull_pts @ rot.T
        z = rotated[:, 2]
        support = rotated[z - z.min() <= ELEVATION_TOL][:, :2]
        try:
            hull2d = ConvexHull(support)
        except QhullError:
            continue  # edge or vertex contact; not a face-resting pose
        poly = support[hull2d.vertices]
        com_xy = (rot @ com)[:2]
        if _point_in_convex_polygon(com_xy, poly):
            poses.append(RestingPose(rotation=q, support_polygon=poly))
    return poses


def filter_near_scene_pose(
    candidates: list[RestingPose],
    scene_rotation: np.ndarray,
    max_tilt: float = MAX_TILT_DEG,
) -> list[RestingPose]:
    """Keep candidates whose body up-direction is within max_tilt degrees
    of the scene pose's (inclusive); yaw differences do not count."""
    if not 0.0 < max_tilt < 90.0:
        raise ValueError("max_tilt must be in (0, 90) degrees")
    up = np.array([0.0, 0.0, 1.0])
    scene_up_body = quat_to_matrix(scene_rotation).T @ up
    kept = []
    for cand in candidates:
        cand_up_body = quat_to_matrix(cand.rotation).T @ up
        c = float(np.clip(np.dot(scene_up_body, cand_up_body), -1.0, 1.0))
        tilt = math.degrees(math.acos(c))
        if tilt <= max_tilt:
            kept.append(replace(cand, tilt_from_scene=tilt))
    kept.sort(key=lambda p: p.tilt_from_scene)
    return kept


def _body_model(mesh: TriangleMesh):
    """Mass, body-frame inertia inverse, and hull vertices relative to COM."""
    mp = center_of_mass(mesh)
    mass = mp.volume if mp.watertight and mp.volume > 0 else mesh.area()
    try:
        hull = ConvexHull(mesh.vertices)
    except QhullError as exc:
        raise DegenerateHull(str(exc)) from exc
    r = mesh.vertices[hull.vertices] - mp.center
    inertia = mp.inertia + np.eye(3) * (1e-12 * max(np.trace(mp.inertia), 1e-30))
    return mass, np.linalg.inv(inertia), r


def _drop_height(rotation: np.ndarray, r_body: np.ndarray) -> float:
    """COM height placing the lowest vertex exactly on the plane."""
    return float(-(r_body @ quat_to_matrix(rotation).T)[:, 2].min())


def settle(
    mesh: TriangleMesh,
    initial_rotation: np.ndarray,
    sim_params: SimParams = SimParams(),
    com_xy: tuple[float, float] = (0.0, 0.0),
    _model=None,
) -> SettleResult:
    """Drop the mesh on the plane z=0 and integrate until rest or timeout.

    The object starts at rest with its COM above ``com_xy`` and its lowest
    vertex touching the plane. Contacts are vertex-plane with Coulomb
    friction, solved by sequential impulses; restitution 0 means impacts
    are fully inelastic. Deterministic for fixed parameters.
    """
    mass, inv_inertia_body, r_body = _model if _model else _body_model(mesh)
    dt = sim_params.timestep
    n_steps = int(round(sim_params.duration / dt))
    mu = sim_params.friction
    inv_m = 1.0 / mass

    q = np.asarray(initial_rotation, dtype=float)
    x = np.array([com_xy[0], com_xy[1], _drop_height(q, r_body)])
    x0 = x.copy()
    v = np.zeros(3)
    omega = np.zeros(3)
    min_com_z = x[2]
    quiet = 0
    slept = False
    step = 0

    for step in range(1, n_steps + 1):
        rot = quat_to_matrix(q)
        inv_inertia = rot @ inv_inertia_body @ rot.T
        v[2] -= _GRAVITY * dt

        rw = r_body @ rot.T
        z = x[2] + rw[:, 2]
        contact = np.nonzero(z < _SLOP)[0]
        if len(contact):
            v, omega = _solve_contacts(
                v, omega, rw[contact], z[contact], inv_m, inv_inertia, mu, dt,
                sim_params.restitution,
            )

        x = x + v * dt
        ang = float(np.linalg.norm(omega))
        if ang > 1e-12:
            dq = quat_from_axis_angle(omega / ang, ang * dt)
            q = quat_multiply(dq, q)
            q /= np.linalg.norm(q)
        min_com_z = min(min_com_z, x[2])

        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v)) and np.all(np.isfinite(omega))):
            raise NonFiniteState(f"integration diverged at step {step}")

        if float(np.linalg.norm(v)) < _SLEEP_LIN and ang < _SLEEP_ANG and len(contact):
            quiet += 1
            if quiet >= _SLEEP_STEPS:
                slept = True
                break
        else:
            quiet = 0

    return SettleResult(q, x, x - x0, step, slept, min_com_z)


def _solve_contacts(v, omega, rw, z, inv_m, inv_inertia, mu, dt, restitution):
    """Sequential-impulse resolution of vertex-plane contacts."""
    c = len(rw)
    # effective masses and torque arms per contact and axis
    arms = np.zeros((c, 3, 3))  # [contact, axis, 3] inv_inertia @ (rw x axis)
    k = np.zeros((c, 3))
    eye = np.eye(3)
    for a in range(3):
        rxn = np.cross(rw, eye[a])
        arms[:, a] = rxn @ inv_inertia.T
        k[:, a] = inv_m + np.cross(arms[:, a], rw)[:, a]
    bias = (_BAUMGARTE / dt) * np.maximum(-z - _SLOP, 0.0)

    vl = v.tolist()
    wl = omega.tolist()
    rwl = rw.tolist()
    armsl = arms.tolist()
    kl = k.tolist()
    biasl = bias.tolist()
    acc_n = [0.0] * c
    acc_t = [[0.0, 0.0] for _ in range(c)]

    for _ in range(_SOLVER_PASSES):
        for i in range(c):
            rx, ry, rz = rwl[i]
            # normal impulse along z
            un = vl[2] + wl[0] * ry - wl[1] * rx
            target = biasl[i] - restitution * min(un, 0.0)
            dj = (target - un) / kl[i][2]
            new_acc = acc_n[i] + dj
            if new_acc < 0.0:
                new_acc = 0.0
            dj = new_acc - acc_n[i]
            acc_n[i] = new_acc
            if dj != 0.0:
                vl[2] += dj * inv_m
                az = armsl[i][2]
                wl[0] += az[0] * dj
                wl[1] += az[1] * dj
                wl[2] += az[2] * dj
            # friction along x and y, box-clamped by mu * normal
            lim = mu * acc_n[i]
            for a in (0, 1):
                if a == 0:
                    ut = vl[0] + wl[1] * rz - wl[2] * ry
                else:
                    ut = vl[1] + wl[2] * rx - wl[0] * rz
                dj = -ut / kl[i][a]
                new_t = acc_t[i][a] + dj
                if new_t > lim:
                    new_t = lim
                elif new_t < -lim:
                    new_t = -lim
                dj = new_t - acc_t[i][a]
                acc_t[i][a] = new_t
                if dj != 0.0:
                    vl[a] += dj * inv_m
                    aa = armsl[i][a]
                    wl[0] += aa[0] * dj
                    wl[1] += aa[1] * dj
                    wl[2] += aa[2] * dj
    return np.array(vl), np.array(wl)


def stability_verdict(
    mesh: TriangleMesh,
    scene_rotation: np.ndarray,
    n_perturbations: int = N_PERTURBATIONS,
    perturb_angle: float = PERTURB_ANGLE_DEG,
    max_tilt: float = MAX_TILT_DEG,
    revert_tol: float = REVERT_TOL_DEG,
    drift_tol: float = DRIFT_TOL,
    sim_params: SimParams = SimParams(),
    require_all: bool = False,
) -> StabilityVerdict:
    """Is any resting pose near the scene pose stable under perturbation?

    Each candidate is tilted by perturb_angle about n equally spaced
    horizontal axes and settled. A run reverts when the settled orientation
    is within revert_tol degrees of the candidate and the COM lands within
    drift_tol of the candidate's resting COM. With require_all the
    candidate needs every run to revert instead of at least one.
    """
    candidates = filter_near_scene_pose(
        enumerate_resting_orientations(mesh), scene_rotation, max_tilt
    )
    model = _body_model(mesh) if candidates else None

    surviving = None
    reverted_count = 0
    traces: list[PerturbationTrace] = []
    for cand in candidates:
        ref_com = np.array([0.0, 0.0, _drop_height(cand.rotation, model[2])])
        n_revert = 0
        cand_traces = []
        for kp in range(n_perturbations):
            phi = 2.0 * math.pi * kp / n_perturbations
            axis = np.array([math.cos(phi), math.sin(phi), 0.0])
            perturbed = quat_multiply(
                quat_from_axis_angle(axis, math.radians(perturb_angle)), cand.rotation
            )
            res = settle(mesh, perturbed, sim_params, _model=model)
            ang = math.degrees(quat_geodesic_angle(res.final_rotation, cand.rotation))
            drift = float(np.linalg.norm(res.final_com - ref_com))
            ok = ang <= revert_tol and drift <= drift_tol
            n_revert += ok
            cand_traces.append(PerturbationTrace(math.degrees(phi), ok, ang, drift))
        traces.extend(cand_traces)
        stable = (n_revert == n_perturbations) if require_all else (n_revert >= 1)
        if stable:
            surviving = cand
            reverted_count = n_revert
            break
    return StabilityVerdict(surviving is not None, candidates, surviving, reverted_count, traces)
