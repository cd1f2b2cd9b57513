"""Batch fitting of shape trajectories to landmark sequences.

The unknowns of a T-frame fit are one shared identity coefficient vector and
one expression coefficient vector per frame, stacked as
theta = [s_id; s_exp_1; ...; s_exp_T]. With cameras held fixed the landmark,
prior, and smoothness terms are all affine in theta, so each pass solves one
box-constrained linear least-squares problem over the whole sequence; cameras
are then re-estimated from the fitted shapes and the solve repeats.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import solver
from .camera import CameraParams, estimate_pose, project, quat_to_matrix, quat_to_rotvec, rotvec_to_quat
from .errors import ConfigError, FormatError, ValidationError
from .model import MorphableModel, ShapeParams, synthesize_shape

TRAJECTORY_MAGIC = b"H2HT"


# ---------------------------------------------------------------------------
# inputs and configuration


@dataclasses.dataclass
class LandmarkSequence:
    """Tracked 2D landmarks: (T, L, 2) pixel positions and (T, L) confidences."""

    points: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)

    @property
    def n_frames(self) -> int:
        return self.points.shape[0]

    @property
    def n_landmarks(self) -> int:
        return self.points.shape[1]

    def validate(self) -> "LandmarkSequence":
        if self.points.ndim != 3 or self.points.shape[2] != 2 or self.points.shape[0] == 0:
            raise ValidationError("points: expected non-empty (T, L, 2) array, got %r" % (self.points.shape,))
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("points: non-finite coordinate")
        if self.confidence.shape != self.points.shape[:2]:
            raise ValidationError(
                "confidence: expected shape %r, got %r" % (self.points.shape[:2], self.confidence.shape)
            )
        if not np.all(np.isfinite(self.confidence)):
            raise ValidationError("confidence: non-finite value")
        if np.any(self.confidence < 0.0) or np.any(self.confidence > 1.0):
            raise ValidationError("confidence: values must lie in [0, 1]")
        return self


@dataclasses.dataclass
class FitConfig:
    """Weights and solver controls for batch fitting.

    landmark_weight defaults to 1 / (L * T) when left as None, which makes the
    data term insensitive to sequence length and landmark count.
    """

    landmark_weight: float | None = None
    prior_weight: float = 1e-3
    smoothness_weight: float = 0.1
    bound_sigmas: float = 3.0
    max_iterations: int = 200
    grad_tolerance: float = 1e-8
    pose_alternations: int = 2

    def validate(self) -> "FitConfig":
        if self.landmark_weight is not None and not (self.landmark_weight >= 0.0):
            raise ConfigError("landmark_weight: must be >= 0 or None")
        if not (self.prior_weight >= 0.0):
            raise ConfigError("prior_weight: must be >= 0")
        if not (self.smoothness_weight >= 0.0):
            raise ConfigError("smoothness_weight: must be >= 0")
        if not (self.bound_sigmas > 0.0):
            raise ConfigError("bound_sigmas: must be > 0 (use inf to disable bounds)")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 0:
            raise ConfigError("max_iterations: must be a non-negative integer")
        if int(self.pose_alternations) != self.pose_alternations or self.pose_alternations < 1:
            raise ConfigError("pose_alternations: must be a positive integer")
        if not (self.grad_tolerance > 0.0):
            raise ConfigError("grad_tolerance: must be > 0")
        return self

    def resolved_landmark_weight(self, n_landmarks: int, n_frames: int) -> float:
        if self.landmark_weight is not None:
            return float(self.landmark_weight)
        return 1.0 / float(n_landmarks * n_frames)


@dataclasses.dataclass
class ShapeTrajectory:
    """Fitted sequence: shared identity, per-frame expressions and cameras."""

    id_coeffs: np.ndarray
    exp_coeffs: np.ndarray  # (T, n_exp)
    cameras: list

    def __post_init__(self):
        self.id_coeffs = np.asarray(self.id_coeffs, dtype=np.float64)
        self.exp_coeffs = np.asarray(self.exp_coeffs, dtype=np.float64)

    @property
    def n_frames(self) -> int:
        return self.exp_coeffs.shape[0]

    def validate(self) -> "ShapeTrajectory":
        if self.id_coeffs.ndim != 1:
            raise ValidationError("id_coeffs: expected 1-D array")
        if self.exp_coeffs.ndim != 2:
            raise ValidationError("exp_coeffs: expected (T, n_exp) array")
        if len(self.cameras) != self.exp_coeffs.shape[0]:
            raise ValidationError(
                "cameras: %d entries for %d frames" % (len(self.cameras), self.exp_coeffs.shape[0])
            )
        if not np.all(np.isfinite(self.id_coeffs)) or not np.all(np.isfinite(self.exp_coeffs)):
            raise ValidationError("coefficients: non-finite value")
        for cam in self.cameras:
            cam.validate()
        return self

    def frame_params(self, t: int) -> ShapeParams:
        return ShapeParams(self.id_coeffs, self.exp_coeffs[t])


@dataclasses.dataclass
class EnergyBreakdown:
    """Raw term values plus their weighted sum."""

    landmark: float
    prior: float
    smoothness: float
    total: float


@dataclasses.dataclass
class FitResult:
    trajectory: ShapeTrajectory
    energy: EnergyBreakdown
    iterations: int  # accepted solver steps summed over pose alternations
    converged: bool  # convergence of the final solve
    mean_reprojection_px: float


# ---------------------------------------------------------------------------
# energy and linear system


def _landmark_vertices(model: MorphableModel):
    idx = model.landmark_indices.astype(np.int64)
    return model.mean_shape.reshape(-1, 3)[idx], idx


def energy(model, landmarks: LandmarkSequence, trajectory: ShapeTrajectory, config: FitConfig) -> EnergyBreakdown:
    """Evaluate the batch objective at a trajectory without assembling a system."""
    T = landmarks.n_frames
    if trajectory.n_frames != T:
        raise ValidationError("trajectory: %d frames for %d landmark frames" % (trajectory.n_frames, T))
    idx = model.landmark_indices.astype(np.int64)

    e_land = 0.0
    for t in range(T):
        shape = synthesize_shape(model, trajectory.frame_params(t))
        proj, _ = project(shape[idx], trajectory.cameras[t])
        diff = landmarks.points[t] - proj
        e_land += float(np.sum(landmarks.confidence[t] * np.sum(diff * diff, axis=1)))

    e_prior = float(np.sum((trajectory.id_coeffs / model.id_sigma) ** 2))
    e_prior += float(np.sum((trajectory.exp_coeffs / model.exp_sigma[None, :]) ** 2))

    if T >= 3:
        second = trajectory.exp_coeffs[2:] - 2.0 * trajectory.exp_coeffs[1:-1] + trajectory.exp_coeffs[:-2]
        e_smooth = float(np.sum(second * second))
    else:
        e_smooth = 0.0

    w_l = config.resolved_landmark_weight(landmarks.n_landmarks, T)
    total = w_l * e_land + config.prior_weight * e_prior + config.smoothness_weight * e_smooth
    return EnergyBreakdown(landmark=e_land, prior=e_prior, smoothness=e_smooth, total=total)


@dataclasses.dataclass
class LinearSystem:
    """Affine residual r(theta) = jacobian @ theta - offset, plus box bounds.

    Rows are pre-scaled by the square roots of their term weights, so
    ||r(theta)||^2 equals the weighted total energy for the cameras the
    system was assembled with.
    """

    jacobian: sp.csr_matrix
    offset: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_id: int
    n_exp: int
    n_frames: int

    def residual(self, theta) -> np.ndarray:
        return self.jacobian @ np.asarray(theta, dtype=np.float64) - self.offset

    def pack(self, id_coeffs, exp_coeffs) -> np.ndarray:
        return np.concatenate([np.asarray(id_coeffs, dtype=np.float64).ravel(),
                               np.asarray(exp_coeffs, dtype=np.float64).ravel()])

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        id_coeffs = theta[: self.n_id].copy()
        exp_coeffs = theta[self.n_id :].reshape(self.n_frames, self.n_exp).copy()
        return id_coeffs, exp_coeffs


def assemble_linear_system(model, landmarks: LandmarkSequence, cameras, config: FitConfig) -> LinearSystem:
    """Build the sparse least-squares system for fixed cameras.

    Row groups, in order: weighted landmark residuals (two rows per landmark
    with positive weight), identity prior, per-frame expression priors, and
    second-difference smoothness rows. Groups whose weight is zero are
    omitted entirely.
    """
    T = landmarks.n_frames
    L = landmarks.n_landmarks
    if len(cameras) != T:
        raise ValidationError("cameras: %d entries for %d frames" % (len(cameras), T))
    idx = model.landmark_indices.astype(np.int64)
    if idx.shape[0] != L:
        raise ValidationError(
            "landmarks: %d per frame but the model indexes %d" % (L, idx.shape[0])
        )
    n_i = model.n_id
    n_e = model.n_exp
    n_cols = n_i + T * n_e

    mean_verts = model.mean_shape.reshape(-1, 3)[idx]  # (L, 3)
    coord_rows = (3 * idx[:, None] + np.arange(3)[None, :]).ravel()
    basis_id = model.id_basis[coord_rows].reshape(L, 3, n_i)
    basis_exp = model.exp_basis[coord_rows].reshape(L, 3, n_e)

    w_l = config.resolved_landmark_weight(L, T)
    data, rows, cols = [], [], []
    b_parts = []
    row_base = 0

    def add_block(block, row_idx, col_offset, width):
        data.append(block.ravel())
        rows.append(np.repeat(row_idx, width))
        cols.append(np.tile(np.arange(col_offset, col_offset + width), row_idx.shape[0]))

    if w_l > 0.0:
        for t in range(T):
            weight = w_l * landmarks.confidence[t]
            keep = weight > 0.0
            if not np.any(keep):
                continue
            k = int(np.count_nonzero(keep))
            sqrt_w = np.sqrt(weight[keep])
            cam = cameras[t]
            R = quat_to_matrix(cam.rotation)
            P = np.vstack([cam.scale * R[0], -cam.scale * R[1]])  # (2, 3)

            block_id = np.einsum("ab,jbk->jak", P, basis_id[keep])  # (k, 2, n_i)
            block_exp = np.einsum("ab,jbk->jak", P, basis_exp[keep])
            block_id *= sqrt_w[:, None, None]
            block_exp *= sqrt_w[:, None, None]

            proj_mean, _ = project(mean_verts[keep], cam)
            resid_const = sqrt_w[:, None] * (landmarks.points[t][keep] - proj_mean)

            row_idx = row_base + np.arange(2 * k)
            add_block(block_id.reshape(2 * k, n_i), row_idx, 0, n_i)
            add_block(block_exp.reshape(2 * k, n_e), row_idx, n_i + t * n_e, n_e)
            b_parts.append(resid_const.ravel())
            row_base += 2 * k

    if config.prior_weight > 0.0:
        sw = np.sqrt(config.prior_weight)
        row_idx = row_base + np.arange(n_i)
        data.append(sw / model.id_sigma)
        rows.append(row_idx)
        cols.append(np.arange(n_i))
        b_parts.append(np.zeros(n_i))
        row_base += n_i
        for t in range(T):
            row_idx = row_base + np.arange(n_e)
            data.append(sw / model.exp_sigma)
            rows.append(row_idx)
            cols.append(n_i + t * n_e + np.arange(n_e))
            b_parts.append(np.zeros(n_e))
            row_base += n_e

    if config.smoothness_weight > 0.0 and T >= 3:
        sw = np.sqrt(config.smoothness_weight)
        for t in range(1, T - 1):
            row_idx = row_base + np.arange(n_e)
            for offset, coeff in ((t - 1, sw), (t, -2.0 * sw), (t + 1, sw)):
                data.append(np.full(n_e, coeff))
                rows.append(row_idx)
                cols.append(n_i + offset * n_e + np.arange(n_e))
            b_parts.append(np.zeros(n_e))
            row_base += n_e

    if row_base == 0:
        jac = sp.csr_matrix((0, n_cols))
        offset = np.zeros(0)
    else:
        jac = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(row_base, n_cols),
        ).tocsr()
        offset = np.concatenate(b_parts)

    bs = config.bound_sigmas
    lower = -bs * np.concatenate([model.id_sigma, np.tile(model.exp_sigma, T)])
    upper = -lower
    return LinearSystem(
        jacobian=jac,
        offset=offset,
        lower=lower,
        upper=upper,
        n_id=n_i,
        n_exp=n_e,
        n_frames=T,
    )


def solve_system(system: LinearSystem, theta0=None, config: FitConfig | None = None) -> solver.BoxLsqResult:
    """Solve an assembled system with the box-constrained least-squares kernel."""
    config = config or FitConfig()
    return solver.solve_box_lsq(
        system.jacobian,
        system.offset,
        system.lower,
        system.upper,
        x0=theta0,
        grad_tolerance=config.grad_tolerance,
        max_iterations=config.max_iterations,
    )


def mean_reprojection_error(model, landmarks: LandmarkSequence, trajectory: ShapeTrajectory) -> float:
    """Mean Euclidean pixel distance between landmarks and projected model points."""
    idx = model.landmark_indices.astype(np.int64)
    total = 0.0
    count = 0
    for t in range(landmarks.n_frames):
        shape = synthesize_shape(model, trajectory.frame_params(t))
        proj, _ = project(shape[idx], trajectory.cameras[t])
        total += float(np.sum(np.linalg.norm(landmarks.points[t] - proj, axis=1)))
        count += idx.shape[0]
    return total / count if count else 0.0


def fit_video(model, landmarks: LandmarkSequence, config: FitConfig | None = None) -> FitResult:
    """Fit identity, per-frame expressions, and per-frame cameras to a sequence.

    Cameras are initialized in closed form against the mean face, then the
    coefficient solve and pose re-estimation alternate config.pose_alternations
    times (re-posing against the currently fitted shapes).
    """
    config = (config or FitConfig()).validate()
    landmarks.validate()
    T = landmarks.n_frames
    idx = model.landmark_indices.astype(np.int64)
    if landmarks.n_landmarks != idx.shape[0]:
        raise ValidationError(
            "landmarks: %d per frame but the model indexes %d" % (landmarks.n_landmarks, idx.shape[0])
        )

    mean_lm = model.mean_shape.reshape(-1, 3)[idx]
    cameras = [estimate_pose(landmarks.points[t], mean_lm) for t in range(T)]

    theta = None
    total_iterations = 0
    result = None
    for sweep in range(config.pose_alternations):
        if sweep > 0:
            id_coeffs, exp_coeffs = system.unpack(theta)
            for t in range(T):
                shape = synthesize_shape(model, ShapeParams(id_coeffs, exp_coeffs[t]))
                cameras[t] = estimate_pose(landmarks.points[t], shape[idx])
        system = assemble_linear_system(model, landmarks, cameras, config)
        result = solve_system(system, theta0=theta, config=config)
        theta = result.x
        total_iterations += result.iterations

    id_coeffs, exp_coeffs = system.unpack(theta)
    trajectory = ShapeTrajectory(id_coeffs=id_coeffs, exp_coeffs=exp_coeffs, cameras=cameras)
    breakdown = energy(model, landmarks, trajectory, config)
    return FitResult(
        trajectory=trajectory,
        energy=breakdown,
        iterations=total_iterations,
        converged=bool(result.converged),
        mean_reprojection_px=mean_reprojection_error(model, landmarks, trajectory),
    )


# ---------------------------------------------------------------------------
# trajectory container IO


def save_trajectory(trajectory: ShapeTrajectory, path) -> None:
    """Write a trajectory container: dims, identity, expressions, camera records.

    Each camera record is seven doubles: axis-angle rotation (3), translation
    (tx, ty, 0.0), scale.
    """
    trajectory.validate()
    T = trajectory.n_frames
    n_i = trajectory.id_coeffs.shape[0]
    n_e = trajectory.exp_coeffs.shape[1]
    buf = bytearray()
    buf += TRAJECTORY_MAGIC
    buf += struct.pack("<3I", T, n_i, n_e)
    buf += trajectory.id_coeffs.astype("<f8").tobytes()
    buf += trajectory.exp_coeffs.astype("<f8").tobytes(order="C")
    for cam in trajectory.cameras:
        rec = np.empty(7, dtype=np.float64)
        rec[0:3] = quat_to_rotvec(cam.rotation)
        rec[3] = cam.translation[0]
        rec[4] = cam.translation[1]
        rec[5] = 0.0
        rec[6] = cam.scale
        buf += rec.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_trajectory(path) -> ShapeTrajectory:
    from .model import _Reader  # same little-endian reader with byte-offset errors

    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    magic = r.take(4, "magic")
    if magic != TRAJECTORY_MAGIC:
        raise FormatError("%s: bad magic %r at byte 0, expected %r" % (path, magic, TRAJECTORY_MAGIC))
    T = r.u32("frame count")
    n_i = r.u32("identity mode count")
    n_e = r.u32("expression mode count")
    if T == 0:
        raise FormatError("%s: frame count is zero at byte 4" % path)
    id_coeffs = r.f64_array(n_i, "identity coefficients")
    exp_coeffs = r.f64_array(T * n_e, "expression coefficients").reshape(T, n_e)
    cameras = []
    for t in range(T):
        rec = r.f64_array(7, "camera record %d" % t)
        cameras.append(
            CameraParams(
                rotation=rotvec_to_quat(rec[0:3]),
                translation=rec[3:5],
                scale=rec[6],
            )
        )
    r.expect_eof()
    return ShapeTrajectory(id_coeffs=id_coeffs, exp_coeffs=exp_coeffs, cameras=cameras).validate()


# ---------------------------------------------------------------------------
# landmark sequence IO


def load_landmarks(path) -> LandmarkSequence:
    """Read landmarks from .csv (x,y[,confidence] rows, 68 per frame) or .json."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        return _landmarks_from_json(path)
    return _landmarks_from_csv(path)


def _landmarks_from_csv(path: Path) -> LandmarkSequence:
    try:
        table = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise FormatError("%s: %s" % (path, exc)) from exc
    if table.size == 0:
        raise FormatError("%s: empty landmark file" % path)
    if table.shape[1] not in (2, 3):
        raise FormatError("%s: expected 2 or 3 columns, got %d" % (path, table.shape[1]))
    if table.shape[0] % 68 != 0:
        raise FormatError(
            "%s: row count %d is not a multiple of 68" % (path, table.shape[0])
        )
    T = table.shape[0] // 68
    points = table[:, :2].reshape(T, 68, 2)
    if table.shape[1] == 3:
        conf = table[:, 2].reshape(T, 68)
    else:
        conf = np.ones((T, 68))
    return LandmarkSequence(points=points, confidence=conf).validate()


def _landmarks_from_json(path: Path) -> LandmarkSequence:
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError("%s: invalid JSON: %s" % (path, exc)) from exc
    frames = payload.get("frames") if isinstance(payload, dict) else payload
    if not isinstance(frames, list) or not frames:
        raise FormatError("%s: expected a non-empty list of frames" % path)
    points = []
    confs = []
    for t, frame in enumerate(frames):
        if not isinstance(frame, list) or len(frame) != 68:
            raise FormatError("%s: frame %d does not hold 68 landmarks" % (path, t))
        pts = []
        cfs = []
        for entry in frame:
            if len(entry) == 2:
                pts.append(entry)
                cfs.append(1.0)
            elif len(entry) == 3:
                pts.append(entry[:2])
                cfs.append(entry[2])
            else:
                raise FormatError("%s: frame %d has a landmark with %d values" % (path, t, len(entry)))
        points.append(pts)
        confs.append(cfs)
    return LandmarkSequence(points=np.array(points, dtype=np.float64),
                            confidence=np.array(confs, dtype=np.float64)).validate()


def save_landmarks_csv(landmarks: LandmarkSequence, path) -> None:
    """Write x,y,confidence rows (17 significant digits, round-trip exact)."""
    rows = []
    for t in range(landmarks.n_frames):
        for j in range(landmarks.n_landmarks):
            rows.append(
                "%.17g,%.17g,%.17g"
                % (landmarks.points[t, j, 0], landmarks.points[t, j, 1], landmarks.confidence[t, j])
            )
    Path(path).write_text("\n".join(rows) + "\n")
