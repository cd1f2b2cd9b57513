"""Scaled orthographic camera model and closed-form pose recovery.

Conventions: image origin at the top-left corner, x to the right, y down,
pixel centers at half-integer coordinates. The model frame is right-handed
with y up, so projection flips the sign of the rotated y coordinate. Depth
is the rotated z coordinate; larger values are nearer to the viewer.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import DegeneratePoseError, ValidationError

# ---------------------------------------------------------------------------
# quaternion helpers (scalar-first: w, x, y, z)


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n == 0.0:
        raise ValidationError("rotation: quaternion has zero or non-finite norm")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion."""
    w, x, y, z = q
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion of a proper rotation matrix (sign is arbitrary)."""
    R = np.asarray(R, dtype=np.float64)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_to_rotvec(q) -> np.ndarray:
    """Axis-angle vector (axis times angle in radians) of a unit quaternion."""
    w, x, y, z = quat_normalize(q)
    if w < 0.0:  # take the representative with angle in [0, pi]
        w, x, y, z = -w, -x, -y, -z
    sin_half = math.sqrt(x * x + y * y + z * z)
    if sin_half < 1e-12:
        return np.array([2.0 * x, 2.0 * y, 2.0 * z])  # small-angle limit
    angle = 2.0 * math.atan2(sin_half, w)
    return (angle / sin_half) * np.array([x, y, z])


def rotvec_to_quat(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        return quat_normalize(np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]]))
    axis = v / angle
    half = 0.5 * angle
    s = math.sin(half)
    return np.array([math.cos(half), s * axis[0], s * axis[1], s * axis[2]])


def quat_angle(a, b) -> float:
    """Geodesic rotation distance in radians between two unit quaternions."""
    # relative rotation b^-1 * a; atan2 keeps full precision near zero,
    # which acos(dot) cannot (it bottoms out around 3e-8 rad)
    an = quat_normalize(a)
    bn = quat_normalize(b)
    rel = quat_multiply(np.array([bn[0], -bn[1], -bn[2], -bn[3]]), an)
    return 2.0 * math.atan2(float(np.linalg.norm(rel[1:])), abs(float(rel[0])))


def random_rotation(rng) -> np.ndarray:
    """Uniformly distributed unit quaternion."""
    return quat_normalize(rng.standard_normal(4))


# ---------------------------------------------------------------------------
# camera


@dataclasses.dataclass
class CameraParams:
    """Per-frame scaled orthographic camera.

    Attributes:
        rotation: unit quaternion (w, x, y, z) mapping model space to camera space.
        translation: 2-vector (tx, ty), image-plane offset in pixels.
        scale: pixels per model unit, strictly positive.
    """

    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.scale = float(self.scale)

    def validate(self) -> "CameraParams":
        if self.rotation.shape != (4,):
            raise ValidationError("rotation: expected quaternion of shape (4,), got %r" % (self.rotation.shape,))
        if not np.all(np.isfinite(self.rotation)):
            raise ValidationError("rotation: non-finite component")
        if abs(float(np.linalg.norm(self.rotation)) - 1.0) > 1e-9:
            raise ValidationError("rotation: quaternion is not unit length")
        if self.translation.shape != (2,) or not np.all(np.isfinite(self.translation)):
            raise ValidationError("translation: expected finite 2-vector")
        if not (np.isfinite(self.scale) and self.scale > 0.0):
            raise ValidationError("scale: must be finite and > 0, got %r" % self.scale)
        return self

    def copy(self) -> "CameraParams":
        return CameraParams(self.rotation.copy(), self.translation.copy(), self.scale)


def project(vertices, camera: CameraParams):
    """Project vertices through a scaled orthographic camera.

    Args:
        vertices: (N, 3) model-space points.
        camera: CameraParams.

    Returns:
        (points2d, depth): (N, 2) pixel coordinates and (N,) rotated z, where
        larger depth is nearer to the viewer.
    """
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    R = quat_to_matrix(camera.rotation)
    rotated = V @ R.T
    pts = np.empty((V.shape[0], 2), dtype=np.float64)
    pts[:, 0] = camera.scale * rotated[:, 0] + camera.translation[0]
    pts[:, 1] = -camera.scale * rotated[:, 1] + camera.translation[1]  # image y grows downward
    return pts, rotated[:, 2].copy()


def estimate_pose(points2d, points3d) -> CameraParams:
    """Closed-form scaled orthographic pose from 2D-3D correspondences.

    Fits the affine map from centered 3D points to centered 2D points by
    least squares, then orthogonalizes its rows into a proper rotation.

    Args:
        points2d: (K, 2) observed pixel coordinates.
        points3d: (K, 3) corresponding model-space points, K >= 4 and not
            collinear.

    Returns:
        CameraParams reproducing the correspondence exactly when the input
        is a noiseless scaled orthographic projection.

    Raises:
        DegeneratePoseError: collinear or coincident 3D points, or a 2D
            configuration with (numerically) zero extent.
    """
    pts2 = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    pts3 = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    if pts2.shape[0] != pts3.shape[0]:
        raise ValidationError(
            "points2d/points3d: count mismatch (%d vs %d)" % (pts2.shape[0], pts3.shape[0])
        )
    if pts2.shape[0] < 4:
        raise DegeneratePoseError("pose estimation needs at least 4 correspondences")

    c2 = pts2.mean(axis=0)
    c3 = pts3.mean(axis=0)
    X = pts3 - c3
    Y = pts2 - c2

    # rank(X) must be >= 2: collinear 3D points leave the rotation unconstrained
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[1] <= 1e-10 * max(1.0, sv[0]):
        raise DegeneratePoseError("3D points are collinear; pose is not determined")

    A, *_ = np.linalg.lstsq(X, Y, rcond=None)  # (3, 2), maps centered 3D -> centered 2D
    A = A.T
    B = np.vstack([A[0], -A[1]])  # undo the image y-flip to expose scaled rotation rows

    n0 = float(np.linalg.norm(B[0]))
    n1 = float(np.linalg.norm(B[1]))
    if n0 <= 1e-12 or n1 <= 1e-12:
        raise DegeneratePoseError("2D points have zero extent; scale is not determined")
    scale = 0.5 * (n0 + n1)

    r0 = B[0] / n0
    r1 = B[1] - float(np.dot(B[1], r0)) * r0
    n_r1 = float(np.linalg.norm(r1))
    if n_r1 <= 1e-12:
        raise DegeneratePoseError("projection rows are parallel; rotation is not determined")
    r1 = r1 / n_r1
    r2 = np.cross(r0, r1)  # completes a right-handed frame, det(R) = +1
    R = np.vstack([r0, r1, r2])

    t = c2 - np.array([scale * float(R[0] @ c3), -scale * float(R[1] @ c3)])
    return CameraParams(rotation=matrix_to_quat(R), translation=t, scale=scale).validate()
