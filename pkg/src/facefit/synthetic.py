"""Synthetic model and performance generators for tests and fixtures.

The generated face is a smooth asymmetric dome over a rectangular grid, so
poses are well conditioned; bases are drawn orthonormal by QR, so the model
passes validation without warnings and ground-truth coefficients are exactly
recoverable from noiseless projections.
"""

from __future__ import annotations

import math

import numpy as np

from .camera import CameraParams, quat_multiply, rotvec_to_quat
from .conditioning import GazeFrame
from .fitting import LandmarkSequence, ShapeTrajectory
from .model import NUM_LANDMARKS, MorphableModel, ShapeParams, synthesize_shape
from .camera import project

# clockwise 8-neighbourhood offsets forming an ordered ring around a grid vertex
_RING_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def make_synthetic_model(n_vertices=500, n_id=20, n_exp=10, seed=0) -> MorphableModel:
    """Random but well-conditioned morphable model on a dome-shaped grid."""
    if n_vertices < 80:
        raise ValueError("n_vertices: need at least 80 for landmarks and eye rings")
    rng = np.random.default_rng(seed)

    rows = max(4, int(math.sqrt(n_vertices * 0.8)))
    cols = -(-n_vertices // rows)  # ceil division; trailing vertices are dropped
    jj, ii = np.meshgrid(np.arange(cols), np.arange(rows))
    x = -75.0 + 150.0 * jj / (cols - 1)
    y = 95.0 - 190.0 * ii / (rows - 1)
    z = 45.0 * (1.0 - (x / 80.0) ** 2 - (y / 100.0) ** 2)
    for _ in range(3):  # low-frequency asymmetric bumps
        cx, cy = rng.uniform(-60.0, 60.0, 2)
        amp = rng.uniform(-8.0, 8.0)
        width = rng.uniform(20.0, 40.0)
        z = z + amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * width**2))

    verts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)[:n_vertices]
    mean_shape = verts.reshape(-1)

    tris = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            a = i * cols + j
            b = a + 1
            c = a + cols
            d = c + 1
            if max(a, b, c, d) < n_vertices:
                tris.append((a, b, c))
                tris.append((b, d, c))
    triangles = np.asarray(tris, dtype=np.uint32)

    raw = rng.standard_normal((3 * n_vertices, n_id + n_exp))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))[None, :]
    id_basis = np.ascontiguousarray(q[:, :n_id])
    exp_basis = np.ascontiguousarray(q[:, n_id:])

    id_sigma = 8.0 * 0.92 ** np.arange(n_id)
    exp_sigma = 5.0 * 0.90 ** np.arange(n_exp)

    landmark_indices = np.sort(rng.choice(n_vertices, NUM_LANDMARKS, replace=False)).astype(np.uint32)

    def ring(center_row, center_col):
        idx = []
        for di, dj in _RING_OFFSETS:
            v = (center_row + di) * cols + (center_col + dj)
            if not (0 <= v < n_vertices):
                raise ValueError("eye ring falls outside the generated grid")
            idx.append(v)
        return np.asarray(idx, dtype=np.uint32)

    eye_row = max(1, int(round(0.35 * (rows - 1))))
    left = ring(eye_row, max(1, int(round(0.30 * (cols - 1)))))
    right = ring(eye_row, min(cols - 2, int(round(0.70 * (cols - 1)))))

    return MorphableModel(
        mean_shape=mean_shape,
        id_basis=id_basis,
        exp_basis=exp_basis,
        id_sigma=id_sigma,
        exp_sigma=exp_sigma,
        triangles=triangles,
        landmark_indices=landmark_indices,
        left_eye_region=left,
        right_eye_region=right,
    ).validate()


def _smooth_wave(rng, n_frames, amplitude, max_cycles):
    tau = np.arange(n_frames) / max(1, n_frames)
    freq = rng.uniform(0.4, max_cycles)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    return amplitude * np.sin(2.0 * math.pi * freq * tau + phase)


def make_synthetic_performance(
    model: MorphableModel,
    n_frames=50,
    seed=1,
    noise_px=0.0,
    image_size=(256, 256),
):
    """Ground-truth trajectory plus its landmark observations and gaze frames.

    Coefficients stay inside +-1.2 sigma (well within the +-3 sigma fitting
    box) and every per-frame signal is a smooth sinusoid, so the sequence is
    exactly representable by the model.

    Returns:
        (trajectory, landmarks, gaze_frames).
    """
    rng = np.random.default_rng(seed)
    width, height = image_size

    id_coeffs = rng.uniform(-1.2, 1.2, model.n_id) * model.id_sigma
    exp_coeffs = np.zeros((n_frames, model.n_exp))
    for k in range(model.n_exp):
        sigma = model.exp_sigma[k]
        exp_coeffs[:, k] = _smooth_wave(rng, n_frames, rng.uniform(0.2, 0.4) * sigma, 1.5)
        exp_coeffs[:, k] += _smooth_wave(rng, n_frames, rng.uniform(0.2, 0.4) * sigma, 3.0)

    yaw = _smooth_wave(rng, n_frames, rng.uniform(0.25, 0.35), 1.2)
    pitch = _smooth_wave(rng, n_frames, rng.uniform(0.15, 0.25), 1.2)
    roll = _smooth_wave(rng, n_frames, rng.uniform(0.08, 0.15), 1.2)
    base_scale = rng.uniform(1.0, 1.25)
    scale = base_scale * (1.0 + _smooth_wave(rng, n_frames, 0.04, 1.0))
    tx = 0.5 * width + _smooth_wave(rng, n_frames, 0.04 * width, 1.0)
    ty = 0.5 * height + _smooth_wave(rng, n_frames, 0.04 * height, 1.0)

    cameras = []
    for t in range(n_frames):
        q = quat_multiply(
            rotvec_to_quat([0.0, yaw[t], 0.0]),
            quat_multiply(rotvec_to_quat([pitch[t], 0.0, 0.0]), rotvec_to_quat([0.0, 0.0, roll[t]])),
        )
        cameras.append(
            CameraParams(rotation=q, translation=np.array([tx[t], ty[t]]), scale=scale[t]).validate()
        )

    trajectory = ShapeTrajectory(id_coeffs=id_coeffs, exp_coeffs=exp_coeffs, cameras=cameras)

    lm_idx = model.landmark_indices.astype(np.int64)
    left_ring = model.left_eye_region.astype(np.int64)
    right_ring = model.right_eye_region.astype(np.int64)
    points = np.zeros((n_frames, lm_idx.shape[0], 2))
    gaze_frames = []
    for t in range(n_frames):
        shape = synthesize_shape(model, ShapeParams(id_coeffs, exp_coeffs[t]))
        proj, _ = project(shape[lm_idx], cameras[t])
        points[t] = proj

        left, _ = project(shape[left_ring], cameras[t])
        right, _ = project(shape[right_ring], cameras[t])
        gaze_frames.append(
            GazeFrame(
                left_eyelid=left,
                right_eyelid=right,
                left_iris=left.mean(axis=0) + 0.5 * (left - left.mean(axis=0)),
                right_iris=right.mean(axis=0) + 0.5 * (right - right.mean(axis=0)),
            )
        )

    if noise_px > 0.0:
        points = points + rng.normal(0.0, noise_px, points.shape)
    landmarks = LandmarkSequence(points=points, confidence=np.ones(points.shape[:2]))
    return trajectory, landmarks.validate(), gaze_frames
