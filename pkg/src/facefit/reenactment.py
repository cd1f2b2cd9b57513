"""Hybrid source/target trajectory composition and image-space metrics.

A hybrid trajectory drives a target person's identity with a source
performance: expressions and head rotations transfer bitwise from the source,
identity transfers bitwise from the target, the camera scale becomes the mean
target scale, and translations keep the source motion relative to the mean
target position.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraParams, project
from .errors import DegeneratePoseError, ValidationError
from .fitting import ShapeTrajectory
from .model import synthesize_shape

# error between a black and a white pixel; fixed ceiling of the heatmap scale
MAX_PIXEL_ERROR = float(np.sqrt(3.0 * 255.0 ** 2))


def compose_hybrid(
    source: ShapeTrajectory,
    target: ShapeTrajectory,
    *,
    recenter_translation: bool = True,
) -> ShapeTrajectory:
    """Combine a source performance with a target identity.

    Args:
        source: driving trajectory; its frame count defines the output.
        target: trajectory supplying identity and camera scale/position
            statistics; may have a different frame count.
        recenter_translation: shift source translations so their mean moves
            to the mean target translation; False keeps source translations.

    Returns:
        ShapeTrajectory with source expressions/rotations copied bitwise,
        target identity copied bitwise, constant mean-target scale, and
        recentered translations.
    """
    source.validate()
    target.validate()
    if source.id_coeffs.shape != target.id_coeffs.shape:
        raise ValidationError(
            "id_coeffs: source has %d modes, target has %d"
            % (source.id_coeffs.shape[0], target.id_coeffs.shape[0])
        )
    if source.exp_coeffs.shape[1] != target.exp_coeffs.shape[1]:
        raise ValidationError(
            "exp_coeffs: source has %d modes, target has %d"
            % (source.exp_coeffs.shape[1], target.exp_coeffs.shape[1])
        )

    scale = float(np.mean([cam.scale for cam in target.cameras]))
    if recenter_translation:
        src_mean = np.mean([cam.translation for cam in source.cameras], axis=0)
        tgt_mean = np.mean([cam.translation for cam in target.cameras], axis=0)
        shift = tgt_mean - src_mean
    else:
        shift = np.zeros(2)

    cameras = [
        CameraParams(rotation=cam.rotation.copy(), translation=cam.translation + shift, scale=scale)
        for cam in source.cameras
    ]
    return ShapeTrajectory(
        id_coeffs=target.id_coeffs.copy(),
        exp_coeffs=source.exp_coeffs.copy(),
        cameras=cameras,
    )


def similarity_from_points(src, dst):
    """Least-squares 2D similarity (rotation, uniform scale, translation).

    Returns (matrix, offset) with dst ~= src @ matrix.T + offset.

    Raises:
        DegeneratePoseError: the source points are (numerically) coincident.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape or src.shape[0] < 2:
        raise ValidationError("similarity: need matching point sets of size >= 2")
    z = src[:, 0] + 1j * src[:, 1]
    w = dst[:, 0] + 1j * dst[:, 1]
    zc = z - z.mean()
    wc = w - w.mean()
    spread = float(np.real(np.vdot(zc, zc)))
    if spread <= 1e-16 * (1.0 + abs(z.mean()) ** 2):
        raise DegeneratePoseError("source points are coincident; similarity is not determined")
    alpha = complex(np.vdot(zc, wc)) / spread  # vdot conjugates its first argument
    beta = w.mean() - alpha * z.mean()
    matrix = np.array([[alpha.real, -alpha.imag], [alpha.imag, alpha.real]])
    offset = np.array([beta.real, beta.imag])
    return matrix, offset


def _ring_projection(model, trajectory, ring, t):
    shape = synthesize_shape(model, trajectory.frame_params(t))
    pts, _ = project(shape[ring], trajectory.cameras[t])
    return pts


def adapt_gaze(gaze_frames, source: ShapeTrajectory, hybrid: ShapeTrajectory, model):
    """Re-anchor gaze polygons from source frames onto hybrid frames.

    For each frame and each eye, the similarity mapping the source's projected
    eye-socket ring onto the hybrid's ring is applied to that eye's polygons.
    """
    T = source.n_frames
    if hybrid.n_frames != T:
        raise ValidationError("hybrid: %d frames for %d source frames" % (hybrid.n_frames, T))
    if len(gaze_frames) != T:
        raise ValidationError("gaze_frames: %d frames for %d source frames" % (len(gaze_frames), T))

    from .conditioning import GazeFrame

    left_ring = model.left_eye_region.astype(np.int64)
    right_ring = model.right_eye_region.astype(np.int64)
    out = []
    for t in range(T):
        frame = gaze_frames[t]
        sides = {}
        for side, ring in (("left", left_ring), ("right", right_ring)):
            src_pts = _ring_projection(model, source, ring, t)
            hyb_pts = _ring_projection(model, hybrid, ring, t)
            sides[side] = similarity_from_points(src_pts, hyb_pts)

        def moved(poly, side):
            if poly is None:
                return None
            matrix, offset = sides[side]
            return np.asarray(poly, dtype=np.float64).reshape(-1, 2) @ matrix.T + offset

        out.append(
            GazeFrame(
                left_eyelid=moved(frame.left_eyelid, "left"),
                right_eyelid=moved(frame.right_eyelid, "right"),
                left_iris=moved(frame.left_iris, "left"),
                right_iris=moved(frame.right_iris, "right"),
            )
        )
    return out


# ---------------------------------------------------------------------------
# image-space error metrics


def per_pixel_error(img_a, img_b):
    """Euclidean RGB distance per pixel.

    Returns (mean, heat) where heat is the (H, W) float64 distance map. The
    black-vs-white distance is MAX_PIXEL_ERROR.
    """
    a = np.asarray(img_a)
    b = np.asarray(img_b)
    if a.shape != b.shape:
        raise ValidationError("images: size mismatch %r vs %r" % (a.shape, b.shape))
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValidationError("images: expected (H, W, 3) arrays")
    diff = a.astype(np.float64) - b.astype(np.float64)
    heat = np.sqrt(np.sum(diff * diff, axis=2))
    return float(heat.mean()), heat


def save_heatmap(heat, path) -> None:
    """Write a heat map as 8-bit grayscale at the fixed scale 255/MAX_PIXEL_ERROR."""
    heat = np.asarray(heat, dtype=np.float64)
    img = np.rint(heat * (255.0 / MAX_PIXEL_ERROR)).astype(np.uint8)
    Image.fromarray(img, "L").save(str(path), format="PNG")


@dataclasses.dataclass
class SequenceError:
    names: list
    per_frame: list
    overall: float


def sequence_error(dir_a, dir_b, *, heatmap_dir=None) -> SequenceError:
    """Compare every PNG in two directories pairwise by sorted filename.

    With heatmap_dir set, writes one grayscale heat map per pair. Frame counts
    must match; sizes are checked pairwise.
    """
    dir_a = Path(dir_a)
    dir_b = Path(dir_b)
    names_a = sorted(p.name for p in dir_a.glob("*.png"))
    names_b = sorted(p.name for p in dir_b.glob("*.png"))
    if len(names_a) != len(names_b):
        raise ValidationError(
            "sequence: %d frames in %s vs %d in %s" % (len(names_a), dir_a, len(names_b), dir_b)
        )
    if not names_a:
        raise ValidationError("sequence: no PNG frames found in %s" % dir_a)

    if heatmap_dir is not None:
        heatmap_dir = Path(heatmap_dir)
        heatmap_dir.mkdir(parents=True, exist_ok=True)

    per_frame = []
    for i, (na, nb) in enumerate(zip(names_a, names_b)):
        a = np.asarray(Image.open(dir_a / na).convert("RGB"))
        b = np.asarray(Image.open(dir_b / nb).convert("RGB"))
        mean, heat = per_pixel_error(a, b)
        per_frame.append(mean)
        if heatmap_dir is not None:
            save_heatmap(heat, heatmap_dir / ("heat_%06d.png" % i))
    return SequenceError(names=names_a, per_frame=per_frame, overall=float(np.mean(per_frame)))
