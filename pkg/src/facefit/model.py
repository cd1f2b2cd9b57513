"""Linear 3D morphable face model: storage, synthesis, and binary container IO.

A model holds a mean shape plus identity and expression basis matrices with
per-column standard deviations. Bases are stored raw (columns approximately
orthonormal); the sigmas enter only through priors and coefficient bounds,
never through the synthesis equation.
"""

from __future__ import annotations

import dataclasses
import struct
import warnings
from pathlib import Path

import numpy as np

from .errors import DegenerateModelError, FormatError, ValidationError

MODEL_MAGIC = b"H2HM"
MODEL_VERSION = 1
NUM_LANDMARKS = 68


@dataclasses.dataclass
class ShapeParams:
    """Identity and expression coefficients for one synthesized shape."""

    id_coeffs: np.ndarray
    exp_coeffs: np.ndarray

    def __post_init__(self):
        self.id_coeffs = np.asarray(self.id_coeffs, dtype=np.float64)
        self.exp_coeffs = np.asarray(self.exp_coeffs, dtype=np.float64)


@dataclasses.dataclass
class MorphableModel:
    """Linear shape model with triangle topology and semantic vertex indices.

    Attributes:
        mean_shape: (3N,) flattened mean vertices, xyz interleaved.
        id_basis: (3N, n_id) identity basis, raw columns.
        exp_basis: (3N, n_exp) expression basis, raw columns.
        id_sigma: (n_id,) per-mode standard deviations, > 0.
        exp_sigma: (n_exp,) per-mode standard deviations, > 0.
        triangles: (M, 3) uint32 vertex indices.
        landmark_indices: (68,) uint32 vertex indices of the landmark set.
        left_eye_region / right_eye_region: ordered uint32 vertex rings
            around each eye socket.
    """

    mean_shape: np.ndarray
    id_basis: np.ndarray
    exp_basis: np.ndarray
    id_sigma: np.ndarray
    exp_sigma: np.ndarray
    triangles: np.ndarray
    landmark_indices: np.ndarray
    left_eye_region: np.ndarray
    right_eye_region: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def n_id(self) -> int:
        return self.id_basis.shape[1]

    @property
    def n_exp(self) -> int:
        return self.exp_basis.shape[1]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def validate(self) -> "MorphableModel":
        mean = self.mean_shape
        if mean.ndim != 1 or mean.shape[0] == 0 or mean.shape[0] % 3 != 0:
            raise ValidationError("mean_shape: expected non-empty flat array of length 3N")
        if not np.all(np.isfinite(mean)):
            raise ValidationError("mean_shape: non-finite value")
        n3 = mean.shape[0]
        n = n3 // 3

        for name, basis, sigma in (
            ("id", self.id_basis, self.id_sigma),
            ("exp", self.exp_basis, self.exp_sigma),
        ):
            if basis.ndim != 2 or basis.shape[0] != n3:
                raise ValidationError(
                    "%s_basis: expected shape (%d, k), got %r" % (name, n3, basis.shape)
                )
            if not np.all(np.isfinite(basis)):
                raise ValidationError("%s_basis: non-finite value" % name)
            if sigma.shape != (basis.shape[1],):
                raise ValidationError(
                    "%s_sigma: expected %d entries, got %r" % (name, basis.shape[1], sigma.shape)
                )
            if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0.0):
                raise ValidationError("%s_sigma: entries must be finite and > 0" % name)
            if basis.shape[1] > 0:
                gram = basis.T @ basis
                dev = float(np.max(np.abs(gram - np.eye(basis.shape[1]))))
                if dev > 1e-6:
                    warnings.warn(
                        "%s_basis columns deviate from orthonormality by %.3g" % (name, dev),
                        stacklevel=2,
                    )

        tri = self.triangles
        if tri.ndim != 2 or tri.shape[1] != 3 or tri.shape[0] == 0:
            raise ValidationError("triangles: expected non-empty (M, 3) array")
        if int(tri.max()) >= n:
            raise ValidationError(
                "triangles: vertex index %d out of range for %d vertices" % (int(tri.max()), n)
            )

        lmk = self.landmark_indices
        if lmk.shape != (NUM_LANDMARKS,):
            raise ValidationError(
                "landmark_indices: expected exactly %d entries, got %r" % (NUM_LANDMARKS, lmk.shape)
            )
        if int(lmk.max()) >= n:
            raise ValidationError("landmark_indices: vertex index out of range")

        for name, ring in (("left_eye_region", self.left_eye_region), ("right_eye_region", self.right_eye_region)):
            if ring.ndim != 1 or ring.shape[0] < 3:
                raise ValidationError("%s: expected an ordered ring of at least 3 vertices" % name)
            if int(ring.max()) >= n:
                raise ValidationError("%s: vertex index out of range" % name)
        return self

    def _arrays(self):
        return (
            self.mean_shape,
            self.id_basis,
            self.exp_basis,
            self.id_sigma,
            self.exp_sigma,
            self.triangles,
            self.landmark_indices,
            self.left_eye_region,
            self.right_eye_region,
        )


def synthesize_shape(model: MorphableModel, params: ShapeParams) -> np.ndarray:
    """Evaluate the linear shape model: mean + id_basis @ s_id + exp_basis @ s_exp.

    Returns (N, 3) vertex positions.
    """
    if params.id_coeffs.shape != (model.n_id,):
        raise ValidationError(
            "id_coeffs: expected %d entries, got %r" % (model.n_id, params.id_coeffs.shape)
        )
    if params.exp_coeffs.shape != (model.n_exp,):
        raise ValidationError(
            "exp_coeffs: expected %d entries, got %r" % (model.n_exp, params.exp_coeffs.shape)
        )
    flat = model.mean_shape + model.id_basis @ params.id_coeffs + model.exp_basis @ params.exp_coeffs
    return flat.reshape(-1, 3)


def normalized_mean_face(model: MorphableModel):
    """Per-axis min-max normalization of the mean shape, plus triangle colors.

    Returns:
        (verts, colors): (N, 3) vertices scaled so each axis spans exactly
        [0, 1], and (M, 3) per-triangle colors, each the centroid of its
        three normalized vertices.

    Raises:
        DegenerateModelError: some axis of the mean shape has zero extent.
    """
    verts = model.mean_shape.reshape(-1, 3)
    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    extent = hi - lo
    if np.any(extent <= 0.0):
        axis = int(np.argmin(extent))
        raise DegenerateModelError("mean shape has zero extent on axis %d" % axis)
    norm = (verts - lo) / extent
    colors = norm[model.triangles.astype(np.int64)].mean(axis=1)
    return norm, colors


# ---------------------------------------------------------------------------
# binary container IO


class _Reader:
    """Sequential little-endian reader that reports byte offsets on failure."""

    def __init__(self, data: bytes, name: str):
        self.data = data
        self.name = name
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.data):
            raise FormatError(
                "%s: truncated while reading %s at byte %d (need %d bytes, %d remain)"
                % (self.name, what, self.pos, count, len(self.data) - self.pos)
            )
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def u32(self, what: str) -> int:
        return int(struct.unpack("<I", self.take(4, what))[0])

    def f64_array(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)

    def u32_array(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<u4").astype(np.uint32)

    def expect_eof(self):
        if self.pos != len(self.data):
            raise FormatError(
                "%s: %d trailing bytes at byte %d"
                % (self.name, len(self.data) - self.pos, self.pos)
            )


def load_model(path) -> MorphableModel:
    """Read a model container; arrays in the result are marked read-only.

    Raises:
        FormatError: malformed container (message includes the byte offset).
        ValidationError: well-formed container with invalid content.
    """
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    magic = r.take(4, "magic")
    if magic != MODEL_MAGIC:
        raise FormatError("%s: bad magic %r at byte 0, expected %r" % (path, magic, MODEL_MAGIC))
    version = r.u32("version")
    if version != MODEL_VERSION:
        raise FormatError("%s: unsupported version %d at byte 4" % (path, version))
    n = r.u32("vertex count")
    n_id = r.u32("identity mode count")
    n_exp = r.u32("expression mode count")
    m = r.u32("triangle count")

    mean = r.f64_array(3 * n, "mean shape")
    id_basis = r.f64_array(3 * n * n_id, "identity basis").reshape((3 * n, n_id), order="F")
    exp_basis = r.f64_array(3 * n * n_exp, "expression basis").reshape((3 * n, n_exp), order="F")
    id_sigma = r.f64_array(n_id, "identity sigmas")
    exp_sigma = r.f64_array(n_exp, "expression sigmas")
    triangles = r.u32_array(3 * m, "triangles").reshape(m, 3)
    landmarks = r.u32_array(NUM_LANDMARKS, "landmark indices")
    n_left = r.u32("left eye ring length")
    left = r.u32_array(n_left, "left eye ring")
    n_right = r.u32("right eye ring length")
    right = r.u32_array(n_right, "right eye ring")
    r.expect_eof()

    model = MorphableModel(
        mean_shape=mean,
        id_basis=id_basis,
        exp_basis=exp_basis,
        id_sigma=id_sigma,
        exp_sigma=exp_sigma,
        triangles=triangles,
        landmark_indices=landmarks,
        left_eye_region=left,
        right_eye_region=right,
    ).validate()
    for arr in model._arrays():  # the model is shared across worker threads
        arr.setflags(write=False)
    return model


def save_model(model: MorphableModel, path) -> None:
    """Write a model container (little-endian, bases column-major)."""
    model.validate()
    buf = bytearray()
    buf += MODEL_MAGIC
    buf += struct.pack(
        "<5I", MODEL_VERSION, model.n_vertices, model.n_id, model.n_exp, model.n_triangles
    )
    buf += model.mean_shape.astype("<f8").tobytes()
    buf += model.id_basis.astype("<f8").tobytes(order="F")
    buf += model.exp_basis.astype("<f8").tobytes(order="F")
    buf += model.id_sigma.astype("<f8").tobytes()
    buf += model.exp_sigma.astype("<f8").tobytes()
    buf += model.triangles.astype("<u4").tobytes(order="C")
    buf += model.landmark_indices.astype("<u4").tobytes()
    buf += struct.pack("<I", model.left_eye_region.shape[0])
    buf += model.left_eye_region.astype("<u4").tobytes()
    buf += struct.pack("<I", model.right_eye_region.shape[0])
    buf += model.right_eye_region.astype("<u4").tobytes()
    Path(path).write_bytes(bytes(buf))
