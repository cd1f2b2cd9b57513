"""Deterministic rendering of conditioning images.

Rasterization uses pixel centers at half-integer coordinates, a fixed
edge-inclusion rule so abutting triangles never double-claim or drop a pixel,
and a z-buffer where larger projected depth wins and equal depth keeps the
lower triangle index. All outputs are pure functions of their inputs; frames
can therefore be rendered by any number of workers in any order.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import project
from .errors import ValidationError
from .model import normalized_mean_face, synthesize_shape

BACKGROUND_ID = -1
EYELID_COLOR = (180, 180, 180)
IRIS_COLOR = (90, 90, 90)


@dataclasses.dataclass
class VisibilityMask:
    """Per-pixel triangle index (-1 for background) and interpolated depth."""

    width: int
    height: int
    triangle_id: np.ndarray  # (H, W) int32
    depth: np.ndarray  # (H, W) float64, -inf on background


def _edge_inclusive(ax, ay, bx, by):
    # boundary pixels belong to the triangle whose edge is horizontal-leftward
    # or upward (y decreasing); the neighbour across the edge excludes them
    dx = bx - ax
    dy = by - ay
    return (dy == 0.0 and dx > 0.0) or dy < 0.0


def _raster_triangle(value, x0, y0, x1, y1, x2, y2, z0, z1, z2, tid, zbuf):
    area2 = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
    if area2 == 0.0 or not math.isfinite(area2):
        return
    if area2 < 0.0:  # reorder so the covered side is the positive one
        x1, y1, x2, y2, z1, z2 = x2, y2, x1, y1, z2, z1

    h, w = tid.shape
    ix0 = max(0, math.ceil(min(x0, x1, x2) - 0.5))
    ix1 = min(w - 1, math.floor(max(x0, x1, x2) - 0.5))
    iy0 = max(0, math.ceil(min(y0, y1, y2) - 0.5))
    iy1 = min(h - 1, math.floor(max(y0, y1, y2) - 0.5))
    if ix0 > ix1 or iy0 > iy1:
        return

    incl0 = _edge_inclusive(x1, y1, x2, y2)
    incl1 = _edge_inclusive(x2, y2, x0, y0)
    incl2 = _edge_inclusive(x0, y0, x1, y1)

    px = np.arange(ix0, ix1 + 1, dtype=np.float64)[None, :] + 0.5
    py = np.arange(iy0, iy1 + 1, dtype=np.float64)[:, None] + 0.5
    w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
    w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
    cover = (
        ((w0 > 0.0) | ((w0 == 0.0) & incl0))
        & ((w1 > 0.0) | ((w1 == 0.0) & incl1))
        & ((w2 > 0.0) | ((w2 == 0.0) & incl2))
    )
    if not cover.any():
        return
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = (w0 * z0 + w1 * z1 + w2 * z2) / (w0 + w1 + w2)

    zslice = zbuf[iy0 : iy1 + 1, ix0 : ix1 + 1]
    tslice = tid[iy0 : iy1 + 1, ix0 : ix1 + 1]
    sel = cover & (depth > zslice)  # strict: depth ties keep the lower index
    zslice[sel] = depth[sel]
    tslice[sel] = value


def rasterize_projected(points2d, depth, triangles, width, height) -> VisibilityMask:
    """Rasterize already-projected triangles into a visibility mask."""
    if width <= 0 or height <= 0:
        raise ValidationError("image size: width and height must be positive")
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    dep = np.asarray(depth, dtype=np.float64).reshape(-1)
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if tri.size and (tri.min() < 0 or tri.max() >= pts.shape[0]):
        raise ValidationError("triangles: vertex index out of range")

    tid = np.full((height, width), BACKGROUND_ID, dtype=np.int32)
    zbuf = np.full((height, width), -np.inf, dtype=np.float64)
    for m in range(tri.shape[0]):
        a, b, c = tri[m]
        if not (
            math.isfinite(pts[a, 0]) and math.isfinite(pts[a, 1])
            and math.isfinite(pts[b, 0]) and math.isfinite(pts[b, 1])
            and math.isfinite(pts[c, 0]) and math.isfinite(pts[c, 1])
        ):
            continue
        _raster_triangle(
            m,
            pts[a, 0], pts[a, 1], pts[b, 0], pts[b, 1], pts[c, 0], pts[c, 1],
            dep[a], dep[b], dep[c],
            tid, zbuf,
        )
    return VisibilityMask(width=width, height=height, triangle_id=tid, depth=zbuf)


def rasterize(vertices, triangles, camera, width, height) -> VisibilityMask:
    """Project vertices through a scaled orthographic camera and rasterize."""
    pts, dep = project(vertices, camera)
    return rasterize_projected(pts, dep, triangles, width, height)


def encode_nmfc(mask: VisibilityMask, triangle_colors) -> np.ndarray:
    """Paint per-triangle normalized mean-face colors into an RGB byte image.

    Foreground bytes are round-to-nearest of 255 * color; background is black.
    """
    colors = np.asarray(triangle_colors, dtype=np.float64)
    if colors.ndim != 2 or colors.shape[1] != 3:
        raise ValidationError("triangle_colors: expected (M, 3) array")
    if np.any(colors < 0.0) or np.any(colors > 1.0):
        raise ValidationError("triangle_colors: values must lie in [0, 1]")
    fg = mask.triangle_id >= 0
    if fg.any() and int(mask.triangle_id.max()) >= colors.shape[0]:
        raise ValidationError(
            "triangle_colors: %d colors for triangle index %d"
            % (colors.shape[0], int(mask.triangle_id.max()))
        )
    img = np.zeros((mask.height, mask.width, 3), dtype=np.uint8)
    if fg.any():
        img[fg] = np.rint(255.0 * colors[mask.triangle_id[fg]]).astype(np.uint8)
    return img


# ---------------------------------------------------------------------------
# gaze frames


@dataclasses.dataclass
class GazeFrame:
    """Eyelid and iris polygons for one frame, in pixel coordinates.

    Any polygon may be None (eye not tracked in that frame).
    """

    left_eyelid: np.ndarray | None = None
    right_eyelid: np.ndarray | None = None
    left_iris: np.ndarray | None = None
    right_iris: np.ndarray | None = None

    def polygons(self):
        return (
            ("left_eyelid", self.left_eyelid),
            ("right_eyelid", self.right_eyelid),
            ("left_iris", self.left_iris),
            ("right_iris", self.right_iris),
        )

    def validate(self) -> "GazeFrame":
        for name, poly in self.polygons():
            if poly is None:
                continue
            arr = np.asarray(poly, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 3:
                raise ValidationError("%s: expected at least 3 points of shape (K, 2)" % name)
            if not np.all(np.isfinite(arr)):
                raise ValidationError("%s: non-finite coordinate" % name)
        return self

    def map_points(self, fn) -> "GazeFrame":
        """New frame with every polygon passed through fn (None stays None)."""
        def apply(poly):
            return None if poly is None else fn(np.asarray(poly, dtype=np.float64))

        return GazeFrame(
            left_eyelid=apply(self.left_eyelid),
            right_eyelid=apply(self.right_eyelid),
            left_iris=apply(self.left_iris),
            right_iris=apply(self.right_iris),
        )


def polygon_mask(points, width, height) -> np.ndarray:
    """Even-odd scanline fill: a pixel is set when its center lies inside.

    Scanline crossings use the half-open rule (an edge spans its lower y
    endpoint inclusive, upper exclusive), so vertices on a scanline are
    counted exactly once.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((height, width), dtype=bool)
    if pts.shape[0] < 3:
        return mask
    x1 = pts[:, 0]
    y1 = pts[:, 1]
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)
    for iy in range(height):
        yc = iy + 0.5
        cross = ((y1 <= yc) & (yc < y2)) | ((y2 <= yc) & (yc < y1))
        if not cross.any():
            continue
        t = (yc - y1[cross]) / (y2[cross] - y1[cross])
        xs = np.sort(x1[cross] + t * (x2[cross] - x1[cross]))
        for i in range(0, xs.shape[0] - 1, 2):
            a, b = xs[i], xs[i + 1]
            ix0 = max(0, math.ceil(a - 0.5))
            ix1 = min(width - 1, math.ceil(b - 0.5) - 1)
            if ix0 <= ix1:
                mask[iy, ix0 : ix1 + 1] = True
    return mask


def _bresenham(mask, ax, ay, bx, by):
    h, w = mask.shape
    dx = abs(bx - ax)
    sx = 1 if ax < bx else -1
    dy = -abs(by - ay)
    sy = 1 if ay < by else -1
    err = dx + dy
    x, y = ax, ay
    while True:
        if 0 <= x < w and 0 <= y < h:
            mask[y, x] = True
        if x == bx and y == by:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def outline_mask(points, width, height) -> np.ndarray:
    """One-pixel closed outline over the cells containing the polygon edges."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((height, width), dtype=bool)
    if pts.shape[0] < 2:
        return mask
    cells = np.floor(pts).astype(np.int64)
    k = cells.shape[0]
    for i in range(k):
        ax, ay = cells[i]
        bx, by = cells[(i + 1) % k]
        _bresenham(mask, int(ax), int(ay), int(bx), int(by))
    return mask


def _paint_polygon(img, poly, color, label):
    pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 3 or not np.all(np.isfinite(pts)):
        warnings.warn("%s: degenerate polygon skipped" % label, stacklevel=3)
        return
    h, w = img.shape[:2]
    region = polygon_mask(pts, w, h) | outline_mask(pts, w, h)
    img[region] = color


def render_gaze(frame: GazeFrame | None, width, height) -> np.ndarray:
    """Render eyelid fills with iris polygons drawn over them; black background."""
    if width <= 0 or height <= 0:
        raise ValidationError("image size: width and height must be positive")
    img = np.zeros((height, width, 3), dtype=np.uint8)
    if frame is None:
        return img
    for name, poly in (("left_eyelid", frame.left_eyelid), ("right_eyelid", frame.right_eyelid)):
        if poly is not None:
            _paint_polygon(img, poly, EYELID_COLOR, name)
    for name, poly in (("left_iris", frame.left_iris), ("right_iris", frame.right_iris)):
        if poly is not None:
            _paint_polygon(img, poly, IRIS_COLOR, name)
    return img


# ---------------------------------------------------------------------------
# gaze frame JSON IO


def _polygon_to_jsonable(poly):
    if poly is None:
        return None
    return [[float(x), float(y)] for x, y in np.asarray(poly, dtype=np.float64).reshape(-1, 2)]


def save_gaze_frames(frames, path) -> None:
    payload = {
        "frames": [
            {name: _polygon_to_jsonable(poly) for name, poly in frame.polygons()}
            for frame in frames
        ]
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_gaze_frames(path) -> list:
    from .errors import FormatError

    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError("%s: invalid JSON: %s" % (path, exc)) from exc
    frames = payload.get("frames") if isinstance(payload, dict) else payload
    if not isinstance(frames, list):
        raise FormatError("%s: expected a list of gaze frames" % path)
    out = []
    for t, entry in enumerate(frames):
        if not isinstance(entry, dict):
            raise FormatError("%s: frame %d is not an object" % (path, t))
        def poly(name):
            value = entry.get(name)
            if value is None:
                return None
            return np.asarray(value, dtype=np.float64).reshape(-1, 2)

        out.append(
            GazeFrame(
                left_eyelid=poly("left_eyelid"),
                right_eyelid=poly("right_eyelid"),
                left_iris=poly("left_iris"),
                right_iris=poly("right_iris"),
            ).validate()
        )
    return out


# ---------------------------------------------------------------------------
# sequence rendering


def save_png(img, path) -> None:
    Image.fromarray(np.ascontiguousarray(img), "RGB").save(str(path), format="PNG")


def render_conditioning_sequence(
    model,
    trajectory,
    gaze_frames=None,
    *,
    width=256,
    height=256,
    out_dir,
    workers=1,
) -> dict:
    """Render per-frame coordinate-image / gaze PNG pairs plus a manifest.

    Every frame is independent, so worker count and completion order cannot
    affect the output bytes. Returns the manifest, which is also written to
    out_dir/manifest.json.
    """
    trajectory.validate()
    if width <= 0 or height <= 0:
        raise ValidationError("image size: width and height must be positive")
    T = trajectory.n_frames
    if gaze_frames is not None and len(gaze_frames) != T:
        raise ValidationError(
            "gaze_frames: %d frames for a %d-frame trajectory" % (len(gaze_frames), T)
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, colors = normalized_mean_face(model)

    def render_frame(t: int):
        shape = synthesize_shape(model, trajectory.frame_params(t))
        mask = rasterize(shape, model.triangles, trajectory.cameras[t], width, height)
        save_png(encode_nmfc(mask, colors), out / ("nmfc_%06d.png" % t))
        if gaze_frames is not None:
            save_png(render_gaze(gaze_frames[t], width, height), out / ("gaze_%06d.png" % t))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            list(pool.map(render_frame, range(T)))
    else:
        for t in range(T):
            render_frame(t)

    pairs = []
    for t in range(T):
        entry = {"frame": t, "nmfc": "nmfc_%06d.png" % t}
        if gaze_frames is not None:
            entry["gaze"] = "gaze_%06d.png" % t
        pairs.append(entry)
    manifest = {"width": int(width), "height": int(height), "frames": T, "pairs": pairs}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
