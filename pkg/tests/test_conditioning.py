import json

import numpy as np
import pytest
from PIL import Image

from facefit import (
    GazeFrame,
    ValidationError,
    VisibilityMask,
    encode_nmfc,
    load_gaze_frames,
    normalized_mean_face,
    polygon_mask,
    rasterize,
    rasterize_projected,
    render_conditioning_sequence,
    render_gaze,
    save_gaze_frames,
    save_png,
)
from facefit.conditioning import BACKGROUND_ID, EYELID_COLOR, IRIS_COLOR, outline_mask

from _oracles import even_odd_mask, raster_oracle


def random_mesh(rng, n_tris=50, size=64, z_span=10.0):
    pts = rng.uniform(-4.0, size + 4.0, size=(3 * n_tris, 2))
    depth = rng.uniform(-z_span, z_span, size=3 * n_tris)
    tris = np.arange(3 * n_tris, dtype=np.uint32).reshape(n_tris, 3)
    return pts, depth, tris


# ---------------------------------------------------------------------------
# rasterizer vs oracle


def test_rasterizer_bit_identical_to_oracle():
    rng = np.random.default_rng(100)
    for trial in range(40):
        pts, depth, tris = random_mesh(rng)
        mask = rasterize_projected(pts, depth, tris, 64, 64)
        ref_id, ref_depth = raster_oracle(pts, depth, tris, 64, 64)
        assert np.array_equal(mask.triangle_id, ref_id), "trial %d" % trial
        covered = ref_id >= 0
        assert np.array_equal(mask.depth[covered], ref_depth[covered]), "trial %d" % trial


def test_single_triangle_hand_count():
    # right triangle with legs on x=10 and y=10, hypotenuse x+y=40.
    # centers (i+.5, j+.5) inside: 10 < i+.5, 10 < j+.5, i+j+1 < 40 plus the
    # edge rule; counting gives the 190 pixels of a staircase triangle.
    pts = np.array([[10.0, 10.0], [30.0, 10.0], [10.0, 30.0]])
    tris = np.array([[0, 1, 2]], dtype=np.uint32)
    mask = rasterize_projected(pts, np.zeros(3), tris, 64, 64)
    assert int(np.sum(mask.triangle_id == 0)) == 190
    ref_id, _ = raster_oracle(pts, np.zeros(3), tris, 64, 64)
    assert np.array_equal(mask.triangle_id, ref_id)


def test_shared_edge_no_double_claim_no_gap():
    # split the square [8, 40]^2 along its diagonal
    pts = np.array([[8.0, 8.0], [40.0, 8.0], [40.0, 40.0], [8.0, 40.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.uint32)
    mask = rasterize_projected(pts, np.zeros(4), tris, 64, 64)
    count0 = int(np.sum(mask.triangle_id == 0))
    count1 = int(np.sum(mask.triangle_id == 1))
    assert count0 + count1 == 32 * 32  # every square pixel claimed exactly once
    square = even_odd_mask(pts, 64, 64)
    assert np.array_equal(mask.triangle_id >= 0, square)


def test_shared_edge_rule_is_winding_independent():
    pts = np.array([[8.0, 8.0], [40.0, 8.0], [40.0, 40.0], [8.0, 40.0]])
    for order in ([[0, 1, 2], [0, 2, 3]], [[2, 1, 0], [3, 2, 0]]):
        tris = np.array(order, dtype=np.uint32)
        mask = rasterize_projected(pts, np.zeros(4), tris, 64, 64)
        assert int(np.sum(mask.triangle_id >= 0)) == 32 * 32


def test_nearer_triangle_wins():
    pts = np.array([[0.0, 0.0], [64.0, 0.0], [0.0, 64.0]])
    tris = np.array([[0, 1, 2], [0, 1, 2]], dtype=np.uint32)
    depth_far = np.zeros(3)
    # triangle 1 re-uses the same vertices; give it larger depth via stacking
    pts2 = np.vstack([pts, pts])
    tris2 = np.array([[0, 1, 2], [3, 4, 5]], dtype=np.uint32)
    depth2 = np.concatenate([depth_far, np.full(3, 5.0)])  # larger depth = nearer
    mask = rasterize_projected(pts2, depth2, tris2, 64, 64)
    covered = mask.triangle_id >= 0
    assert covered.any()
    assert np.all(mask.triangle_id[covered] == 1)


def test_depth_tie_keeps_lowest_index():
    pts = np.array([[0.0, 0.0], [64.0, 0.0], [0.0, 64.0]])
    pts2 = np.vstack([pts, pts])
    tris2 = np.array([[0, 1, 2], [3, 4, 5]], dtype=np.uint32)
    mask = rasterize_projected(pts2, np.zeros(6), tris2, 64, 64)
    covered = mask.triangle_id >= 0
    assert np.all(mask.triangle_id[covered] == 0)


def test_degenerate_and_nonfinite_triangles_skipped():
    pts = np.array([[5.0, 5.0], [25.0, 5.0], [25.0, 5.0], [np.nan, 10.0]])
    tris = np.array([[0, 1, 2], [0, 1, 3]], dtype=np.uint32)
    mask = rasterize_projected(pts, np.zeros(4), tris, 32, 32)
    assert np.all(mask.triangle_id == BACKGROUND_ID)


def test_background_sentinel_and_shape():
    mask = rasterize_projected(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3), np.uint32), 17, 9)
    assert mask.triangle_id.shape == (9, 17)
    assert mask.triangle_id.dtype == np.int32
    assert np.all(mask.triangle_id == -1)


def test_rasterize_validates_inputs():
    pts = np.zeros((3, 2))
    with pytest.raises(ValidationError, match="width|height|size"):
        rasterize_projected(pts, np.zeros(3), np.array([[0, 1, 2]], np.uint32), 0, 10)
    with pytest.raises(ValidationError, match="triangles"):
        rasterize_projected(pts, np.zeros(3), np.array([[0, 1, 7]], np.uint32), 16, 16)


def test_rasterize_projects_with_camera(small_model, small_performance):
    from facefit import project, synthesize_shape

    truth, _, _ = small_performance
    shape = synthesize_shape(small_model, truth.frame_params(0))
    cam = truth.cameras[0]
    direct = rasterize(shape, small_model.triangles, cam, 64, 64)
    pts, depth = project(shape, cam)
    via = rasterize_projected(pts, depth, small_model.triangles, 64, 64)
    assert np.array_equal(direct.triangle_id, via.triangle_id)


# ---------------------------------------------------------------------------
# coordinate-image encoding


def test_encode_nmfc_quantization():
    mask = VisibilityMask(
        width=2,
        height=1,
        triangle_id=np.array([[0, -1]], dtype=np.int32),
        depth=np.zeros((1, 2)),
    )
    colors = np.array([[0.5, 0.0, 1.0]])
    img = encode_nmfc(mask, colors)
    assert img.dtype == np.uint8
    assert tuple(img[0, 0]) == (int(np.rint(0.5 * 255)), 0, 255)
    assert tuple(img[0, 1]) == (0, 0, 0)  # background stays black


def test_encode_nmfc_rejects_bad_colors():
    mask = VisibilityMask(1, 1, np.zeros((1, 1), np.int32), np.zeros((1, 1)))
    with pytest.raises(ValidationError, match="colors"):
        encode_nmfc(mask, np.array([[1.2, 0.0, 0.0]]))
    with pytest.raises(ValidationError, match="colors"):
        encode_nmfc(mask, np.zeros((0, 3)))


def test_rendered_foreground_colors_come_from_centroid_set(small_model, small_performance):
    truth, _, _ = small_performance
    from facefit import synthesize_shape

    shape = synthesize_shape(small_model, truth.frame_params(0))
    mask = rasterize(shape, small_model.triangles, truth.cameras[0], 96, 96)
    _, colors = normalized_mean_face(small_model)
    img = encode_nmfc(mask, colors)
    allowed = {tuple(np.rint(255.0 * c).astype(np.uint8)) for c in colors}
    fg = img[mask.triangle_id >= 0]
    assert fg.shape[0] > 0
    for triple in {tuple(px) for px in fg}:
        assert triple in allowed


# ---------------------------------------------------------------------------
# polygon fill and gaze


def test_polygon_mask_square_exact_count():
    square = np.array([[20.0, 20.0], [30.0, 20.0], [30.0, 30.0], [20.0, 30.0]])
    mask = polygon_mask(square, 64, 64)
    assert int(mask.sum()) == 100
    assert np.array_equal(mask, even_odd_mask(square, 64, 64))


def test_polygon_mask_matches_oracle_on_random_polygons():
    rng = np.random.default_rng(17)
    for trial in range(30):
        k = int(rng.integers(3, 9))
        poly = rng.uniform(2.0, 46.0, size=(k, 2))
        assert np.array_equal(polygon_mask(poly, 48, 48), even_odd_mask(poly, 48, 48)), (
            "trial %d" % trial
        )


def test_polygon_mask_concave_even_odd():
    # bowtie: self-intersecting, even-odd empties the top and bottom wings
    poly = np.array([[10.0, 10.0], [40.0, 40.0], [40.0, 10.0], [10.0, 40.0]])
    mask = polygon_mask(poly, 50, 50)
    assert np.array_equal(mask, even_odd_mask(poly, 50, 50))
    assert mask[25, 12]  # inside the left wing
    assert not mask[12, 25]  # above the pinch point


def test_outline_mask_square_perimeter():
    square = np.array([[20.0, 20.0], [30.0, 20.0], [30.0, 30.0], [20.0, 30.0]])
    outline = outline_mask(square, 64, 64)
    assert int(outline.sum()) == 40  # 4 sides of 11 cells minus 4 shared corners
    assert outline[20, 25]
    assert outline[30, 30]
    assert not outline[25, 25]


def test_render_gaze_paints_square_within_bounds():
    square = np.array([[20.0, 20.0], [30.0, 20.0], [30.0, 30.0], [20.0, 30.0]])
    img = render_gaze(GazeFrame(left_eyelid=square), 64, 64)
    painted = np.all(img == np.array(EYELID_COLOR, np.uint8), axis=2)
    n = int(painted.sum())
    assert 100 <= n <= 121  # fill plus a one-pixel outline ring
    assert np.all(img[~painted] == 0)


def test_render_gaze_iris_overdraws_eyelid():
    eyelid = np.array([[10.0, 10.0], [40.0, 10.0], [40.0, 40.0], [10.0, 40.0]])
    iris = np.array([[20.0, 20.0], [30.0, 20.0], [30.0, 30.0], [20.0, 30.0]])
    img = render_gaze(GazeFrame(left_eyelid=eyelid, left_iris=iris), 64, 64)
    assert tuple(img[25, 25]) == IRIS_COLOR
    assert tuple(img[12, 12]) == EYELID_COLOR
    # iris core is entirely iris-colored even though the eyelid covers it
    assert np.all(img[22:28, 22:28] == np.array(IRIS_COLOR, np.uint8))


def test_render_gaze_none_frame_is_black():
    img = render_gaze(None, 32, 32)
    assert img.shape == (32, 32, 3)
    assert not img.any()
    assert not render_gaze(GazeFrame(), 32, 32).any()


def test_render_gaze_short_polygon_warns_and_skips():
    frame = GazeFrame(left_eyelid=np.array([[1.0, 1.0], [5.0, 5.0]]))
    with pytest.warns(UserWarning, match="left_eyelid"):
        img = render_gaze(frame, 32, 32)
    assert not img.any()


def test_gaze_frame_validation():
    with pytest.raises(ValidationError, match="right_iris"):
        GazeFrame(right_iris=np.array([[0.0, 0.0], [1.0, 1.0], [np.nan, 2.0]])).validate()


def test_gaze_frames_json_round_trip(tmp_path, small_performance):
    _, _, gaze = small_performance
    path = tmp_path / "gaze.json"
    save_gaze_frames(gaze, path)
    loaded = load_gaze_frames(path)
    assert len(loaded) == len(gaze)
    for a, b in zip(gaze, loaded):
        for (name_a, poly_a), (name_b, poly_b) in zip(a.polygons(), b.polygons()):
            assert name_a == name_b
            if poly_a is None:
                assert poly_b is None
            else:
                assert np.allclose(poly_a, poly_b, rtol=0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# sequence rendering


def test_sequence_render_deterministic_across_workers(tmp_path, small_model, small_performance):
    truth, _, gaze = small_performance
    dir1 = tmp_path / "w1"
    dir4 = tmp_path / "w4"
    render_conditioning_sequence(
        small_model, truth, gaze, width=96, height=80, out_dir=dir1, workers=1
    )
    render_conditioning_sequence(
        small_model, truth, gaze, width=96, height=80, out_dir=dir4, workers=4
    )
    names = sorted(p.name for p in dir1.iterdir())
    assert names == sorted(p.name for p in dir4.iterdir())
    for name in names:
        assert (dir1 / name).read_bytes() == (dir4 / name).read_bytes(), name


def test_sequence_render_manifest(tmp_path, small_model, small_performance):
    truth, _, gaze = small_performance
    out = tmp_path / "seq"
    manifest = render_conditioning_sequence(
        small_model, truth, gaze, width=64, height=64, out_dir=out, workers=2
    )
    on_disk = json.loads((out / "manifest.json").read_text())
    assert on_disk == manifest
    assert manifest["frames"] == truth.n_frames
    assert manifest["width"] == 64 and manifest["height"] == 64
    assert len(manifest["pairs"]) == truth.n_frames
    for t, entry in enumerate(manifest["pairs"]):
        assert entry["frame"] == t
        nmfc = out / entry["nmfc"]
        gaze_png = out / entry["gaze"]
        assert nmfc.is_file() and gaze_png.is_file()
        with Image.open(nmfc) as im:
            assert im.size == (64, 64)
            assert im.mode == "RGB"


def test_sequence_render_without_gaze(tmp_path, small_model, small_performance):
    truth, _, _ = small_performance
    out = tmp_path / "plain"
    manifest = render_conditioning_sequence(
        small_model, truth, width=48, height=48, out_dir=out
    )
    assert all("gaze" not in entry for entry in manifest["pairs"])
    assert not list(out.glob("gaze_*.png"))
    assert len(list(out.glob("nmfc_*.png"))) == truth.n_frames


def test_sequence_render_gaze_count_mismatch(tmp_path, small_model, small_performance):
    truth, _, gaze = small_performance
    with pytest.raises(ValidationError, match="gaze_frames"):
        render_conditioning_sequence(
            small_model, truth, gaze[:-1], width=32, height=32, out_dir=tmp_path / "x"
        )


def test_save_png_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(20, 30, 3), dtype=np.uint8)
    path = tmp_path / "img.png"
    save_png(img, path)
    with Image.open(path) as im:
        back = np.asarray(im)
    assert np.array_equal(back, img)
