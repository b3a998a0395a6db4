import numpy as np
import pytest

from posecompose.errors import DomainError
from posecompose.pose_geometry import (
    COCO17_EDGES,
    MaskMode,
    Pose2D,
    PoseFormat,
    dilate,
    make_figure_pose,
    mask_to_png_bytes,
    normalize_masks,
    pose_from_json,
    pose_to_json,
    rasterize_skeleton,
    resize_mask_pyramid,
)


def two_point_pose(p, q):
    """COCO17 pose with only nose and left_eye visible (an edge pair)."""
    kp = np.zeros((17, 3))
    kp[0] = [p[0], p[1], 1]
    kp[1] = [q[0], q[1], 1]
    return Pose2D(kp)


def segment_distance(px, py, a, b):
    d = np.asarray(b) - np.asarray(a)
    len2 = d @ d
    if len2 == 0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / len2, 0, 1)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


class TestRasterize:
    def test_vertical_segment_line_width_one(self):
        pose = two_point_pose((10, 10), (10, 20))
        occ = rasterize_skeleton(pose, 32, 32, line_width=1)
        assert occ.sum() == 11
        assert occ[10:21, 10].all()

    def test_all_invisible_degenerate(self):
        kp = np.zeros((17, 3))
        with pytest.raises(DomainError) as e:
            rasterize_skeleton(Pose2D(kp), 32, 32, 1)
        assert e.value.code == "DEGENERATE_POSE"

    def test_one_visible_degenerate(self):
        kp = np.zeros((17, 3))
        kp[0] = [5, 5, 1]
        with pytest.raises(DomainError) as e:
            rasterize_skeleton(Pose2D(kp), 32, 32, 1)
        assert e.value.code == "DEGENERATE_POSE"

    def test_matches_per_pixel_distance_oracle(self):
        # independent oracle: loop over every pixel and every visible bone
        pose = make_figure_pose(32, 32, 44, rng=np.random.default_rng(3), jitter=0.03)
        lw = 3.0
        occ = rasterize_skeleton(pose, 64, 64, line_width=lw)
        kp = pose.keypoints
        expected = np.zeros((64, 64))
        for y in range(64):
            for x in range(64):
                for a, b in COCO17_EDGES:
                    if kp[a, 2] > 0 and kp[b, 2] > 0:
                        if segment_distance(x, y, kp[a, :2], kp[b, :2]) <= lw / 2:
                            expected[y, x] = 1
                            break
        assert np.array_equal(occ, expected)

    def test_out_of_frame_rejected_unless_flagged(self):
        pose = two_point_pose((10, 10), (40, 10))
        with pytest.raises(DomainError):
            rasterize_skeleton(pose, 32, 32, 1)
        flagged = Pose2D(pose.keypoints, pose.format, allow_out_of_frame=True)
        occ = rasterize_skeleton(flagged, 32, 32, 1)
        assert occ[10, 10:32].all()

    def test_wrong_keypoint_count(self):
        with pytest.raises(DomainError) as e:
            Pose2D(np.zeros((5, 3)))
        assert e.value.code == "FORMAT_MISMATCH"


class TestDilate:
    def test_single_center_pixel_512(self):
        occ = np.zeros((512, 512))
        occ[256, 256] = 1
        out = dilate(occ, 512)
        # odd side 2*floor(512/16)+1 = 65
        assert out.sum() == 65 * 65
        assert out[256 - 32:256 + 33, 256 - 32:256 + 33].all()

    def test_empty_map(self):
        occ = np.zeros((64, 64))
        assert dilate(occ, 64).sum() == 0

    def test_matches_sliding_max_oracle(self):
        rng = np.random.default_rng(0)
        occ = (rng.random((32, 32)) < 0.05).astype(float)
        out = dilate(occ, 32)  # s = 5
        expected = np.zeros_like(occ)
        for y in range(32):
            for x in range(32):
                y0, y1 = max(y - 2, 0), min(y + 3, 32)
                x0, x1 = max(x - 2, 0), min(x + 3, 32)
                expected[y, x] = occ[y0:y1, x0:x1].max()
        assert np.array_equal(out, expected)

    def test_monotone_and_growing(self):
        rng = np.random.default_rng(1)
        occ = (rng.random((48, 48)) < 0.03).astype(float)
        d1 = dilate(occ, 48)
        d2 = dilate(d1, 48)
        assert (d1 >= occ).all()
        assert (d2 >= d1).all()


class TestNormalizeMasks:
    def test_exclusive_pixel_saturates(self):
        o1 = np.zeros((4, 4))
        o1[1, 1] = 1
        o2 = np.zeros((4, 4))
        m = normalize_masks([o1, o2], tau=0.001)
        # log-sum-exp: 1/(1+e^{-1000}) is 1.0 to double precision
        assert m.base[0, 1, 1] == pytest.approx(1.0, abs=1e-12)

    def test_uncovered_pixel_uniform(self):
        occs = [np.zeros((4, 4)) for _ in range(3)]
        occs[0][0, 0] = 1
        m = normalize_masks(occs, tau=0.5)
        assert np.allclose(m.base[:, 2, 2], 1 / 3)

    def test_tied_pixel_half_half_both_modes(self):
        o = np.zeros((4, 4))
        o[1, 1] = 1
        for mode in (MaskMode.SOFT, MaskMode.HARD):
            m = normalize_masks([o, o.copy()], tau=0.001, mode=mode)
            assert np.allclose(m.base[:, 1, 1], 0.5)

    def test_partition_of_unity_random(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = rng.integers(1, 8)
            occs = (rng.random((n, 16, 16)) < 0.3).astype(float)
            for tau in (1e-3, 0.1, 1.0):
                m = normalize_masks(list(occs), tau=tau)
                assert np.abs(m.base.sum(axis=0) - 1.0).max() < 1e-6

    def test_monotone_hardening(self):
        rng = np.random.default_rng(3)
        occs = (rng.random((4, 16, 16)) < 0.3).astype(float)
        soft = normalize_masks(list(occs), tau=1e-4, mode=MaskMode.SOFT)
        hard = normalize_masks(list(occs), tau=1e-4, mode=MaskMode.HARD)
        assert np.abs(soft.base - hard.base).max() < 1e-6

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        occs = (rng.random((3, 8, 8)) < 0.4).astype(float)
        m = normalize_masks(list(occs), tau=0.01)
        perm = [2, 0, 1]
        mp = normalize_masks([occs[i] for i in perm], tau=0.01)
        assert np.allclose(mp.base, m.base[perm], atol=1e-12)

    def test_nonpositive_temperature(self):
        with pytest.raises(DomainError) as e:
            normalize_masks([np.zeros((2, 2))], tau=0.0)
        assert e.value.code == "NONPOSITIVE_TEMPERATURE"

    def test_shape_mismatch(self):
        with pytest.raises(DomainError) as e:
            normalize_masks([np.zeros((2, 2)), np.zeros((3, 3))], tau=1.0)
        assert e.value.code == "SHAPE_MISMATCH"


class TestPyramid:
    def test_uniform_preserved(self):
        base = normalize_masks([np.zeros((8, 8)) for _ in range(4)], tau=1.0)
        pyr = resize_mask_pyramid(base, [(4, 4), (2, 2)])
        for shape in [(4, 4), (2, 2)]:
            assert np.allclose(pyr.pyramid[shape], 0.25)

    def test_two_by_two_block_average(self):
        o1 = np.array([[1.0, 1.0], [0.0, 0.0]])
        m = normalize_masks([o1, 1 - o1], tau=1e-4)
        pyr = resize_mask_pyramid(m, [(1, 1)])
        assert pyr.pyramid[(1, 1)][0, 0, 0] == pytest.approx(0.5, abs=1e-9)

    def test_pyramid_partition_of_unity(self):
        rng = np.random.default_rng(5)
        occs = (rng.random((5, 64, 64)) < 0.2).astype(float)
        m = resize_mask_pyramid(normalize_masks(list(occs), tau=0.001), [(32, 32), (16, 16)])
        for shape in [(32, 32), (16, 16)]:
            assert np.abs(m.pyramid[shape].sum(axis=0) - 1.0).max() < 1e-6

    def test_non_divisible_shape(self):
        m = normalize_masks([np.zeros((8, 8))], tau=1.0)
        with pytest.raises(DomainError) as e:
            resize_mask_pyramid(m, [(3, 3)])
        assert e.value.code == "NON_DIVISIBLE_SHAPE"


class TestIO:
    def test_pose_json_round_trip(self):
        pose = make_figure_pose(20, 30, 25)
        again = pose_from_json(pose_to_json(pose))
        assert np.allclose(again.keypoints, pose.keypoints)
        assert again.format == PoseFormat.COCO17

    def test_mask_png_quantization(self):
        mask = np.full((4, 4), 0.5)
        data = mask_to_png_bytes(mask)
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        from PIL import Image
        from io import BytesIO
        arr = np.asarray(Image.open(BytesIO(data)))
        assert (arr == 128).all()  # round(255 * 0.5) = 128
