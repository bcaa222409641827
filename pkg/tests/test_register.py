import numpy as np
import pytest

from razemeter.raster import GeoTile, translate_reflect
from razemeter.register import (
    CropTooSmallError, InsufficientMatchesError, KeyPoint, apply_translation,
    common_crop, detect_keypoints, match_keypoints, register_pair,
)
from razemeter.synth import SceneSpec, synth_scene


def textured_image(seed, h=128, w=128):
    """Random texture with enough structure for corners everywhere."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (h, w, 3), dtype=np.uint8)


class TestDetectKeypoints:
    def test_constant_image_empty(self):
        img = np.full((64, 64, 3), 77, dtype=np.uint8)
        assert detect_keypoints(img) == []

    def test_square_corners_found(self):
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        img[20:40, 20:40] = 255
        kps = detect_keypoints(img, max_points=10)
        true_corners = [(20, 20), (20, 39), (39, 20), (39, 39)]
        for cx, cy in true_corners:
            d = min(abs(kp.x - cx) + abs(kp.y - cy) for kp in kps)
            assert d <= 2, f"no keypoint near corner ({cx},{cy})"

    def test_response_ordering(self):
        kps = detect_keypoints(textured_image(0), max_points=50)
        responses = [kp.response for kp in kps]
        assert responses == sorted(responses, reverse=True)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            detect_keypoints(np.zeros((8, 8, 3), dtype=np.uint8))


class TestMatchKeypoints:
    def test_identity_shift(self):
        img = textured_image(1)
        kps = detect_keypoints(img, 100)
        m = match_keypoints(img, kps, img, kps)
        assert m.estimated_shift == (0, 0)
        assert m.residual == 0.0

    def test_constructed_shift(self):
        img = textured_image(2)
        shifted = translate_reflect(img, 5, -3)
        kps_a = detect_keypoints(img, 100)
        kps_b = detect_keypoints(shifted, 100)
        m = match_keypoints(img, kps_a, shifted, kps_b)
        assert m.estimated_shift == (5, -3)

    def test_outlier_robustness(self):
        # replace 30% of matched pairs with random displacements; median holds
        img = textured_image(3)
        shifted = translate_reflect(img, 5, -3)
        kps_a = detect_keypoints(img, 100)
        kps_b = detect_keypoints(shifted, 100)
        m = match_keypoints(img, kps_a, shifted, kps_b)
        rng = np.random.default_rng(0)
        pairs = list(m.pairs)
        n_out = int(0.3 * len(pairs))
        for i in range(n_out):
            ka, kb, s = pairs[i]
            fake = KeyPoint(x=int(rng.integers(0, 128)), y=int(rng.integers(0, 128)),
                            response=1.0)
            pairs[i] = (ka, fake, s)
        dxs = np.array([kb.x - ka.x for ka, kb, _ in pairs])
        dys = np.array([kb.y - ka.y for ka, kb, _ in pairs])
        assert round(float(np.median(dxs))) == 5
        assert round(float(np.median(dys))) == -3

    def test_insufficient_matches(self):
        img = textured_image(4)
        other = textured_image(5)  # unrelated texture: nothing clears NCC 0.7
        kps_a = detect_keypoints(img, 20)
        kps_b = detect_keypoints(other, 20)
        with pytest.raises(InsufficientMatchesError) as exc:
            match_keypoints(img, kps_a, other, kps_b, ncc_threshold=0.95)
        assert exc.value.n_pairs < 4

    def test_empty_keypoints_rejected(self):
        img = textured_image(6)
        with pytest.raises(ValueError):
            match_keypoints(img, [], img, [])


class TestApplyTranslation:
    def tile(self, seed=0):
        return GeoTile(pixels=textured_image(seed), disaster_id="d0")

    def test_zero_shift_identity(self):
        t = self.tile()
        assert np.array_equal(apply_translation(t, (0, 0)).pixels, t.pixels)

    def test_shift_and_back_recovers_interior(self):
        t = self.tile(1)
        back = apply_translation(apply_translation(t, (3, 0)), (-3, 0))
        assert np.array_equal(back.pixels[:, 3:-3], t.pixels[:, 3:-3])

    def test_out_of_range_rejected(self):
        t = self.tile(2)
        with pytest.raises(ValueError):
            apply_translation(t, (t.width, 0))

    def test_metadata_preserved(self):
        t = self.tile(3)
        assert apply_translation(t, (2, 2)).disaster_id == "d0"


class TestCommonCrop:
    def make_pair(self, h=1000, w=1000):
        img = textured_image(7, h, w)
        a = GeoTile(pixels=img, epoch="before")
        b = GeoTile(pixels=img, epoch="after")
        kps = detect_keypoints(img, 200)
        m = match_keypoints(img, kps, img, kps)
        return a, b, m

    def test_area_ratio(self):
        a, b, m = self.make_pair()
        ca, cb, _ = common_crop(a, b, m)
        assert ca.width == cb.width and ca.height == cb.height
        ratio = (ca.width * ca.height) / (a.width * a.height)
        assert ratio == pytest.approx(0.64, abs=0.01)

    def test_output_dims_equal(self):
        a, b, m = self.make_pair(600, 900)
        ca, cb, _ = common_crop(a, b, m)
        assert (ca.width, ca.height) == (cb.width, cb.height)

    def test_crop_too_small(self):
        a, b, m = self.make_pair(300, 300)
        with pytest.raises(CropTooSmallError):
            common_crop(a, b, m)

    def test_edge_anchor_clamped(self):
        img = textured_image(8, 400, 400)
        a = GeoTile(pixels=img)
        b = GeoTile(pixels=img)
        edge_kp = KeyPoint(x=390, y=200, response=1.0)
        from razemeter.register import MatchSet
        m = MatchSet(pairs=((edge_kp, edge_kp, 1.0),) * 4,
                     estimated_shift=(0, 0), residual=0.0)
        ca, cb, (rows, cols) = common_crop(a, b, m)
        assert cols.stop <= 400 and cols.start >= 0
        assert ca.width == cb.width == 320


class TestTranslationRecoveryProperty:
    def test_seeded_synthetic_pairs(self):
        # smaller version of the acceptance sweep: exact recovery on 10 pairs
        rng = np.random.default_rng(42)
        for _ in range(10):
            dx, dy = int(rng.integers(-10, 11)), int(rng.integers(-10, 11))
            spec = SceneSpec(seed=int(rng.integers(0, 2**31)), width=256, height=256,
                             building_count=15, destruction_rate=0.2,
                             jitter=(dx, dy), noise_sigma=2.0)
            before, after, _ = synth_scene(spec)
            m = register_pair(before, after)
            assert m.estimated_shift == (dx, dy)
