import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imu2face import landmarks as lm
from imu2face.exceptions import DataError, GeometryError


def raw_set(rng, nose=None, left=None, right=None):
    pts = rng.uniform(-50, 50, size=(51, 2)) + 300.0
    if nose is not None:
        pts[lm.NOSE_TIP] = nose
    if left is not None:
        pts[lm.LEFT_OUTER_EYE] = left
    if right is not None:
        pts[lm.RIGHT_OUTER_EYE] = right
    return lm.LandmarkSet(pts)


def similarity(points, angle, scale, shift):
    c, s = np.cos(angle), np.sin(angle)
    return scale * points @ np.array([[c, s], [-s, c]]) + shift


def assert_canonical(points, tol=1e-9):
    assert np.abs(points[lm.NOSE_TIP]).max() < tol
    eye = points[lm.RIGHT_OUTER_EYE] - points[lm.LEFT_OUTER_EYE]
    assert abs(np.hypot(*eye) - 1.0) < tol
    assert abs(eye[1]) < tol and eye[0] > 0


class TestNormalize:
    def test_axis_aligned(self):
        s = raw_set(np.random.default_rng(0), nose=(0, 0), left=(-1, 0), right=(1, 0))
        out, rec = lm.normalize(s)
        np.testing.assert_allclose(out.left_outer_eye, [-0.5, 0.0], atol=1e-15)
        np.testing.assert_allclose(out.right_outer_eye, [0.5, 0.0], atol=1e-15)
        np.testing.assert_allclose(out.nose_tip, [0.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(out.points, s.points / 2.0, atol=1e-12)
        assert rec.theta == 0.0 and rec.d == 2.0

    def test_diagonal(self):
        s = raw_set(np.random.default_rng(1), nose=(1, 1), left=(0, 0), right=(2, 2))
        out, rec = lm.normalize(s)
        np.testing.assert_allclose(out.nose_tip, [0, 0], atol=1e-15)
        np.testing.assert_allclose(out.left_outer_eye, [-0.5, 0], atol=1e-15)
        np.testing.assert_allclose(out.right_outer_eye, [0.5, 0], atol=1e-15)
        assert out.frame_tag == lm.NORMALIZED
        assert abs(rec.theta - np.pi / 4) < 1e-15

    def test_eye_vector_pointing_left_uses_full_quadrant(self):
        s = raw_set(np.random.default_rng(2), nose=(0, 0), left=(1, 0.2), right=(-1, 0.1))
        out, _ = lm.normalize(s)
        assert_canonical(out.points)

    def test_coincident_eyes(self):
        s = raw_set(np.random.default_rng(3), left=(5, 5), right=(5, 5))
        with pytest.raises(GeometryError):
            lm.normalize(s)

    @given(
        st.integers(0, 2**31),
        st.floats(-np.pi, np.pi),
        st.floats(0.1, 10.0),
        st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)),
    )
    @settings(max_examples=200, deadline=None)
    def test_similarity_invariance(self, seed, angle, scale, shift):
        pts = raw_set(np.random.default_rng(seed)).points
        base = lm.normalize_points(pts)[0]
        moved = lm.normalize_points(similarity(pts, angle, scale, np.array(shift)))[0]
        np.testing.assert_allclose(moved, base, atol=1e-9, rtol=0)
        assert_canonical(moved)

    def test_round_trip(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            s = raw_set(rng)
            out, rec = lm.normalize(s)
            back = lm.denormalize(out, rec)
            assert np.abs(back.points - s.points).max() < 1e-9
            assert back.frame_tag == lm.RAW

    def test_identity_record(self):
        pts = np.random.default_rng(5).normal(size=(51, 2))
        rec = lm.NormalizationRecord(np.zeros(2), 0.0, 1.0)
        out = lm.denormalize(lm.LandmarkSet(pts, lm.NORMALIZED), rec)
        np.testing.assert_array_equal(out.points, pts)

    def test_canonical_eye_corners_map_back(self):
        s = raw_set(np.random.default_rng(6))
        out, rec = lm.normalize(s)
        canon = np.zeros((51, 2))
        canon[lm.LEFT_OUTER_EYE] = out.left_outer_eye
        canon[lm.RIGHT_OUTER_EYE] = out.left_outer_eye + [1.0, 0.0]
        back = lm.denormalize(lm.LandmarkSet(canon, lm.NORMALIZED), rec)
        np.testing.assert_allclose(back.left_outer_eye, s.left_outer_eye, atol=1e-9)
        np.testing.assert_allclose(back.right_outer_eye, s.right_outer_eye, atol=1e-9)

    def test_normalizer_estimator_flat_and_inverse(self):
        rng = np.random.default_rng(7)
        pts = np.stack([raw_set(rng).points for _ in range(4)])
        flat = np.concatenate([pts[..., 0], pts[..., 1]], axis=1)
        est = lm.LandmarkNormalizer()
        out = est.fit_transform(flat)
        assert out.shape == (4, 102)
        np.testing.assert_allclose(out[:, :51], lm.normalize_points(pts)[0][..., 0])
        back = est.inverse_transform(out, est.records(flat))
        np.testing.assert_allclose(back, flat, atol=1e-9)


class TestMetrics:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.g = lm.LandmarkSet(rng.normal(size=(51, 2)), lm.NORMALIZED)
        self.r = lm.LandmarkSet(rng.normal(size=(51, 2)), lm.NORMALIZED)

    def test_identical(self):
        assert lm.mae(self.g, self.g) == 0.0
        assert lm.nme(self.g, self.g) == 0.0

    def test_uniform_offset(self):
        r = lm.LandmarkSet(self.g.points + [0.01, 0.0], lm.NORMALIZED)
        assert abs(lm.mae(self.g, r, lm.MetricConfig(d_real=100.0)) - 1.0) < 1e-12
        r = lm.LandmarkSet(self.g.points + [0.034, 0.0], lm.NORMALIZED)
        assert abs(lm.nme(self.g, r) - 3.4) < 1e-12

    def test_direct_sum_oracle(self):
        total = 0.0
        for i in range(51):
            dx = self.g.points[i, 0] - self.r.points[i, 0]
            dy = self.g.points[i, 1] - self.r.points[i, 1]
            total += (dx * dx + dy * dy) ** 0.5
        cfg = lm.MetricConfig(d_real=93.0)
        assert abs(lm.mae(self.g, self.r, cfg) - total / 51 * 93.0) < 1e-12

    def test_nme_mae_identity_and_symmetry(self):
        cfg = lm.MetricConfig(d_real=87.5)
        assert abs(lm.nme(self.g, self.r) - lm.mae(self.g, self.r, cfg) * 100 / 87.5) < 1e-12
        assert lm.mae(self.g, self.r, cfg) == lm.mae(self.r, self.g, cfg)

    def test_raw_sets_rejected(self):
        raw = lm.LandmarkSet(self.g.points)
        with pytest.raises(DataError, match="normalized"):
            lm.mae(raw, self.r)
        with pytest.raises(DataError, match="normalized"):
            lm.nme(self.g, raw)

    def test_per_landmark(self):
        rng = np.random.default_rng(1)
        g, r = rng.normal(size=(20, 51, 2)), rng.normal(size=(20, 51, 2))
        cfg = lm.MetricConfig(d_real=90.0)
        per, cdf = lm.per_landmark_errors(g, g, cfg)
        assert np.all(per == 0) and np.all(cdf == 0)
        per, cdf = lm.per_landmark_errors(g[:1], r[:1], cfg)
        np.testing.assert_allclose(per, np.linalg.norm(g[0] - r[0], axis=-1) * 90.0, atol=1e-12)
        per, cdf = lm.per_landmark_errors(g, r, cfg)
        assert abs(per.mean() - lm.mae(g, r, cfg)) < 1e-12
        assert np.all(np.diff(cdf) >= 0) and len(cdf) == 20
        with pytest.raises(DataError, match="lengths"):
            lm.per_landmark_errors(g, r[:5], cfg)


class TestCsv:
    def test_two_rows(self, tmp_path):
        pts = np.random.default_rng(0).normal(size=(2, 51, 2))
        lm.write_landmarks_csv(tmp_path / "l.csv", pts)
        sets = lm.ingest_landmarks(tmp_path / "l.csv")
        assert len(sets) == 2 and sets[0].frame_tag == lm.RAW

    def test_round_trip_lossless(self, tmp_path):
        pts = np.random.default_rng(1).normal(scale=300, size=(7, 51, 2))
        lm.write_landmarks_csv(tmp_path / "l.csv", pts, frames=np.arange(7) + 3)
        frames, back = lm.read_landmarks_csv(tmp_path / "l.csv")
        assert np.array_equal(back, pts)
        assert list(frames) == list(range(3, 10))

    def test_wrong_column_count(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("0," + ",".join(["1.0"] * 101) + "\n")
        with pytest.raises(DataError, match="expected 102"):
            lm.read_landmarks_csv(p)

    def test_non_finite_names_row(self, tmp_path):
        p = tmp_path / "bad.csv"
        good = "0," + ",".join(["1.0"] * 102)
        p.write_text(",".join(lm.CSV_HEADER) + "\n" + good + "\n" + "1,nan," + ",".join(["1.0"] * 101) + "\n")
        with pytest.raises(DataError, match="row 3"):
            lm.read_landmarks_csv(p)
