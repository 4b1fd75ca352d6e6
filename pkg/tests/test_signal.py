import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imu2face import signal as sg
from imu2face.exceptions import DataError


def uniform_stream(x, rate=30.0, t0=0.0):
    x = np.asarray(x, dtype=float)
    return sg.ImuStream(t0 + np.arange(len(x)) / rate, x)


def naive_dft_magnitudes(frame, nfft):
    n = np.arange(nfft)
    padded = np.concatenate([frame, np.zeros(nfft - len(frame))])
    out = []
    for k in range(nfft // 2 + 1):
        re = sum(padded[j] * np.cos(2 * np.pi * k * j / nfft) for j in range(nfft))
        im = -sum(padded[j] * np.sin(2 * np.pi * k * j / nfft) for j in range(nfft))
        out.append(np.hypot(re, im))
    return np.array(out)


def reflect_index(i, length):
    # numpy "reflect" (edge sample not repeated), iterated for short signals
    if length == 1:
        return 0
    period = 2 * (length - 1)
    i = i % period
    return i if i < length else period - i


def naive_stft(x, window_len=30, nfft=32):
    x = np.asarray(x, float)
    half = window_len // 2
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(window_len) / window_len)
    rows = []
    for t in range(len(x)):
        frame = np.array([x[reflect_index(t - half + j, len(x))] for j in range(window_len)])
        rows.append(naive_dft_magnitudes(frame * w, nfft))
    return np.array(rows)


class TestStream:
    def test_rejects_wrong_channel_count(self):
        with pytest.raises(DataError, match="12"):
            sg.ImuStream(np.arange(3.0), np.zeros((3, 11)))

    def test_rejects_non_increasing_time(self):
        with pytest.raises(DataError, match="increasing"):
            sg.ImuStream(np.array([0.0, 1.0, 1.0]), np.zeros((3, 12)))


class TestCalibration:
    def test_constant_stream(self):
        s = uniform_stream(np.full((150, 12), 2.5))
        np.testing.assert_array_equal(sg.compute_offset(s), 2.5)

    def test_alternating_channel(self):
        x = np.zeros((121, 12))
        x[:, 4] = np.where(np.arange(121) % 2 == 0, 1.0, -1.0)
        assert sg.compute_offset(uniform_stream(x))[4] == 0.0

    def test_random_matches_mean(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(200, 12))
        off = sg.compute_offset(uniform_stream(x))
        np.testing.assert_allclose(off, x[:120].sum(axis=0) / 120, atol=1e-12)

    def test_short_stream_reports_span(self):
        with pytest.raises(DataError, match="covers 2.000 s"):
            sg.compute_offset(uniform_stream(np.zeros((60, 12))))

    def test_zero_offset_is_identity(self):
        x = np.random.default_rng(1).normal(size=(50, 12))
        out = sg.apply_calibration(uniform_stream(x), np.zeros(12))
        np.testing.assert_array_equal(out.x, x)

    def test_drift_removed_from_gyro_only(self):
        x = np.random.default_rng(2).normal(size=(150, 12))
        x[:, list(sg.GYRO_CHANNELS)] = 0.3
        s = uniform_stream(x)
        out = sg.apply_calibration(s, sg.compute_offset(s))
        np.testing.assert_allclose(out.x[:, list(sg.GYRO_CHANNELS)], 0.0, atol=1e-15)
        accel = [0, 1, 2, 6, 7, 8]
        np.testing.assert_array_equal(out.x[:, accel], x[:, accel])

    def test_calibrated_window_has_zero_gyro_mean_and_idempotence(self):
        x = np.random.default_rng(3).normal(1.0, 2.0, size=(300, 12))
        s = uniform_stream(x)
        once = sg.apply_calibration(s, sg.compute_offset(s))
        second = sg.compute_offset(once)
        np.testing.assert_allclose(second[list(sg.GYRO_CHANNELS)], 0.0, atol=1e-12)
        twice = sg.apply_calibration(once, second)
        np.testing.assert_allclose(twice.x, once.x, atol=1e-12)


class TestResample:
    def test_aligned_uniform_stream_unchanged(self):
        x = np.random.default_rng(0).normal(size=(90, 12))
        s = uniform_stream(x)
        out = sg.synchronize_and_resample(s, 0.0)
        assert len(out) == 90
        np.testing.assert_allclose(out.x, x, atol=1e-12)

    def test_linear_ramp_is_exact(self):
        rng = np.random.default_rng(1)
        t = np.cumsum(rng.uniform(1 / 32, 1 / 28, size=200))
        x = np.tile(t[:, None], (1, 12))
        out = sg.synchronize_and_resample(sg.ImuStream(t, x), t[3] + 0.004)
        assert out.t[0] == t[3]
        np.testing.assert_allclose(out.x, np.tile(out.t[:, None], (1, 12)), atol=1e-12)
        np.testing.assert_allclose(np.diff(out.t), 1 / 30, atol=1e-12)

    def test_jittered_sinusoid_matches_dense_interpolation(self):
        rng = np.random.default_rng(2)
        t = np.cumsum(rng.uniform(1 / 32, 1 / 28, size=300))
        x = np.sin(2 * np.pi * 1.3 * t)[:, None] * np.arange(1, 13)
        out = sg.synchronize_and_resample(sg.ImuStream(t, x), t[0])
        # dense oracle: piecewise-linear curve evaluated on a 1000x finer grid
        fine = np.linspace(t[0], t[-1], 1000 * len(t))
        seg = np.searchsorted(t, fine, side="right").clip(1, len(t) - 1)
        frac = (fine - t[seg - 1]) / (t[seg] - t[seg - 1])
        curve = x[seg - 1, 0] * (1 - frac) + x[seg, 0] * frac
        for ti, vi in zip(out.t[::17], out.x[::17, 0]):
            j = np.searchsorted(fine, ti)
            lo, hi = max(j - 1, 0), min(j, len(fine) - 1)
            w = 0.0 if hi == lo else (ti - fine[lo]) / (fine[hi] - fine[lo])
            ref = curve[lo] * (1 - w) + curve[hi] * w
            assert abs(vi - ref) < 1e-9

    def test_video_start_outside_span(self):
        with pytest.raises(DataError, match="outside"):
            sg.synchronize_and_resample(uniform_stream(np.zeros((30, 12))), 5.0)


def biquad_highpass_reference(x, cutoff, rate):
    # bilinear-transform Butterworth, written out by hand
    k = np.tan(np.pi * cutoff / rate)
    norm = 1.0 / (1.0 + np.sqrt(2.0) * k + k * k)
    b = np.array([1.0, -2.0, 1.0]) * norm
    a1 = 2.0 * (k * k - 1.0) * norm
    a2 = (1.0 - np.sqrt(2.0) * k + k * k) * norm
    y = np.zeros_like(x)
    for n in range(len(x)):
        acc = b[0] * x[n]
        if n >= 1:
            acc += b[1] * x[n - 1] - a1 * y[n - 1]
        if n >= 2:
            acc += b[2] * x[n - 2] - a2 * y[n - 2]
        y[n] = acc
    return y


class TestHighpass:
    def test_zero_input(self):
        out = sg.highpass_filter(uniform_stream(np.zeros((100, 12))))
        np.testing.assert_array_equal(out.x, 0.0)

    def test_matches_hand_written_recurrence(self):
        x = np.random.default_rng(0).normal(size=(600, 12))
        out = sg.highpass_filter(uniform_stream(x), initial="zero")
        ref = biquad_highpass_reference(x[:, 5], 0.1, 30.0)
        np.testing.assert_allclose(out.x[:, 5], ref, atol=1e-9)

    def test_constant_input_decays(self):
        x = np.full((1800, 12), 3.0)
        ref = biquad_highpass_reference(x[:, 0], 0.1, 30.0)
        out = sg.highpass_filter(uniform_stream(x), initial="zero")
        assert abs(ref[-1]) < 1e-6 * 3.0
        assert np.abs(out.x[-1]).max() < 1e-6 * 3.0
        steady = sg.highpass_filter(uniform_stream(x))
        assert np.abs(steady.x).max() < 1e-9

    def test_passband_sinusoid(self):
        t = np.arange(1800) / 30.0
        x = np.tile(np.sin(2 * np.pi * 5.0 * t)[:, None], (1, 12))
        out = sg.highpass_filter(uniform_stream(x))
        # least-squares amplitude: sample peaks miss the crest at 6 samples/cycle
        tt = t[900:]
        basis = np.column_stack([np.sin(2 * np.pi * 5.0 * tt), np.cos(2 * np.pi * 5.0 * tt)])
        coef, *_ = np.linalg.lstsq(basis, out.x[900:, 0], rcond=None)
        amp = np.hypot(*coef)
        # analog Butterworth magnitude at 5 Hz with a 0.1 Hz corner
        analytic = 1.0 / np.sqrt(1.0 + (0.1 / 5.0) ** 4)
        assert abs(amp - analytic) < 0.01 * analytic
        assert abs(amp - 1.0) < 0.01

    def test_non_uniform_rejected(self):
        t = np.array([0.0, 0.03, 0.07, 0.1])
        with pytest.raises(DataError, match="uniform"):
            sg.highpass_filter(sg.ImuStream(t, np.zeros((4, 12))))


class TestStft:
    def test_zero_signal(self):
        np.testing.assert_array_equal(sg.stft_channel(np.zeros(50)), 0.0)

    def test_constant_interior_frame(self):
        c = 1.7
        spec = sg.stft_channel(np.full(80, c))
        w = sg.hann(30)
        padded = np.concatenate([c * w, np.zeros(2)])
        expect = np.abs([np.sum(padded * np.exp(-2j * np.pi * k * np.arange(32) / 32)) for k in range(17)])
        np.testing.assert_allclose(spec[40], expect, atol=1e-12)
        assert abs(spec[40, 0] - c * w.sum()) < 1e-12

    def test_frame_count_equals_length(self):
        for n in (1, 2, 7, 16, 31, 100):
            assert sg.stft_channel(np.random.default_rng(n).normal(size=n)).shape == (n, 17)

    def test_matches_naive_dft(self):
        x = np.random.default_rng(0).normal(size=45)
        np.testing.assert_allclose(sg.stft_channel(x), naive_stft(x), atol=1e-9)

    def test_parseval_on_interior_frame(self):
        x = np.random.default_rng(1).normal(size=64)
        frame = x[32 - 15: 32 + 15] * sg.hann(30)
        full = np.fft.fft(frame, n=32)
        half = sg.stft_channel(x)[32]
        np.testing.assert_allclose(half, np.abs(full[:17]), atol=1e-12)
        two_sided = np.sum(half ** 2) + np.sum(half[1:16] ** 2)
        assert abs(two_sided - 32 * np.sum(frame ** 2)) < 1e-6 * two_sided

    @given(st.integers(min_value=1, max_value=60), st.integers(min_value=0, max_value=2**31))
    @settings(max_examples=25, deadline=None)
    def test_nonnegative_and_shaped(self, n, seed):
        spec = sg.stft_channel(np.random.default_rng(seed).normal(size=n))
        assert spec.shape == (n, 17) and np.all(spec >= 0)


class TestFeaturesAndWindows:
    def test_zero_stream(self):
        feats = sg.build_frame_features(uniform_stream(np.zeros((40, 12))))
        assert feats.shape == (40, 216)
        np.testing.assert_array_equal(feats, 0.0)

    def test_compositional_layout(self):
        x = np.random.default_rng(0).normal(size=(50, 12))
        feats = sg.build_frame_features(uniform_stream(x))
        for t in (0, 17, 49):
            expect = np.concatenate([x[t]] + [sg.stft_channel(x[:, c])[t] for c in range(12)])
            np.testing.assert_array_equal(feats[t], expect)

    def test_window_counts(self):
        f = np.arange(10 * 216, dtype=float).reshape(10, 216)
        assert sg.segment_windows(f).shape == (1, 10, 216)
        f12 = np.random.default_rng(0).normal(size=(12, 216))
        w = sg.segment_windows(f12)
        assert w.shape == (3, 10, 216)
        np.testing.assert_array_equal(sg.window_last_frames(12), [9, 10, 11])
        for i, last in enumerate(sg.window_last_frames(12)):
            np.testing.assert_array_equal(w[i, -1], f12[last])

    def test_overlapping_windows_agree(self):
        f = np.random.default_rng(1).normal(size=(30, 216))
        w = sg.segment_windows(f)
        for i in range(len(w) - 1):
            assert np.array_equal(w[i, 1:], w[i + 1, :-1])

    def test_too_short(self):
        with pytest.raises(DataError, match="at least 10"):
            sg.segment_windows(np.zeros((9, 216)))

    def test_pipeline_deterministic(self):
        rng = np.random.default_rng(5)
        t = np.cumsum(rng.uniform(1 / 32, 1 / 28, size=400))
        s = sg.ImuStream(t, rng.normal(size=(400, 12)))
        a, _, _ = sg.preprocess_stream(s, video_start=t[10])
        b, _, _ = sg.preprocess_stream(s, video_start=t[10])
        assert a.shape[1] == 216
        assert np.array_equal(a, b)

    def test_featurizer_estimator_matches_function(self):
        rng = np.random.default_rng(6)
        s = uniform_stream(rng.normal(size=(200, 12)))
        est = sg.ImuFeaturizer().fit(s)
        np.testing.assert_array_equal(est.transform(s), sg.preprocess_stream(s)[0])
        assert est.get_params()["cutoff"] == 0.1


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = sg.ImuStream(np.cumsum(rng.uniform(0.03, 0.04, size=20)), rng.normal(size=(20, 12)))
    sg.write_imu_csv(tmp_path / "imu.csv", s)
    back = sg.read_imu_csv(tmp_path / "imu.csv")
    assert np.array_equal(back.t, s.t) and np.array_equal(back.x, s.x)


def test_csv_bad_row_named(tmp_path):
    p = tmp_path / "imu.csv"
    p.write_text(",".join(sg.IMU_HEADER) + "\n" + ",".join(["0"] * 13) + "\n" + ",".join(["1"] * 12) + "\n")
    with pytest.raises(DataError, match="row 3"):
        sg.read_imu_csv(p)
