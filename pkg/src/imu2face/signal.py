"""IMU preprocessing: calibration, resampling, high-pass filtering, STFT features, windows.

A stream carries 12 channels per sample, in this order::

    lax lay laz lgx lgy lgz rax ray raz rgx rgy rgz

(left/right earbud, accelerometer in m/s^2, gyroscope in rad/s).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DataError

CHANNELS = ("lax", "lay", "laz", "lgx", "lgy", "lgz", "rax", "ray", "raz", "rgx", "rgy", "rgz")
GYRO_CHANNELS = (3, 4, 5, 9, 10, 11)
N_CHANNELS = 12
N_BINS = 17
FEATURE_DIM = N_CHANNELS + N_CHANNELS * N_BINS  # 216
IMU_HEADER = ("t",) + CHANNELS


@dataclass(frozen=True)
class ImuStream:
    """Timestamped samples: ``t`` (n,) seconds and ``x`` (n, 12)."""

    t: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        if t.ndim != 1 or x.ndim != 2 or x.shape[0] != t.shape[0]:
            raise DataError(f"stream needs t (n,) and x (n, 12); got {t.shape} and {x.shape}")
        if x.shape[1] != N_CHANNELS:
            raise DataError(f"stream needs exactly {N_CHANNELS} channels, got {x.shape[1]}")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise DataError("stream timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)

    def __len__(self):
        return self.t.shape[0]

    @property
    def span(self) -> float:
        """Covered duration, counting one median sample period for the last sample."""
        if len(self) < 2:
            return 0.0
        return float(self.t[-1] - self.t[0] + np.median(np.diff(self.t)))


def compute_offset(stream: ImuStream, duration=4.0) -> np.ndarray:
    """Per-channel mean over the first ``duration`` seconds of the stream."""
    if len(stream) < 2 or stream.span < duration - 1e-9:
        raise DataError(
            f"calibration needs {duration:g} s of data; stream covers {stream.span:.3f} s"
        )
    mask = stream.t < stream.t[0] + duration - 1e-9
    return stream.x[mask].mean(axis=0)


def apply_calibration(stream: ImuStream, offset) -> ImuStream:
    """Subtract ``offset`` from the gyroscope channels; accelerometers pass through."""
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != (N_CHANNELS,) or not np.all(np.isfinite(offset)):
        raise DataError("calibration offset must be 12 finite values")
    x = stream.x.copy()
    gyro = list(GYRO_CHANNELS)
    x[:, gyro] -= offset[gyro]
    return ImuStream(stream.t, x)


def synchronize_and_resample(stream: ImuStream, video_start, rate=30.0) -> ImuStream:
    """Resample onto a uniform grid that starts at the sample closest to ``video_start``.

    Values between samples are linearly interpolated; the grid stops at the
    last sample time.
    """
    if rate <= 0:
        raise DataError(f"resampling rate must be positive, got {rate}")
    if not stream.t[0] <= video_start <= stream.t[-1]:
        raise DataError(
            f"video start {video_start} lies outside the IMU span "
            f"[{stream.t[0]}, {stream.t[-1]}]"
        )
    start = stream.t[np.argmin(np.abs(stream.t - video_start))]
    n = int(np.floor((stream.t[-1] - start) * rate + 1e-9)) + 1
    grid = start + np.arange(n) / rate
    x = np.column_stack([np.interp(grid, stream.t, stream.x[:, c]) for c in range(N_CHANNELS)])
    return ImuStream(grid, x)


def _sample_rate(stream: ImuStream) -> float:
    if len(stream) < 2:
        raise DataError("filtering needs at least 2 samples")
    dt = np.diff(stream.t)
    step = dt.mean()
    if np.max(np.abs(dt - step)) > 1e-6 * step:
        raise DataError("high-pass filter needs a uniformly sampled stream; resample first")
    return 1.0 / step


def butter_highpass(cutoff, rate, order=2):
    return sps.butter(order, cutoff, btype="highpass", fs=rate, output="sos")


def highpass_filter(stream: ImuStream, cutoff=0.1, order=2, initial="steady") -> ImuStream:
    """Causal Butterworth high-pass per channel.

    With ``initial="steady"`` the filter state starts at the steady state for
    the first sample, so a stream that begins at a constant level (gravity on
    the accelerometers) does not ring for the first several seconds.
    ``initial="zero"`` starts from rest.
    """
    rate = _sample_rate(stream)
    sos = butter_highpass(cutoff, rate, order)
    if initial == "steady":
        zi = sps.sosfilt_zi(sos)[:, :, None] * stream.x[0][None, None, :]
    elif initial == "zero":
        zi = np.zeros((sos.shape[0], 2, N_CHANNELS))
    else:
        raise DataError(f"unknown filter initial state {initial!r}")
    y, _ = sps.sosfilt(sos, stream.x, axis=0, zi=zi)
    return ImuStream(stream.t, y)


def hann(n) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_channel(x, window_len=30, hop=1, nfft=32) -> np.ndarray:
    """Centered magnitude STFT of one channel, shape (ceil(L / hop), nfft // 2 + 1).

    Frame ``t`` covers samples ``t - window_len//2 .. t + window_len//2 - 1``
    (reflect-padded at the edges), is Hann-weighted, zero-padded to ``nfft``
    and transformed with a one-sided DFT.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise DataError("stft_channel needs a non-empty 1-D signal")
    if nfft < window_len:
        raise DataError(f"nfft ({nfft}) must be at least the window length ({window_len})")
    half = window_len // 2
    padded = np.pad(x, (half, window_len - half), mode="reflect")
    frames = sliding_window_view(padded, window_len)[: x.size : hop]
    return np.abs(np.fft.rfft(frames * hann(window_len), n=nfft, axis=-1))


def build_frame_features(stream: ImuStream, window_len=30, nfft=32) -> np.ndarray:
    """Per-frame features (T, 216): 12 raw channel values then 12 x 17 spectrogram bins.

    The frequency block is channel-major: columns ``12 + 17*c + k`` hold bin
    ``k`` of channel ``c``.
    """
    x = stream.x
    spec = [stft_channel(x[:, c], window_len=window_len, hop=1, nfft=nfft) for c in range(N_CHANNELS)]
    return np.concatenate([x] + spec, axis=1)


def segment_windows(features, window=10, stride=1) -> np.ndarray:
    """Sliding windows (n, window, D); window ``i`` covers frames ``i*stride .. i*stride+window-1``."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise DataError(f"features must be (T, D), got shape {features.shape}")
    if features.shape[0] < window:
        raise DataError(f"need at least {window} frames to form a window, got {features.shape[0]}")
    return sliding_window_view(features, window, axis=0)[::stride].transpose(0, 2, 1)


def window_last_frames(n_frames, window=10, stride=1) -> np.ndarray:
    """Index of the last frame of each window; its landmarks are the window's target."""
    return np.arange(window - 1, n_frames, stride)


def preprocess_stream(stream: ImuStream, video_start=None, calibration_seconds=4.0,
                      rate=30.0, cutoff=0.1, window_len=30, nfft=32):
    """Run calibration, synchronization, filtering and featurization.

    Returns ``(features, uniform_stream, offset)``.
    """
    offset = compute_offset(stream, calibration_seconds)
    calibrated = apply_calibration(stream, offset)
    start = calibrated.t[0] if video_start is None else video_start
    uniform = synchronize_and_resample(calibrated, start, rate)
    filtered = highpass_filter(uniform, cutoff)
    return build_frame_features(filtered, window_len, nfft), filtered, offset


class ImuFeaturizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`preprocess_stream`.

    ``fit`` learns the gyroscope calibration offset from the opening seconds
    of a stream; ``transform`` applies it and returns (T, 216) frame features.
    """

    def __init__(self, calibration_seconds=4.0, rate=30.0, cutoff=0.1, window_len=30,
                 nfft=32, video_start=None):
        self.calibration_seconds = calibration_seconds
        self.rate = rate
        self.cutoff = cutoff
        self.window_len = window_len
        self.nfft = nfft
        self.video_start = video_start

    def fit(self, stream, y=None):
        stream = _as_stream(stream)
        self.offset_ = compute_offset(stream, self.calibration_seconds)
        return self

    def transform(self, stream):
        check_is_fitted(self, "offset_")
        stream = apply_calibration(_as_stream(stream), self.offset_)
        start = stream.t[0] if self.video_start is None else self.video_start
        uniform = synchronize_and_resample(stream, start, self.rate)
        filtered = highpass_filter(uniform, self.cutoff)
        return build_frame_features(filtered, self.window_len, self.nfft)


def _as_stream(obj) -> ImuStream:
    if isinstance(obj, ImuStream):
        return obj
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != N_CHANNELS + 1:
        raise DataError("expected an ImuStream or an (n, 13) array of [t, 12 channels]")
    return ImuStream(arr[:, 0], arr[:, 1:])


def read_imu_csv(path) -> ImuStream:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != IMU_HEADER:
            raise DataError(f"{path}: expected header {','.join(IMU_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(IMU_HEADER):
                raise DataError(f"{path}: row {lineno} has {len(row)} columns, expected {len(IMU_HEADER)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise DataError(f"{path}: row {lineno} contains non-finite values")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no samples")
    arr = np.asarray(rows)
    try:
        return ImuStream(arr[:, 0], arr[:, 1:])
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_imu_csv(path, stream: ImuStream):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(IMU_HEADER) + "\n")
        for t, row in zip(stream.t, stream.x):
            fh.write(",".join(repr(float(v)) for v in (t, *row)) + "\n")
