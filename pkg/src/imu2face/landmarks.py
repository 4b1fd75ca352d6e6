"""Facial landmark ingestion, canonical-frame normalization and error metrics.

Landmarks are the 51 inner-face points of the 68-point annotation scheme
(points 18-68, i.e. eyebrows, eyes, nose and mouth). In the canonical frame
the nose tip sits at the origin, the outer eye corners lie on the x axis
(left to right along +x) and are one unit apart.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DataError, GeometryError

N_LANDMARKS = 51
FIRST_SCHEME_POINT = 18  # 1-based index into the 68-point scheme
NOSE_TIP = 31 - FIRST_SCHEME_POINT  # 13
LEFT_OUTER_EYE = 37 - FIRST_SCHEME_POINT  # 19
RIGHT_OUTER_EYE = 46 - FIRST_SCHEME_POINT  # 28

RAW = "raw"
NORMALIZED = "normalized"
CSV_HEADER = ["frame"] + [f"x{i}" for i in range(N_LANDMARKS)] + [f"y{i}" for i in range(N_LANDMARKS)]


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray
    frame_tag: str = RAW

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise DataError(f"a landmark set has {N_LANDMARKS} (x, y) points, got shape {pts.shape}")
        if self.frame_tag not in (RAW, NORMALIZED):
            raise DataError(f"unknown frame tag {self.frame_tag!r}")
        object.__setattr__(self, "points", pts)

    @property
    def nose_tip(self):
        return self.points[NOSE_TIP]

    @property
    def left_outer_eye(self):
        return self.points[LEFT_OUTER_EYE]

    @property
    def right_outer_eye(self):
        return self.points[RIGHT_OUTER_EYE]


@dataclass(frozen=True)
class NormalizationRecord:
    nose: np.ndarray
    theta: float
    d: float

    def __post_init__(self):
        if not self.d > 0:
            raise GeometryError(f"normalization scale must be positive, got {self.d}")


@dataclass(frozen=True)
class MetricConfig:
    d_real: float = 100.0
    d_norm: float = 1.0

    def __post_init__(self):
        if not self.d_real > 0:
            raise DataError(f"d_real must be a positive distance in millimeters, got {self.d_real}")


def _rotate(points, angle):
    c, s = np.cos(angle), np.sin(angle)
    x, y = points[..., 0], points[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def normalize_points(points):
    """Vectorized normalization of (..., 51, 2) raw points.

    Returns ``(normalized, nose, theta, d)`` with ``nose`` (..., 2) and
    ``theta``/``d`` of shape (...).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-2:] != (N_LANDMARKS, 2):
        raise DataError(f"expected (..., {N_LANDMARKS}, 2) landmarks, got {pts.shape}")
    nose = pts[..., NOSE_TIP, :]
    shifted = pts - nose[..., None, :]
    eye = pts[..., RIGHT_OUTER_EYE, :] - pts[..., LEFT_OUTER_EYE, :]
    d = np.hypot(eye[..., 0], eye[..., 1])
    if np.any(d == 0) or not np.all(np.isfinite(d)):
        raise GeometryError("outer eye corners coincide; the canonical frame is undefined")
    theta = np.arctan2(eye[..., 1], eye[..., 0])
    # rotate by -theta so the eye-corner vector lands on +x
    rotated = _rotate(shifted, -theta[..., None])
    return rotated / d[..., None, None], nose, theta, d


def denormalize_points(normalized, nose, theta, d):
    pts = np.asarray(normalized, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    return _rotate(pts * d[..., None, None], theta[..., None]) + np.asarray(nose)[..., None, :]


def normalize(landmarks: LandmarkSet):
    """Map a raw set into the canonical frame; returns ``(normalized_set, record)``."""
    if landmarks.frame_tag != RAW:
        raise DataError("normalize expects a raw landmark set")
    out, nose, theta, d = normalize_points(landmarks.points)
    return LandmarkSet(out, NORMALIZED), NormalizationRecord(nose.copy(), float(theta), float(d))


def denormalize(landmarks: LandmarkSet, record: NormalizationRecord) -> LandmarkSet:
    if landmarks.frame_tag != NORMALIZED:
        raise DataError("denormalize expects a normalized landmark set")
    return LandmarkSet(denormalize_points(landmarks.points, record.nose, record.theta, record.d), RAW)


def _normalized_array(x):
    if isinstance(x, LandmarkSet):
        if x.frame_tag != NORMALIZED:
            raise DataError("metrics are defined on normalized landmarks only")
        return x.points
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-2:] != (N_LANDMARKS, 2):
        raise DataError(f"expected (..., {N_LANDMARKS}, 2) landmarks, got {arr.shape}")
    return arr


def point_errors(g, r):
    """Euclidean distance per landmark, in normalized units."""
    g, r = _normalized_array(g), _normalized_array(r)
    if g.shape != r.shape:
        raise DataError(f"landmark shapes differ: {g.shape} vs {r.shape}")
    diff = g - r
    return np.sqrt((diff * diff).sum(axis=-1))


def mae(g, r, cfg: MetricConfig = MetricConfig()) -> float:
    """Mean landmark distance in millimeters (mean over landmarks and frames)."""
    return float(point_errors(g, r).mean() * cfg.d_real / cfg.d_norm)


def nme(g, r, d_norm=1.0) -> float:
    """Mean landmark distance relative to the eye-corner distance, in percent."""
    return float(point_errors(g, r).mean() / d_norm * 100.0)


def per_landmark_errors(g_seq, r_seq, cfg: MetricConfig = MetricConfig()):
    """Per-landmark mean error (51,) in mm and the sorted per-frame MAE values (for a CDF)."""
    g, r = _normalized_array(g_seq), _normalized_array(r_seq)
    if g.ndim != 3 or r.ndim != 3:
        raise DataError("per_landmark_errors expects sequences of shape (n, 51, 2)")
    if g.shape[0] != r.shape[0]:
        raise DataError(f"sequence lengths differ: {g.shape[0]} vs {r.shape[0]}")
    err = point_errors(g, r) * (cfg.d_real / cfg.d_norm)
    return err.mean(axis=0), np.sort(err.mean(axis=1))


class LandmarkNormalizer(TransformerMixin, BaseEstimator):
    """Stateless transformer from raw (n, 51, 2) or (n, 102) landmarks to the canonical frame.

    Flat input is read as 51 x values followed by 51 y values, the CSV column
    order. The output keeps the input layout.
    """

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        arr, flat = _as_points(X)
        out = normalize_points(arr)[0]
        return _restore(out, flat)

    def records(self, X):
        arr, _ = _as_points(X)
        _, nose, theta, d = normalize_points(arr)
        return nose, theta, d

    def inverse_transform(self, X, records):
        arr, flat = _as_points(X)
        return _restore(denormalize_points(arr, *records), flat)


def _as_points(X):
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 2 * N_LANDMARKS:
        return np.stack([arr[:, :N_LANDMARKS], arr[:, N_LANDMARKS:]], axis=-1), True
    if arr.ndim == 3 and arr.shape[1:] == (N_LANDMARKS, 2):
        return arr, False
    raise DataError(f"expected (n, 102) or (n, 51, 2) landmarks, got {arr.shape}")


def _restore(points, flat):
    if flat:
        return np.concatenate([points[..., 0], points[..., 1]], axis=-1)
    return points


def read_landmarks_csv(path):
    """Read ``frame, x0..x50, y0..y50`` rows; returns ``(frames, points (n, 51, 2))``."""
    expected = 1 + 2 * N_LANDMARKS
    frames, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row:
                continue
            if lineno == 1 and row[0].strip() == "frame":
                if len(row) != expected:
                    raise DataError(
                        f"{path}: header has {len(row) - 1} coordinate columns, expected {2 * N_LANDMARKS}"
                    )
                continue
            if len(row) != expected:
                raise DataError(
                    f"{path}: row {lineno} has {len(row) - 1} coordinate columns, expected {2 * N_LANDMARKS}"
                )
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise DataError(f"{path}: row {lineno} contains non-finite values")
            frames.append(int(vals[0]))
            rows.append(vals[1:])
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 2 * N_LANDMARKS)
    points = np.stack([arr[:, :N_LANDMARKS], arr[:, N_LANDMARKS:]], axis=-1)
    return np.asarray(frames, dtype=np.int64), points


def ingest_landmarks(path) -> list:
    """One raw :class:`LandmarkSet` per CSV row."""
    _, points = read_landmarks_csv(path)
    return [LandmarkSet(p, RAW) for p in points]


def write_landmarks_csv(path, points, frames=None):
    points = np.asarray(points, dtype=np.float64)
    if frames is None:
        frames = np.arange(points.shape[0])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for f, p in zip(frames, points):
            vals = [repr(float(v)) for v in np.concatenate([p[:, 0], p[:, 1]])]
            fh.write(str(int(f)) + "," + ",".join(vals) + "\n")


def write_per_landmark_csv(path, per_landmark_mm):
    with open(path, "w", newline="") as fh:
        fh.write("landmark_id,mean_mae_mm\n")
        for i, v in enumerate(per_landmark_mm):
            fh.write(f"{i},{float(v)!r}\n")


def write_cdf_csv(path, sorted_mae_mm):
    n = len(sorted_mae_mm)
    with open(path, "w", newline="") as fh:
        fh.write("rank,mae_mm,cdf\n")
        for i, v in enumerate(sorted_mae_mm):
            fh.write(f"{i},{float(v)!r},{(i + 1) / n!r}\n")
