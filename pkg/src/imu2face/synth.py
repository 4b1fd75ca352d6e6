"""Deterministic synthetic sessions and a ridge-regression baseline.

A hidden latent expression trajectory ``e(t)`` drives both modalities:

* landmarks: canonical neutral face + ``A e(t)``, renormalized into the
  canonical frame, then placed in the image by a per-session similarity;
* IMU: ``B [e(t); e'(t) / 2pi]`` + gravity on the accelerometers + a constant
  gyroscope drift + Gaussian noise.

Every array is a pure function of the spec (including its seed).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import landmarks as lm
from .exceptions import ConfigError, DataError
from .signal import GYRO_CHANNELS, N_CHANNELS, ImuStream

# canonical neutral face in the normalized frame (y grows downwards, as in images)
_BROW_X = np.linspace(-0.62, -0.12, 5)
_EYE = np.array([[-0.5, 0.0], [-0.42, -0.05], [-0.3, -0.05], [-0.2, 0.0], [-0.3, 0.04], [-0.42, 0.04]])
_MOUTH_OUT = np.array([
    [-0.36, 0.58], [-0.24, 0.52], [-0.1, 0.49], [0.0, 0.51], [0.1, 0.49], [0.24, 0.52],
    [0.36, 0.58], [0.24, 0.68], [0.1, 0.72], [0.0, 0.73], [-0.1, 0.72], [-0.24, 0.68],
])
_MOUTH_IN = np.array([
    [-0.28, 0.58], [-0.1, 0.56], [0.0, 0.565], [0.1, 0.56], [0.28, 0.58], [0.1, 0.61],
    [0.0, 0.615], [-0.1, 0.61],
])


def canonical_face() -> np.ndarray:
    """Neutral 51-point face already in the canonical frame (nose tip at 0, eyes one unit apart)."""
    left_brow = np.column_stack([_BROW_X, -0.5 - 0.12 * np.sin(np.linspace(0.3, 2.8, 5))])
    right_brow = left_brow[::-1] * [-1, 1]
    bridge = np.column_stack([np.zeros(4), np.linspace(-0.36, -0.12, 4)])
    bridge[-1] = [0.0, 0.0]  # the nose tip closes the bridge
    lower_nose = np.column_stack([np.linspace(-0.16, 0.16, 5), [0.14, 0.17, 0.18, 0.17, 0.14]])
    left_eye = _EYE + [0.0, -0.35]
    right_eye = left_eye[[3, 2, 1, 0, 5, 4]] * [-1, 1]
    face = np.vstack([left_brow, right_brow, bridge, lower_nose, left_eye, right_eye, _MOUTH_OUT, _MOUTH_IN])
    return face


@dataclass(frozen=True)
class GeneratorSpec:
    """Everything that determines a synthetic session.

    ``mixing`` (102 x latent_dim, x block then y block) maps the latent state
    to normalized landmark offsets. ``sensor`` (12 x 2 latent_dim) maps
    ``[e; e'/2pi]`` to the IMU channels.
    """

    seed: int
    mixing: np.ndarray
    sensor: np.ndarray
    gyro_drift: np.ndarray
    duration: float = 60.0
    rate: float = 30.0
    latent_dim: int = 4
    noise_sigma: float = 0.02
    jitter: float = 0.0
    band: tuple = (0.2, 2.0)
    n_components: int = 3
    user_tag: str = "A"

    def __post_init__(self):
        mixing = np.asarray(self.mixing, dtype=np.float64)
        sensor = np.asarray(self.sensor, dtype=np.float64)
        drift = np.asarray(self.gyro_drift, dtype=np.float64)
        if mixing.shape != (2 * lm.N_LANDMARKS, self.latent_dim):
            raise ConfigError(f"mixing must be (102, {self.latent_dim}), got {mixing.shape}")
        if sensor.shape != (N_CHANNELS, 2 * self.latent_dim):
            raise ConfigError(f"sensor map must be (12, {2 * self.latent_dim}), got {sensor.shape}")
        if drift.shape != (len(GYRO_CHANNELS),):
            raise ConfigError("gyro drift needs one value per gyroscope channel")
        for name, arr in (("mixing", mixing), ("sensor", sensor), ("gyro_drift", drift)):
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contains non-finite values")
        if self.noise_sigma < 0 or self.jitter < 0:
            raise ConfigError("noise_sigma and jitter must be nonnegative")
        if not 0 < self.band[0] < self.band[1]:
            raise ConfigError(f"invalid latent frequency band {self.band}")
        if self.duration <= 0 or self.rate <= 0:
            raise ConfigError("duration and rate must be positive")
        object.__setattr__(self, "mixing", mixing)
        object.__setattr__(self, "sensor", sensor)
        object.__setattr__(self, "gyro_drift", drift)


RIGID_POINTS = (lm.NOSE_TIP, lm.LEFT_OUTER_EYE, lm.RIGHT_OUTER_EYE)


def make_user(user_seed=0, latent_dim=4, expression_scale=0.03, rigid_scale=0.2,
              accel_scale=0.5, gyro_scale=0.3):
    """Random (mixing, sensor, gyro_drift) for one synthetic wearer.

    Rows of the mixing matrix for the nose tip and outer eye corners are
    damped by ``rigid_scale``: those points barely move with expressions,
    which keeps renormalization a mild nonlinearity.
    """
    rng = np.random.default_rng(np.random.SeedSequence([user_seed, 0x5EED]))
    mixing = rng.normal(scale=expression_scale, size=(2 * lm.N_LANDMARKS, latent_dim))
    for i in RIGID_POINTS:
        mixing[[i, i + lm.N_LANDMARKS]] *= rigid_scale
    sensor = rng.normal(size=(N_CHANNELS, 2 * latent_dim)) / np.sqrt(2 * latent_dim)
    gyro = np.zeros(N_CHANNELS, dtype=bool)
    gyro[list(GYRO_CHANNELS)] = True
    sensor[~gyro] *= accel_scale
    sensor[gyro] *= gyro_scale
    drift = rng.uniform(-0.05, 0.05, size=len(GYRO_CHANNELS))
    return mixing, sensor, drift


def default_spec(seed, user_seed=0, latent_dim=4, **kwargs) -> GeneratorSpec:
    user_keys = ("expression_scale", "rigid_scale", "accel_scale", "gyro_scale")
    user_kw = {k: kwargs.pop(k) for k in user_keys if k in kwargs}
    mixing, sensor, drift = make_user(user_seed, latent_dim, **user_kw)
    return GeneratorSpec(seed=seed, mixing=mixing, sensor=sensor, gyro_drift=drift,
                         latent_dim=latent_dim, **kwargs)


def perturb_user(spec: GeneratorSpec, scale=0.5, seed=1, user_tag="B") -> GeneratorSpec:
    """A second wearer: mixing and sensor maps perturbed by relative Gaussian noise."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB]))
    mixing = spec.mixing + scale * spec.mixing.std() * rng.normal(size=spec.mixing.shape)
    for i in RIGID_POINTS:
        mixing[[i, i + lm.N_LANDMARKS]] = spec.mixing[[i, i + lm.N_LANDMARKS]]
    sensor = spec.sensor + scale * spec.sensor.std() * rng.normal(size=spec.sensor.shape)
    return replace(spec, mixing=mixing, sensor=sensor, user_tag=user_tag)


@dataclass(frozen=True)
class SyntheticSession:
    spec: GeneratorSpec
    imu: ImuStream
    frames: np.ndarray
    landmarks_raw: np.ndarray
    landmarks_norm: np.ndarray
    latent: np.ndarray
    latent_frames: np.ndarray
    pose: tuple = field(default=())

    def session(self, session_id=None):
        """Preprocess into a training :class:`~imu2face.training.Session`."""
        from .training import assemble_session

        sid = session_id if session_id is not None else f"{self.spec.user_tag}{self.spec.seed}"
        return assemble_session(self.imu, self.landmarks_raw, session_id=sid)


def _latent(t, freqs, phases, amps):
    """e(t) and de/dt for sum-of-sinusoid latents; parameter arrays are (latent, K)."""
    arg = 2 * np.pi * freqs[None] * t[:, None, None] + phases[None]
    e = (amps[None] * np.sin(arg)).sum(axis=-1)
    de = (amps[None] * 2 * np.pi * freqs[None] * np.cos(arg)).sum(axis=-1)
    return e, de


def generate_session(spec: GeneratorSpec) -> SyntheticSession:
    ss = np.random.SeedSequence([spec.seed, 0xDA7A])
    r_latent, r_noise, r_time, r_pose, r_grav = (np.random.default_rng(s) for s in ss.spawn(5))
    L, K = spec.latent_dim, spec.n_components
    freqs = r_latent.uniform(spec.band[0], spec.band[1], size=(L, K))
    phases = r_latent.uniform(0, 2 * np.pi, size=(L, K))
    amps = r_latent.uniform(0.5, 1.0, size=(L, K)) * np.sqrt(2.0 / K)

    n = int(round(spec.duration * spec.rate))
    frame_t = np.arange(n) / spec.rate
    imu_t = frame_t.copy()
    if spec.jitter > 0:
        imu_t[1:] += r_time.uniform(-spec.jitter, spec.jitter, size=n - 1)
        imu_t = np.maximum.accumulate(imu_t)
        if np.any(np.diff(imu_t) <= 0):
            raise ConfigError("timestamp jitter too large for the sample rate")

    e, de = _latent(imu_t, freqs, phases, amps)
    x = np.hstack([e, de / (2 * np.pi)]) @ spec.sensor.T
    gravity = np.zeros(N_CHANNELS)
    for side in (0, 6):
        g = r_grav.normal(size=3)
        gravity[side:side + 3] = 9.81 * g / np.linalg.norm(g)
    x = x + gravity
    x[:, list(GYRO_CHANNELS)] += spec.gyro_drift
    if spec.noise_sigma > 0:
        x = x + r_noise.normal(scale=spec.noise_sigma, size=x.shape)
    imu = ImuStream(imu_t, x)

    e_frames, _ = _latent(frame_t, freqs, phases, amps)
    offsets = e_frames @ spec.mixing.T
    moved = canonical_face()[None] + np.stack(
        [offsets[:, :lm.N_LANDMARKS], offsets[:, lm.N_LANDMARKS:]], axis=-1
    )
    norm = lm.normalize_points(moved)[0]
    angle = r_pose.uniform(-0.15, 0.15)
    scale = r_pose.uniform(150.0, 250.0)
    shift = np.array([320.0, 240.0]) + r_pose.uniform(-30, 30, size=2)
    raw = lm.denormalize_points(norm, np.broadcast_to(shift, (n, 2)), np.full(n, angle), np.full(n, scale))
    return SyntheticSession(spec, imu, np.arange(n), raw, norm, e, e_frames, (angle, scale, tuple(shift)))


def generate_sessions(n_sessions=12, seed=0, user_seed=0, perturbation=0.0, **kwargs):
    """``n_sessions`` sessions of one wearer with per-session seeds derived from ``seed``.

    A positive ``perturbation`` turns the wearer into a perturbed variant
    (see :func:`perturb_user`) that stays the same across the sessions.
    """
    seeds = np.random.SeedSequence([seed, 0x5E55]).generate_state(n_sessions)
    specs = [default_spec(int(s), user_seed=user_seed, **kwargs) for s in seeds]
    if perturbation > 0:
        specs = [perturb_user(sp, perturbation, seed=user_seed) for sp in specs]
    return [generate_session(sp) for sp in specs]


def flatten_windows(windows):
    arr = np.asarray(windows, dtype=np.float64)
    if arr.ndim == 3:
        return arr.reshape(arr.shape[0], -1)
    if arr.ndim == 2:
        return arr
    raise DataError(f"expected (n, T, D) windows or (n, features), got {arr.shape}")


def flatten_targets(targets):
    arr = np.asarray(targets, dtype=np.float64)
    if arr.ndim == 3:
        return np.concatenate([arr[..., 0], arr[..., 1]], axis=1)
    if arr.ndim == 2:
        return arr
    raise DataError(f"expected (n, 51, 2) or (n, 102) targets, got {arr.shape}")


class LinearOracle(RegressorMixin, BaseEstimator):
    """Ridge regression from flattened windows to the 102 landmark coordinates.

    Columns are standardized with training statistics, then the normal
    equations ``(X'X + alpha n I) W = X'Y`` are solved by Cholesky.

    Parameters
    ----------
    alpha : float
        Ridge strength relative to the sample count. ``0`` solves ordinary
        least squares and raises :class:`DataError` on a singular system.
    """

    def __init__(self, alpha=1e-3):
        self.alpha = alpha

    def fit(self, X, y):
        X, Y = flatten_windows(X), flatten_targets(y)
        if X.shape[0] != Y.shape[0]:
            raise DataError(f"{X.shape[0]} windows but {Y.shape[0]} targets")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        self.x_mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.x_scale_ = np.where(std > 0, std, 1.0)
        self.y_mean_ = Y.mean(axis=0)
        Z = (X - self.x_mean_) / self.x_scale_
        gram = Z.T @ Z
        n = Z.shape[0]
        gram[np.diag_indices_from(gram)] += self.alpha * n
        eig = np.linalg.eigvalsh(gram)
        if eig[0] <= 1e-10 * max(eig[-1], 1e-300):
            raise DataError(
                "normal equations are singular; use a positive ridge term (alpha > 0)"
            )
        self.coef_ = sla.cho_solve(sla.cho_factor(gram), Z.T @ (Y - self.y_mean_))
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        Z = (flatten_windows(X) - self.x_mean_) / self.x_scale_
        flat = Z @ self.coef_ + self.y_mean_
        return np.stack([flat[:, :lm.N_LANDMARKS], flat[:, lm.N_LANDMARKS:]], axis=-1)

    def nme(self, X, y):
        return lm.nme(np.asarray(y, dtype=np.float64), self.predict(X))


def linear_oracle(train_windows, train_targets, test_windows, test_targets, alpha=1e-3):
    """Fit :class:`LinearOracle` and report its test NME (percent)."""
    reg = LinearOracle(alpha=alpha).fit(train_windows, train_targets)
    return reg, reg.nme(test_windows, test_targets)


def _face_surface(rows, cols):
    """Grid vertices over a gently curved face-like height field, plus its triangles."""
    x = np.linspace(-0.8, 0.8, cols)
    y = np.linspace(-0.9, 1.0, rows)
    gx, gy = np.meshgrid(x, y)
    z = 0.35 * (1.0 - 0.8 * gx**2 - 0.3 * (gy - 0.05) ** 2)
    z += 0.25 * np.exp(-(gx**2 + (gy + 0.05) ** 2) / 0.03)  # nose
    verts = np.column_stack([gx.ravel(), gy.ravel(), z.ravel()])
    faces = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            a = r * cols + c
            faces.append((a, a + 1, a + cols))
            faces.append((a + 1, a + cols + 1, a + cols))
    return verts, np.asarray(faces, dtype=np.int64)


def generate_rig(seed=0, n_vertices=400, dims=(10, 10), basis_scale=0.03):
    """Random blendshape rig on a face-like grid surface.

    Shape and expression columns are mutually orthogonal and orthogonal to
    the template and to the six rigid-motion fields, so the bases cannot
    mimic a camera change. Every column has RMS per-coordinate displacement
    ``basis_scale`` per unit coefficient. The landmark embedding picks, for
    each canonical face point, the nearest not-yet-used vertex.
    """
    from .face3d import BlendshapeRig

    if n_vertices < lm.N_LANDMARKS:
        raise ConfigError(f"a rig needs at least {lm.N_LANDMARKS} vertices, got {n_vertices}")
    n_beta, n_psi = dims
    rows = max(int(np.sqrt(n_vertices)), 2)
    cols = n_vertices // rows
    verts, faces = _face_surface(rows, cols)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x816]))
    extra = n_vertices - verts.shape[0]
    if extra:
        # leftover vertices sit behind the surface and belong to no triangle
        back = np.column_stack([rng.uniform(-0.5, 0.5, (extra, 2)), np.full(extra, -0.4)])
        verts = np.vstack([verts, back])
    n = verts.shape[0]
    centroid = verts.mean(axis=0)
    rel = verts - centroid
    rigid = [np.tile(np.eye(3)[i], (n, 1)) for i in range(3)]
    rigid += [np.cross(np.eye(3)[i], rel) for i in range(3)]
    fixed = np.column_stack([f.reshape(-1) for f in rigid + [verts]])
    n_fixed = fixed.shape[1]
    raw = rng.normal(size=(3 * n, n_beta + n_psi))
    q, _ = np.linalg.qr(np.column_stack([fixed, raw]))
    cols_ = q[:, n_fixed:] * basis_scale * np.sqrt(3 * n)
    basis = cols_.reshape(n, 3, n_beta + n_psi)

    canon = canonical_face()
    used, emb = set(), []
    for p in canon:
        d = np.hypot(verts[:, 0] - p[0], verts[:, 1] - p[1])
        for i in np.argsort(d, kind="stable"):
            if i not in used:
                used.add(int(i))
                emb.append(int(i))
                break
    weights = np.clip((verts[:, 1] - 0.25) / 0.3, 0.0, 1.0)
    return BlendshapeRig(
        template=verts, shape_basis=basis[..., :n_beta], expression_basis=basis[..., n_beta:],
        jaw_pivot=np.array([0.0, 0.0, -0.6]), jaw_axis=np.array([1.0, 0.0, 0.0]),
        jaw_weights=weights, landmark_embedding=np.asarray(emb, dtype=np.int64), faces=faces,
    )
