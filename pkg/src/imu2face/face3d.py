"""Linear blendshape head model and two-stage fitting to 2D landmarks.

Vertices are ``template + S beta + E psi`` followed by a jaw rotation about
a fixed pivot and axis, blended per vertex by a skinning weight. The camera
is weak-perspective, ``p = s R[:2] v + t``. Fitting first solves the camera
in closed form and then refines shape, expression, jaw and camera jointly by
gradient descent on the squared 2D landmark error.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import container
from . import landmarks as lm
from . import numerics as nx
from .exceptions import DataError, GeometryError, NumericalError

RIG_KIND = "imu2face.rig"


@dataclass(frozen=True)
class BlendshapeRig:
    template: np.ndarray
    shape_basis: np.ndarray
    expression_basis: np.ndarray
    jaw_pivot: np.ndarray
    jaw_axis: np.ndarray
    jaw_weights: np.ndarray
    landmark_embedding: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        t = np.asarray(self.template, dtype=np.float64)
        n = t.shape[0]
        if t.ndim != 2 or t.shape[1] != 3:
            raise DataError(f"template must be (N, 3), got {t.shape}")
        sb = np.asarray(self.shape_basis, dtype=np.float64)
        eb = np.asarray(self.expression_basis, dtype=np.float64)
        for name, b in (("shape_basis", sb), ("expression_basis", eb)):
            if b.ndim != 3 or b.shape[:2] != (n, 3):
                raise DataError(f"{name} must be ({n}, 3, k), got {b.shape}")
        axis = np.asarray(self.jaw_axis, dtype=np.float64)
        if axis.shape != (3,) or not np.isclose(np.linalg.norm(axis), 1.0, atol=1e-9):
            raise DataError("jaw_axis must be a unit 3-vector")
        pivot = np.asarray(self.jaw_pivot, dtype=np.float64)
        if pivot.shape != (3,):
            raise DataError("jaw_pivot must be a 3-vector")
        w = np.asarray(self.jaw_weights, dtype=np.float64)
        if w.shape != (n,) or np.any(w < 0) or np.any(w > 1):
            raise DataError("jaw_weights must hold one value in [0, 1] per vertex")
        emb = np.asarray(self.landmark_embedding)
        if emb.shape != (lm.N_LANDMARKS,) or not np.issubdtype(emb.dtype, np.integer):
            raise DataError(f"landmark_embedding must be {lm.N_LANDMARKS} integer vertex indices")
        if emb.min() < 0 or emb.max() >= n:
            raise DataError(f"landmark index out of range for a rig with {n} vertices")
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= n):
            raise DataError("face record references a missing vertex")
        for name, arr in (("template", t), ("shape_basis", sb), ("expression_basis", eb), ("jaw_pivot", pivot)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        for name, arr in (("template", t), ("shape_basis", sb), ("expression_basis", eb),
                          ("jaw_pivot", pivot), ("jaw_axis", axis), ("jaw_weights", w),
                          ("landmark_embedding", emb.astype(np.int64)), ("faces", faces)):
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self):
        return self.template.shape[0]

    @property
    def n_shape(self):
        return self.shape_basis.shape[2]

    @property
    def n_expression(self):
        return self.expression_basis.shape[2]

    def landmark_rig(self) -> "BlendshapeRig":
        """The same rig restricted to its 51 landmark vertices."""
        e = self.landmark_embedding
        return BlendshapeRig(self.template[e], self.shape_basis[e], self.expression_basis[e],
                             self.jaw_pivot, self.jaw_axis, self.jaw_weights[e],
                             np.arange(lm.N_LANDMARKS))


@dataclass(frozen=True)
class FaceParams:
    beta: np.ndarray
    psi: np.ndarray
    theta_jaw: float = 0.0

    def __post_init__(self):
        for name in ("beta", "psi"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                raise DataError(f"{name} must be a finite vector")
            object.__setattr__(self, name, arr)
        if not math.isfinite(self.theta_jaw):
            raise DataError("theta_jaw must be finite")
        object.__setattr__(self, "theta_jaw", float(self.theta_jaw))

    @classmethod
    def neutral(cls, rig):
        return cls(np.zeros(rig.n_shape), np.zeros(rig.n_expression), 0.0)


@dataclass(frozen=True)
class CameraParams:
    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (2,):
            raise GeometryError("camera needs a 3x3 rotation and a 2D translation")
        if not self.s > 0:
            raise GeometryError(f"camera scale must be positive, got {self.s}")
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or np.linalg.det(R) <= 0:
            raise GeometryError("camera rotation must be orthonormal with det +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "s", float(self.s))

    @classmethod
    def identity(cls):
        return cls(1.0, np.eye(3), np.zeros(2))


def _rodrigues(axis, theta):
    k = np.asarray(axis)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * K + (1 - math.cos(theta)) * (K @ K)


def evaluate_rig(rig: BlendshapeRig, params: FaceParams) -> np.ndarray:
    """Vertices (N, 3) for one parameter set."""
    if params.beta.shape != (rig.n_shape,) or params.psi.shape != (rig.n_expression,):
        raise DataError(
            f"rig expects |beta|={rig.n_shape}, |psi|={rig.n_expression}; "
            f"got {params.beta.shape[0]} and {params.psi.shape[0]}"
        )
    v = rig.template + rig.shape_basis @ params.beta + rig.expression_basis @ params.psi
    if params.theta_jaw == 0.0:
        return v
    rotated = (v - rig.jaw_pivot) @ _rodrigues(rig.jaw_axis, params.theta_jaw).T + rig.jaw_pivot
    w = rig.jaw_weights[:, None]
    return (1.0 - w) * v + w * rotated


def project(vertices, camera: CameraParams) -> np.ndarray:
    """Weak-perspective projection ``s R[:2] v + t`` of (..., 3) points."""
    v = np.asarray(vertices, dtype=np.float64)
    return camera.s * v @ camera.R[:2].T + camera.t


def landmarks_3d(rig, params):
    return evaluate_rig(rig, params)[rig.landmark_embedding]


def projection_residual(l3d, l2d, camera) -> float:
    """Sum of squared 2D distances between projected 3D points and targets."""
    d = project(l3d, camera) - np.asarray(l2d)
    return float((d * d).sum())


def fit_camera(landmarks3d, landmarks2d) -> CameraParams:
    """Closed-form scaled-orthographic camera from 3D-2D correspondences.

    The unconstrained affine map is solved by least squares and its 2x3
    linear part ``M`` is projected onto the nearest scaled pair of
    orthonormal rows through the SVD ``M = U S V^T``: ``R[:2] = U V^T`` and
    ``s`` the mean singular value. For correspondences produced by a
    weak-perspective camera the affine solution is exact, so the camera is
    recovered to round-off. The third rotation row is ``r1 x r2``.
    """
    X = np.asarray(landmarks3d, dtype=np.float64)
    P = np.asarray(landmarks2d, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3 or P.shape != (X.shape[0], 2):
        raise DataError(f"need (n, 3) and (n, 2) correspondences, got {X.shape} and {P.shape}")
    if X.shape[0] < 4:
        raise GeometryError("camera fit needs at least 4 correspondences")
    xm, pm = X.mean(axis=0), P.mean(axis=0)
    Xc, Pc = X - xm, P - pm
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise GeometryError("3D landmarks are collinear; the camera is undetermined")
    Mt, *_ = np.linalg.lstsq(Xc, Pc, rcond=None)
    M = Mt.T
    U, S, Vt = np.linalg.svd(M, full_matrices=False)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise GeometryError("2D landmarks are collinear; the camera is undetermined")
    rows = U @ Vt
    s = float(S.mean())
    R = np.vstack([rows, np.cross(rows[0], rows[1])])
    # re-orthonormalize to round-off (rows of U V^T are orthonormal up to ~1e-16)
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    t = pm - s * xm @ R[:2].T
    return CameraParams(s, R, t)


def smooth_landmarks(sequence, window=3):
    """Centered moving average over frames; the window shrinks at the ends."""
    seq = np.asarray(sequence, dtype=np.float64)
    if window <= 1:
        return seq.copy()
    half = window // 2
    csum = np.concatenate([np.zeros((1,) + seq.shape[1:]), np.cumsum(seq, axis=0)])
    idx = np.arange(seq.shape[0])
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, seq.shape[0])
    return (csum[hi] - csum[lo]) / (hi - lo)[:, None, None]


# ----------------------------------------------------------------- stage two


def _quat_to_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _matrix_to_quat(R):
    # Shepperd's method: pick the largest diagonal combination for stability
    tr = np.trace(R)
    cands = [tr, R[0, 0], R[1, 1], R[2, 2]]
    k = int(np.argmax(cands))
    if k == 0:
        w = math.sqrt(1 + tr) / 2
        q = [w, (R[2, 1] - R[1, 2]) / (4 * w), (R[0, 2] - R[2, 0]) / (4 * w), (R[1, 0] - R[0, 1]) / (4 * w)]
    elif k == 1:
        x = math.sqrt(1 + 2 * R[0, 0] - tr) / 2
        q = [(R[2, 1] - R[1, 2]) / (4 * x), x, (R[0, 1] + R[1, 0]) / (4 * x), (R[0, 2] + R[2, 0]) / (4 * x)]
    elif k == 2:
        y = math.sqrt(1 + 2 * R[1, 1] - tr) / 2
        q = [(R[0, 2] - R[2, 0]) / (4 * y), (R[0, 1] + R[1, 0]) / (4 * y), y, (R[1, 2] + R[2, 1]) / (4 * y)]
    else:
        z = math.sqrt(1 + 2 * R[2, 2] - tr) / 2
        q = [(R[1, 0] - R[0, 1]) / (4 * z), (R[0, 2] + R[2, 0]) / (4 * z), (R[1, 2] + R[2, 1]) / (4 * z), z]
    return np.asarray(q)


def _rows_from_quat(q):
    """First two rotation rows (2, 3) from an unnormalized quaternion Tensor."""
    qn = q / nx.norm(q, axis=0)
    w, x, y, z = (qn[i] for i in range(4))
    r1 = [1.0 - (y * y + z * z) * 2.0, (x * y - z * w) * 2.0, (x * z + y * w) * 2.0]
    r2 = [(x * y + z * w) * 2.0, 1.0 - (x * x + z * z) * 2.0, (y * z - x * w) * 2.0]
    return nx.reshape(nx.concat([nx.reshape(e, (1,)) for e in r1 + r2]), (2, 3))


def _landmarks_tensor(lrig, beta, psi, theta):
    """Landmark vertices (F, 51, 3) for shared beta, per-frame psi (F, k) and theta (F,)."""
    base = lrig.template + nx.matmul(nx.Tensor(lrig.shape_basis), beta)  # (51, 3)
    expr = nx.matmul(psi, nx.Tensor(lrig.expression_basis.transpose(2, 0, 1).reshape(lrig.n_expression, -1)))
    v = nx.reshape(expr, (-1, lm.N_LANDMARKS, 3)) + base  # (F, 51, 3)
    k = lrig.jaw_axis
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    u = v - lrig.jaw_pivot
    c = nx.reshape(nx.cos(theta), (-1, 1, 1))
    s = nx.reshape(nx.sin(theta), (-1, 1, 1))
    ku = nx.matmul(u, nx.Tensor(K.T))
    kku = nx.matmul(u, nx.Tensor((K @ K).T))
    # Rodrigues: R u = u + sin(theta) K u + (1 - cos(theta)) K^2 u
    rotated = u + ku * s + kku * (1.0 - c)
    w = lrig.jaw_weights[None, :, None]
    return v + (rotated - u) * w


@dataclass
class FitResult:
    params: list
    camera: CameraParams
    objective: list
    residual_rms: float
    iterations: int
    status: str


class _Problem:
    def __init__(self, rig, targets, reg_beta, reg_psi, fit_camera_flag):
        self.lrig = rig.landmark_rig()
        self.targets = targets
        self.F = targets.shape[0]
        self.nb, self.npsi = rig.n_shape, rig.n_expression
        self.reg_beta, self.reg_psi = reg_beta, reg_psi
        self.fit_camera = fit_camera_flag
        self.sizes = [("beta", (self.nb,)), ("psi", (self.F, self.npsi)), ("theta", (self.F,)),
                      ("log_s", (1,)), ("quat", (4,)), ("t", (2,))]

    def pack(self, parts):
        return np.concatenate([np.asarray(parts[k], dtype=np.float64).reshape(-1) for k, _ in self.sizes])

    def unpack(self, x):
        out, i = {}, 0
        for k, shape in self.sizes:
            n = int(np.prod(shape))
            out[k] = x[i:i + n].reshape(shape)
            i += n
        return out

    def objective(self, x, grad=True):
        parts = {k: nx.Tensor(v.copy()) for k, v in self.unpack(x).items()}
        frozen = () if self.fit_camera else ("log_s", "quat", "t")
        for k, t in parts.items():
            t.requires_grad = grad and k not in frozen
        with nx.Tape() as tape:
            v = _landmarks_tensor(self.lrig, parts["beta"], parts["psi"], parts["theta"])
            rows = _rows_from_quat(parts["quat"])
            proj = nx.matmul(v, nx.transpose(rows)) * nx.exp(parts["log_s"]) + parts["t"]
            diff = proj - self.targets
            data = nx.sum(diff * diff)
            loss = data + nx.sum(parts["beta"] * parts["beta"]) * self.reg_beta \
                + nx.sum(parts["psi"] * parts["psi"]) * self.reg_psi
        value = float(loss.data)
        if not grad:
            return value, float(data.data)
        grads = tape.backward(loss)
        g = self.pack({k: grads.get(t, np.zeros(t.shape)) for k, t in parts.items()})
        return value, float(data.data), g


def fit_parameters(rig: BlendshapeRig, landmarks2d, init_camera: CameraParams | None = None,
                   reg_beta=1e-4, reg_psi=1e-4, max_iter=2000, tol=1e-8, abs_tol=1e-24,
                   refine_camera=True, smooth_window=0) -> FitResult:
    """Fit shared beta, per-frame psi and jaw angle (and refine the camera) to 2D landmarks.

    Minimizes ``sum ||project(evaluate_rig) - p||^2 + reg_beta |beta|^2 +
    reg_psi sum |psi|^2`` by gradient descent. Trial steps come from the
    Barzilai-Borwein rule and are halved until the Armijo sufficient-decrease
    condition holds, so every accepted step lowers the objective. Iteration
    stops when the relative decrease falls below ``tol``, the objective falls
    below ``abs_tol``, or after ``max_iter`` steps (status ``"max_iter"``, with
    a warning and the best point so far).
    """
    P = np.asarray(landmarks2d, dtype=np.float64)
    if P.ndim == 2:
        P = P[None]
    if P.ndim != 3 or P.shape[1:] != (lm.N_LANDMARKS, 2):
        raise DataError(f"expected (F, 51, 2) landmarks, got {P.shape}")
    if smooth_window > 1:
        P = smooth_landmarks(P, smooth_window)
    if init_camera is None:
        init_camera = fit_camera(rig.template[rig.landmark_embedding], P.mean(axis=0))
    prob = _Problem(rig, P, reg_beta, reg_psi, refine_camera)
    x = prob.pack({
        "beta": np.zeros(rig.n_shape), "psi": np.zeros((prob.F, rig.n_expression)),
        "theta": np.zeros(prob.F), "log_s": [math.log(init_camera.s)],
        "quat": _matrix_to_quat(init_camera.R), "t": init_camera.t,
    })
    f, data, g = prob.objective(x)
    trace = [f]
    status = "max_iter"
    step = 1.0 / max(np.linalg.norm(g), 1e-12)
    it = 0
    for it in range(1, max_iter + 1):
        gg = float(g @ g)
        if gg == 0.0 or f <= abs_tol:
            status = "converged"
            break
        alpha = step
        for _ in range(60):
            x_new = x - alpha * g
            f_new = prob.objective(x_new, grad=False)[0]
            if f_new <= f - 1e-4 * alpha * gg:
                break
            alpha *= 0.5
        else:
            status = "stalled"
            break
        f_new, data, g_new = prob.objective(x_new)
        s_vec, y_vec = x_new - x, g_new - g
        sy = float(s_vec @ y_vec)
        step = float(s_vec @ s_vec) / sy if sy > 0 else alpha * 2.0
        step = min(max(step, 1e-12), 1e12)
        rel = (f - f_new) / max(abs(f), 1e-300)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if rel < tol or f <= abs_tol:
            status = "converged"
            break
    if not np.all(np.isfinite(x)):
        raise NumericalError("face fitting diverged")
    if status == "max_iter":
        warnings.warn(f"face fit stopped after {max_iter} iterations without converging", RuntimeWarning)
    parts = prob.unpack(x)
    R = _quat_to_matrix(parts["quat"])
    camera = CameraParams(math.exp(parts["log_s"][0]), R, parts["t"].copy())
    params = [FaceParams(parts["beta"].copy(), parts["psi"][i].copy(), float(parts["theta"][i]))
              for i in range(prob.F)]
    _, data = prob.objective(x, grad=False)
    rms = math.sqrt(data / P.size)
    return FitResult(params, camera, trace, rms, it, status)


class FaceFitter(BaseEstimator):
    """Estimator wrapper: ``fit`` runs both stages on a (F, 51, 2) landmark sequence."""

    def __init__(self, rig=None, reg_beta=1e-4, reg_psi=1e-4, max_iter=2000, tol=1e-8,
                 smooth_window=0):
        self.rig = rig
        self.reg_beta = reg_beta
        self.reg_psi = reg_psi
        self.max_iter = max_iter
        self.tol = tol
        self.smooth_window = smooth_window

    def fit(self, X, y=None):
        if self.rig is None:
            raise DataError("FaceFitter needs a rig")
        self.result_ = fit_parameters(self.rig, X, reg_beta=self.reg_beta, reg_psi=self.reg_psi,
                                      max_iter=self.max_iter, tol=self.tol,
                                      smooth_window=self.smooth_window)
        self.camera_ = self.result_.camera
        self.params_ = self.result_.params
        return self

    def transform(self, X=None):
        """Fitted meshes, (F, N, 3)."""
        return np.stack([evaluate_rig(self.rig, p) for p in self.params_])


# ------------------------------------------------------------------ file I/O


def save_rig(path, rig: BlendshapeRig):
    meta = {"kind": RIG_KIND, "format_version": "1"}
    tensors = {
        "template": rig.template, "shape_basis": rig.shape_basis,
        "expression_basis": rig.expression_basis, "jaw_pivot": rig.jaw_pivot,
        "jaw_axis": rig.jaw_axis, "jaw_weights": rig.jaw_weights,
        "landmark_embedding": rig.landmark_embedding.astype(np.int64),
        "faces": rig.faces.astype(np.int64),
    }
    container.save(path, meta, tensors)


def load_rig(path) -> BlendshapeRig:
    meta, t = container.load(path)
    if meta.get("kind") != RIG_KIND:
        raise DataError(f"{path}: not a rig file")
    required = ("template", "shape_basis", "expression_basis", "jaw_pivot", "jaw_axis",
                "jaw_weights", "landmark_embedding")
    missing = [k for k in required if k not in t]
    if missing:
        raise DataError(f"{path}: rig lacks {', '.join(missing)}")
    return BlendshapeRig(**{k: t[k] for k in required}, faces=t.get("faces", np.zeros((0, 3), np.int64)))


def write_obj(path, vertices, faces):
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.10g} {v[1]:.10g} {v[2]:.10g}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.asarray(verts), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def export_mesh_sequence(rig, params_seq, out_dir, prefix="frame"):
    """One OBJ file per frame, sharing the rig's face records; returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create mesh directory {out}: {exc}") from None
    paths = []
    for i, p in enumerate(params_seq):
        path = out / f"{prefix}_{i:05d}.obj"
        try:
            write_obj(path, evaluate_rig(rig, p), rig.faces)
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from None
        paths.append(path)
    return paths
