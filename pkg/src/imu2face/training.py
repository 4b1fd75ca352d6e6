"""Session assembly, warmup + cosine training with Adam, fine-tuning and evaluation."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import landmarks as lm
from . import model as mdl
from . import numerics as nx
from .exceptions import ConfigError, DataError, NumericalError
from .signal import FEATURE_DIM, ImuStream, preprocess_stream

WINDOW = 10


@dataclass(frozen=True)
class Session:
    """One recording: per-frame features (T, 216) and normalized targets (T, 51, 2)."""

    id: str
    features: np.ndarray
    targets: np.ndarray
    rate: float = 30.0

    def __post_init__(self):
        f = np.asarray(self.features)
        t = np.asarray(self.targets, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != FEATURE_DIM:
            raise DataError(f"session {self.id}: features must be (T, {FEATURE_DIM}), got {f.shape}")
        if t.shape != (f.shape[0], lm.N_LANDMARKS, 2):
            raise DataError(
                f"session {self.id}: {f.shape[0]} feature frames but targets of shape {t.shape}"
            )
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "targets", t)

    def __len__(self):
        return self.features.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.rate

    def windows(self, start=0, stop=None):
        """Windows whose frames all lie in ``[start, stop)``, with last-frame targets."""
        stop = len(self) if stop is None else stop
        feats = self.features[start:stop]
        if feats.shape[0] < WINDOW:
            raise DataError(f"session {self.id}: {feats.shape[0]} frames, a window needs {WINDOW}")
        win = sliding_window_view(feats, WINDOW, axis=0).transpose(0, 2, 1)
        return win, self.targets[start + WINDOW - 1:stop]


def assemble_session(imu: ImuStream, landmarks_raw, session_id="s0", video_start=None,
                     **signal_kwargs) -> Session:
    """Preprocess an IMU stream and pair it with normalized landmarks frame by frame.

    The resampled IMU grid and the landmark frames can differ by a sample at
    the end (timestamp jitter); both are cut to the shorter length.
    """
    features, _, _ = preprocess_stream(imu, video_start=video_start, **signal_kwargs)
    targets = lm.normalize_points(np.asarray(landmarks_raw, dtype=np.float64))[0]
    n = min(features.shape[0], targets.shape[0])
    return Session(session_id, features[:n], targets[:n])


def stack_windows(sessions):
    """Concatenate windows of several sessions; no window crosses a session boundary."""
    parts = [s.windows() for s in sessions]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    ``val_fraction`` carves the final part of every training session off as a
    validation segment for checkpoint selection (0 disables selection).
    ``windows_per_epoch`` optionally subsamples each epoch's shuffled windows.
    """

    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    warmup_fraction: float = 0.05
    seed: int = 0
    wing_w: float = 20.0
    wing_epsilon: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.15
    windows_per_epoch: int = 0
    dtype: str = "float32"
    finetune_lr: float = 1e-3
    finetune_epochs: int = 10
    train_sessions: tuple = ()
    test_sessions: tuple = ()

    def __post_init__(self):
        if not self.lr > 0 or not self.finetune_lr > 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.batch_size < 1 or self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("batch_size must be positive and epoch counts nonnegative")
        if self.windows_per_epoch < 0:
            raise ConfigError("windows_per_epoch must be nonnegative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        object.__setattr__(self, "train_sessions", tuple(self.train_sessions))
        object.__setattr__(self, "test_sessions", tuple(self.test_sessions))

    @property
    def wing(self):
        return mdl.WingLossParams(self.wing_w, self.wing_epsilon)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class TrainHistory:
    step_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    val_nme: list = field(default_factory=list)
    best_epoch: int = -1


def lr_at_step(config: TrainConfig, step, total_steps, base_lr=None):
    """Linear warmup to the peak rate, then half-cosine decay to zero at ``total_steps``."""
    lr = config.lr if base_lr is None else base_lr
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warm = int(math.floor(config.warmup_fraction * total_steps))
    if step < warm:
        return lr * step / warm
    if total_steps == warm:
        return lr
    progress = (step - warm) / (total_steps - warm)
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def split_sessions(sessions, n_train=5, seed=0):
    """Random disjoint split into ``n_train`` training and the remaining test sessions."""
    sessions = list(sessions)
    if not 0 < n_train < len(sessions):
        raise ConfigError(f"n_train must lie in [1, {len(sessions) - 1}], got {n_train}")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5971])).permutation(len(sessions))
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    return [sessions[i] for i in train_idx], [sessions[i] for i in test_idx]


def _train_val_windows(sessions, val_fraction):
    tr_x, tr_y, va_x, va_y = [], [], [], []
    for s in sessions:
        n_val = int(round(val_fraction * len(s)))
        if n_val and n_val < WINDOW:
            n_val = 0
        cut = len(s) - n_val
        x, y = s.windows(0, cut)
        tr_x.append(x)
        tr_y.append(y)
        if n_val:
            x, y = s.windows(cut)
            va_x.append(x)
            va_y.append(y)
    train = (np.concatenate(tr_x), np.concatenate(tr_y))
    val = (np.concatenate(va_x), np.concatenate(va_y)) if va_x else None
    return train, val


def prepare_weights(windows, targets, model_config=None, seed=0, dtype="float32", zero_head=True):
    """Initialized weights with data-dependent input scaling and head bias.

    The input buffers standardize every feature with training statistics and
    the head bias starts at the mean training target, so the untrained network
    predicts the mean face.
    """
    cfg = model_config or mdl.IMUTwinTransConfig()
    w = mdl.init_weights(cfg, seed=seed, dtype=np.dtype(dtype))
    frames = np.asarray(windows).reshape(-1, cfg.input_dim)
    std = frames.std(axis=0)
    w.buffers["input_mean"].data = frames.mean(axis=0).astype(w.dtype)
    w.buffers["input_std"].data = np.where(std > 1e-12, std, 1.0).astype(w.dtype)
    w.params["head.b"].data = np.asarray(targets).mean(axis=0).reshape(-1).astype(w.dtype)
    if zero_head:
        w.params["head.w"].data = np.zeros_like(w.params["head.w"].data)
    return w


def predict(weights, windows, batch_size=256):
    """Eval-mode predictions (n, 51, 2) in float64."""
    windows = np.asarray(windows)
    out = np.empty((windows.shape[0], weights.config.output_landmarks, 2))
    for i in range(0, windows.shape[0], batch_size):
        out[i:i + batch_size] = mdl.forward(weights, windows[i:i + batch_size]).data
    return out


def _optimize(weights, windows, targets, config, epochs, base_lr, trainable, freeze_norm,
              val=None, metric_cfg=lm.MetricConfig()):
    history = TrainHistory()
    params = {k: weights.params[k] for k in trainable}
    state = nx.AdamState(lr=base_lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    n = windows.shape[0]
    per_epoch = min(config.windows_per_epoch or n, n)
    steps_per_epoch = math.ceil(per_epoch / config.batch_size)
    total = steps_per_epoch * epochs
    seeds = np.random.SeedSequence([config.seed, 0x7A1]).spawn(2)
    shuffle_rng, dropout_rng = np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])
    dtype = weights.dtype
    best = (math.inf, None)
    step = 0
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)[:per_epoch]
        losses = []
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * config.batch_size:(b + 1) * config.batch_size])
            if freeze_norm is False and len(idx) < 2:
                continue
            for p in params.values():
                p.requires_grad = True
                p.grad = None
            with nx.Tape() as tape:
                pred = mdl.forward(weights, windows[idx].astype(dtype, copy=False), training=True,
                                   rng=dropout_rng, update_stats=not freeze_norm)
                loss = mdl.wing_loss(pred, targets[idx], config.wing)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"training diverged: loss is {value} at step {step}")
            grads = tape.backward(loss)
            lr = lr_at_step(config, step, total, base_lr)
            nx.adam_step(state, params, {k: grads[p] for k, p in params.items() if p in grads}, lr=lr)
            history.step_loss.append(value)
            history.lr.append(lr)
            losses.append(value)
            step += 1
        for p in params.values():
            p.requires_grad = False
            p.grad = None
        history.epoch_loss.append(float(np.mean(losses)) if losses else math.nan)
        if val is not None:
            pred = predict(weights, val[0])
            history.val_mae.append(lm.mae(val[1], pred, metric_cfg))
            history.val_nme.append(lm.nme(val[1], pred))
            if history.val_nme[-1] < best[0]:
                best = (history.val_nme[-1], weights.copy())
                history.best_epoch = epoch
    if best[1] is not None:
        return best[1], history
    return weights, history


def train_windows(windows, targets, config: TrainConfig = TrainConfig(), model_config=None,
                  val=None, metric_cfg=lm.MetricConfig()):
    """Train from scratch on pre-built windows; returns ``(weights, history)``."""
    windows = np.asarray(windows)
    targets = np.asarray(targets, dtype=np.float64)
    if windows.shape[0] == 0 or windows.shape[0] != targets.shape[0]:
        raise DataError(f"{windows.shape[0]} windows but {targets.shape[0]} targets")
    init_seed = int(np.random.SeedSequence([config.seed, 0x1A17]).generate_state(1)[0])
    weights = prepare_weights(windows, targets, model_config, init_seed, config.dtype)
    return _optimize(weights, windows, targets, config, config.epochs, config.lr,
                     list(weights.params), False, val, metric_cfg)


def train(sessions, config: TrainConfig = TrainConfig(), model_config=None,
          metric_cfg=lm.MetricConfig()):
    """Train on whole sessions with a tail-of-session validation segment.

    Returns the best-validation weights (the final weights when
    ``val_fraction`` is 0) and the :class:`TrainHistory`.
    """
    sessions = list(sessions)
    if not sessions:
        raise DataError("training needs at least one session")
    (x, y), val = _train_val_windows(sessions, config.val_fraction)
    return train_windows(x, y, config, model_config, val, metric_cfg)


def fine_tune(weights, sessions, config: TrainConfig = TrainConfig(), epochs=None):
    """Adapt only the linear layers (value embedding, feed-forward, head) to new sessions.

    Batch norm runs on its stored statistics, so convolution, normalization
    and attention tensors and all buffers come back unchanged.
    """
    sessions = list(sessions)
    if not sessions:
        raise DataError("fine-tuning needs adaptation data")
    x, y = stack_windows(sessions)
    epochs = config.finetune_epochs if epochs is None else epochs
    tuned = weights.copy()
    if epochs == 0:
        return tuned, TrainHistory()
    trainable = [k for k in tuned.params if mdl.is_linear_layer(k)]
    ft = TrainConfig(**{**asdict(config), "val_fraction": 0.0})
    return _optimize(tuned, x, y, ft, epochs, config.finetune_lr, trainable, True)


@dataclass
class EvalReport:
    mae_mm: float
    nme_pct: float
    std_mae_mm: float
    std_nme_pct: float
    per_landmark_mm: np.ndarray
    cdf_mm: np.ndarray
    p50_latency_ms: float = math.nan
    p95_latency_ms: float = math.nan
    n_windows: int = 0

    def summary(self) -> dict:
        return {
            "mae_mm": self.mae_mm,
            "nme_pct": self.nme_pct,
            "std_mae_mm": self.std_mae_mm,
            "std_nme_pct": self.std_nme_pct,
            "p50_latency_ms": self.p50_latency_ms,
            "p95_latency_ms": self.p95_latency_ms,
        }


def report_from_predictions(predictions, targets, metric_cfg=lm.MetricConfig()) -> EvalReport:
    per_landmark, cdf = lm.per_landmark_errors(targets, predictions, metric_cfg)
    frame_nme = lm.point_errors(targets, predictions).mean(axis=1) * 100.0 / metric_cfg.d_norm
    return EvalReport(
        mae_mm=float(per_landmark.mean()),
        nme_pct=lm.nme(targets, predictions, metric_cfg.d_norm),
        std_mae_mm=float(cdf.std()),
        std_nme_pct=float(frame_nme.std()),
        per_landmark_mm=per_landmark,
        cdf_mm=cdf,
        n_windows=int(np.asarray(targets).shape[0]),
    )


def measure_latency(weights, windows, n=100):
    """Wall-clock time (ms) of single-window eval-mode forwards."""
    times = []
    for i in range(min(n, len(windows))):
        t0 = time.perf_counter()
        mdl.forward(weights, windows[i])
        times.append((time.perf_counter() - t0) * 1e3)
    return np.asarray(times)


def evaluate(weights, sessions, metric_cfg=lm.MetricConfig(), latency_samples=100) -> EvalReport:
    sessions = list(sessions)
    if not sessions:
        raise DataError("evaluation needs at least one session")
    x, y = stack_windows(sessions)
    report = report_from_predictions(predict(weights, x), y, metric_cfg)
    if latency_samples:
        times = measure_latency(weights, x, latency_samples)
        report.p50_latency_ms = float(np.percentile(times, 50))
        report.p95_latency_ms = float(np.percentile(times, 95))
    return report


def write_report(report: EvalReport, out_dir, include_latency=True):
    """``summary.json``, ``per_landmark.csv`` and ``cdf.csv`` in ``out_dir``."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    if not include_latency:
        summary = {k: v for k, v in summary.items() if "latency" not in k}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    lm.write_per_landmark_csv(out / "per_landmark.csv", report.per_landmark_mm)
    lm.write_cdf_csv(out / "cdf.csv", report.cdf_mm)


def write_history_csv(path, history: TrainHistory):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(history.step_loss, history.lr)):
            w.writerow([i, repr(loss), repr(lr)])
    epoch_path = str(path).replace(".csv", "") + "_epochs.csv"
    with open(epoch_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_mae_mm", "val_nme_pct"])
        for i, loss in enumerate(history.epoch_loss):
            mae = history.val_mae[i] if i < len(history.val_mae) else ""
            nme = history.val_nme[i] if i < len(history.val_nme) else ""
            w.writerow([i, repr(loss), repr(mae), repr(nme)])


class IMUTwinTransRegressor(RegressorMixin, BaseEstimator):
    """Estimator over (n, 10, 216) windows and (n, 51, 2) normalized targets.

    Parameters mirror :class:`TrainConfig`; ``model_config`` overrides the
    default architecture.
    """

    def __init__(self, epochs=50, batch_size=64, lr=1e-3, warmup_fraction=0.05, seed=0,
                 wing_w=20.0, wing_epsilon=2.0, windows_per_epoch=0, dtype="float32",
                 model_config=None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_fraction = warmup_fraction
        self.seed = seed
        self.wing_w = wing_w
        self.wing_epsilon = wing_epsilon
        self.windows_per_epoch = windows_per_epoch
        self.dtype = dtype
        self.model_config = model_config

    def _config(self):
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            warmup_fraction=self.warmup_fraction, seed=self.seed, wing_w=self.wing_w,
            wing_epsilon=self.wing_epsilon, windows_per_epoch=self.windows_per_epoch,
            dtype=self.dtype, val_fraction=0.0,
        )

    def fit(self, X, y, eval_set=None):
        self.weights_, self.history_ = train_windows(
            X, y, self._config(), self.model_config, val=eval_set
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "weights_")
        X = np.asarray(X)
        single = X.ndim == 2
        out = predict(self.weights_, X[None] if single else X)
        return out[0] if single else out

    def score(self, X, y, sample_weight=None):
        """Negative NME (percent), so that larger is better."""
        return -lm.nme(np.asarray(y, dtype=np.float64), self.predict(X))
