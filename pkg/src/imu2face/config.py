"""Flat ``key = value`` run configuration shared by every CLI command."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .exceptions import ConfigError
from .landmarks import MetricConfig
from .model import IMUTwinTransConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # paths
    data_dir: str = "data"
    out_dir: str = "out"
    features_dir: str = ""
    weights: str = ""
    rig: str = ""
    predictions: str = ""
    # randomness
    seed: int = 0
    # synthetic data
    n_sessions: int = 12
    duration: float = 60.0
    noise_sigma: float = 0.02
    latent_dim: int = 4
    jitter: float = 0.0
    user_seed: int = 0
    user_perturbation: float = 0.0
    # signal chain
    calibration_seconds: float = 4.0
    rate: float = 30.0
    cutoff: float = 0.1
    window_len: int = 30
    nfft: int = 32
    # model
    cnn_channels: tuple = (64, 128, 256, 512)
    kernel: int = 3
    cnn_dropout: float = 0.15
    d_model: int = 512
    n_head: int = 4
    d_ff: int = 1024
    encoder_layers: int = 2
    encoder_dropout: float = 0.1
    # training
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    warmup_fraction: float = 0.05
    wing_w: float = 20.0
    wing_epsilon: float = 2.0
    val_fraction: float = 0.15
    windows_per_epoch: int = 0
    dtype: str = "float32"
    n_train: int = 5
    train_sessions: tuple = ()
    test_sessions: tuple = ()
    finetune_lr: float = 1e-3
    finetune_epochs: int = 10
    adapt_seconds: float = 120.0
    # evaluation and inference
    d_real: float = 100.0
    latency_samples: int = 100
    infer_frames: int = 0
    # 3D fitting
    rig_vertices: int = 400
    rig_dims: tuple = (10, 10)
    reg_beta: float = 1e-4
    reg_psi: float = 1e-4
    max_iter: int = 2000
    fit_tol: float = 1e-8
    smooth_window: int = 0
    fit_frames: int = 30

    def __post_init__(self):
        if self.n_sessions < 1:
            raise ConfigError("n_sessions must be positive")
        if self.duration <= 0 or self.rate <= 0:
            raise ConfigError("duration and rate must be positive")
        if self.d_real <= 0:
            raise ConfigError("d_real must be positive (millimeters)")
        if len(self.rig_dims) != 2:
            raise ConfigError("rig_dims needs two integers: |beta|, |psi|")
        # building the sub-configs validates their fields too
        self.model_config()
        self.train_config()

    # derived paths
    @property
    def features_path(self) -> Path:
        return Path(self.features_dir) if self.features_dir else Path(self.out_dir) / "features"

    @property
    def weights_path(self) -> Path:
        return Path(self.weights) if self.weights else Path(self.out_dir) / "weights.bin"

    @property
    def rig_path(self) -> Path:
        return Path(self.rig) if self.rig else Path(self.data_dir) / "rig.bin"

    def model_config(self) -> IMUTwinTransConfig:
        return IMUTwinTransConfig(
            cnn_channels=self.cnn_channels, kernel=self.kernel, cnn_dropout=self.cnn_dropout,
            d_model=self.d_model, n_head=self.n_head, d_ff=self.d_ff,
            encoder_layers=self.encoder_layers, encoder_dropout=self.encoder_dropout,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            warmup_fraction=self.warmup_fraction, seed=self.seed, wing_w=self.wing_w,
            wing_epsilon=self.wing_epsilon, val_fraction=self.val_fraction,
            windows_per_epoch=self.windows_per_epoch, dtype=self.dtype,
            finetune_lr=self.finetune_lr, finetune_epochs=self.finetune_epochs,
            train_sessions=self.train_sessions, test_sessions=self.test_sessions,
        )

    def metric_config(self) -> MetricConfig:
        return MetricConfig(d_real=self.d_real)

    def signal_kwargs(self) -> dict:
        return dict(calibration_seconds=self.calibration_seconds, rate=self.rate,
                    cutoff=self.cutoff, window_len=self.window_len, nfft=self.nfft)


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def convert(key, text):
    """Parse the string form of ``key`` into the field's type."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    text = str(text).strip()
    try:
        if kind is tuple:
            items = [p.strip() for p in text.split(",") if p.strip()]
            if key in ("cnn_channels", "rig_dims"):
                return tuple(int(p) for p in items)
            return tuple(items)
        if kind is bool:
            return text.lower() in ("1", "true", "yes", "on")
        return kind(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {text!r} as {kind.__name__}") from None


def parse_config_text(text, source="<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        values[key] = convert(key, value)
    return values


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already typed or strings)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse_config_text(p.read_text(), str(p)))
    for key, value in (overrides or {}).items():
        values[key] = convert(key, value) if isinstance(value, str) else value
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, **kwargs) -> RunConfig:
    return replace(cfg, **kwargs)
