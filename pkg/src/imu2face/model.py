"""Convolution-transformer landmark regressor and the Wing loss.

Data flow for a batch of windows (B, 10, 216)::

    standardize -> CNN stem (216->64) -> 3 residual blocks (64->128->256->512)
    -> (B, 10, 512) -> value embedding + sinusoidal positions
    -> 2 pre-norm encoder layers -> final layer norm -> last token
    -> linear 512->102 -> (B, 51, 2)
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from . import numerics as nx
from .exceptions import ConfigError, DataError, NumericalError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class IMUTwinTransConfig:
    input_dim: int = 216
    seq_len: int = 10
    cnn_channels: tuple = (64, 128, 256, 512)
    kernel: int = 3
    stride: int = 1
    cnn_dropout: float = 0.15
    d_model: int = 512
    n_head: int = 4
    d_ff: int = 1024
    encoder_layers: int = 2
    encoder_dropout: float = 0.1
    output_landmarks: int = 51

    def __post_init__(self):
        object.__setattr__(self, "cnn_channels", tuple(int(c) for c in self.cnn_channels))
        if self.n_head < 1 or self.d_model % self.n_head:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_head={self.n_head}")
        if not self.cnn_channels or self.cnn_channels[-1] != self.d_model:
            raise ConfigError("the last CNN channel count must equal d_model")
        if self.kernel % 2 != 1:
            raise ConfigError(f"kernel size must be odd for same padding, got {self.kernel}")
        if self.stride != 1:
            raise ConfigError("only stride 1 keeps the sequence length")
        for name in ("cnn_dropout", "encoder_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {p}")
        for name in ("input_dim", "seq_len", "d_ff", "encoder_layers", "output_landmarks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass
class NetworkWeights:
    """Trainable parameters plus non-trainable buffers (norm statistics, positions, input scaling)."""

    config: IMUTwinTransConfig
    params: dict
    buffers: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(
            self.config,
            {k: nx.Tensor(v.data.copy()) for k, v in self.params.items()},
            {k: nx.Tensor(v.data.copy()) for k, v in self.buffers.items()},
            self.version,
        )

    def arrays(self) -> dict:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v.data for k, v in self.buffers.items()})
        return out


@dataclass(frozen=True)
class WingLossParams:
    w: float = 20.0
    epsilon: float = 2.0

    def __post_init__(self):
        if not (self.w > 0 and self.epsilon > 0):
            raise ConfigError("Wing loss needs w > 0 and epsilon > 0")

    @property
    def C(self) -> float:
        return self.w - self.w * math.log(1.0 + self.w / self.epsilon)


def _block_layout(config):
    """(name, c_in, c_out) for the stem and each residual block."""
    ch = config.cnn_channels
    layout = [("cnn.stem", config.input_dim, ch[0])]
    for i in range(1, len(ch)):
        layout.append((f"cnn.res{i}", ch[i - 1], ch[i]))
    return layout


def parameter_shapes(config: IMUTwinTransConfig) -> dict:
    """Ordered name -> shape map of every trainable tensor."""
    k = config.kernel
    shapes = {}
    for name, c_in, c_out in _block_layout(config):
        if name == "cnn.stem":
            shapes[f"{name}.conv.w"] = (c_out, c_in, k)
            shapes[f"{name}.conv.b"] = (c_out,)
            shapes[f"{name}.bn.gamma"] = (c_out,)
            shapes[f"{name}.bn.beta"] = (c_out,)
            continue
        shapes[f"{name}.conv1.w"] = (c_out, c_in, k)
        shapes[f"{name}.conv1.b"] = (c_out,)
        shapes[f"{name}.bn1.gamma"] = (c_out,)
        shapes[f"{name}.bn1.beta"] = (c_out,)
        shapes[f"{name}.conv2.w"] = (c_out, c_out, k)
        shapes[f"{name}.conv2.b"] = (c_out,)
        shapes[f"{name}.bn2.gamma"] = (c_out,)
        shapes[f"{name}.bn2.beta"] = (c_out,)
        if c_in != c_out:
            shapes[f"{name}.shortcut.w"] = (c_out, c_in, 1)
            shapes[f"{name}.shortcut.b"] = (c_out,)
    d, f = config.d_model, config.d_ff
    shapes["embed.w"] = (d, d)
    shapes["embed.b"] = (d,)
    for layer in range(config.encoder_layers):
        p = f"enc{layer}"
        shapes[f"{p}.ln1.gamma"] = (d,)
        shapes[f"{p}.ln1.beta"] = (d,)
        for m in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.w{m}"] = (d, d)
            shapes[f"{p}.attn.b{m}"] = (d,)
        shapes[f"{p}.ln2.gamma"] = (d,)
        shapes[f"{p}.ln2.beta"] = (d,)
        shapes[f"{p}.ff1.w"] = (d, f)
        shapes[f"{p}.ff1.b"] = (f,)
        shapes[f"{p}.ff2.w"] = (f, d)
        shapes[f"{p}.ff2.b"] = (d,)
    shapes["final_ln.gamma"] = (d,)
    shapes["final_ln.beta"] = (d,)
    shapes["head.w"] = (d, 2 * config.output_landmarks)
    shapes["head.b"] = (2 * config.output_landmarks,)
    return shapes


def is_linear_layer(name: str) -> bool:
    """Value embedding, encoder feed-forward and head tensors: the fine-tunable set."""
    return name.startswith(("embed.", "head.")) or ".ff1." in name or ".ff2." in name


def fan_in(name: str, shape) -> int:
    if name.endswith(".w") and len(shape) == 3:
        return shape[1] * shape[2]
    return shape[0]


def init_limit(name: str, shape) -> float:
    """Uniform init bound 1/sqrt(fan_in) for weight matrices and kernels; 0 for the rest."""
    is_weight = name.endswith(".w") or (".attn.w" in name)
    return 1.0 / math.sqrt(fan_in(name, shape)) if is_weight else 0.0


def positional_table(seq_len, d_model) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    rates = np.exp(-math.log(10000.0) * np.arange(0, d_model, 2) / d_model)
    table = np.zeros((seq_len, d_model))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: d_model // 2])
    return table


def init_weights(config: IMUTwinTransConfig, seed=0, dtype=np.float64) -> NetworkWeights:
    """Deterministic initialization from ``seed``."""
    if not isinstance(config, IMUTwinTransConfig):
        raise ConfigError("init_weights needs an IMUTwinTransConfig")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        limit = init_limit(name, shape)
        if limit > 0:
            arr = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = nx.Tensor(arr.astype(dtype), name=name)
    buffers = {}
    for name, _, c_out in _block_layout(config):
        bns = ["bn"] if name == "cnn.stem" else ["bn1", "bn2"]
        for bn in bns:
            buffers[f"{name}.{bn}.mean"] = nx.Tensor(np.zeros(c_out, dtype=dtype))
            buffers[f"{name}.{bn}.var"] = nx.Tensor(np.ones(c_out, dtype=dtype))
    buffers["pos_table"] = nx.Tensor(positional_table(config.seq_len, config.d_model).astype(dtype))
    buffers["input_mean"] = nx.Tensor(np.zeros(config.input_dim, dtype=dtype))
    buffers["input_std"] = nx.Tensor(np.ones(config.input_dim, dtype=dtype))
    return NetworkWeights(config, params, buffers)


def count_parameters(weights: NetworkWeights) -> int:
    return int(sum(p.size for p in weights.params.values()))


def _bn(weights, prefix, x, training, update_stats):
    p, b = weights.params, weights.buffers
    use_batch = training and update_stats is not False
    return nx.batch_norm(
        x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
        b[f"{prefix}.mean"], b[f"{prefix}.var"], training=use_batch,
    )


def cnn_features(weights, x, training=False, rng=None, update_stats=None):
    """CNN trunk: (B, input_dim, T) -> (B, d_model, T)."""
    p = weights.params
    cfg = weights.config
    drop = cfg.cnn_dropout

    def conv(name, z):
        return nx.conv1d(z, p[f"{name}.w"], p[f"{name}.b"])

    h = conv("cnn.stem.conv", x)
    h = nx.relu(_bn(weights, "cnn.stem.bn", h, training, update_stats))
    h = nx.dropout(h, drop, rng, training)
    for name, c_in, c_out in _block_layout(cfg)[1:]:
        z = conv(f"{name}.conv1", h)
        z = nx.relu(_bn(weights, f"{name}.bn1", z, training, update_stats))
        z = nx.dropout(z, drop, rng, training)
        z = _bn(weights, f"{name}.bn2", conv(f"{name}.conv2", z), training, update_stats)
        short = conv(f"{name}.shortcut", h) if c_in != c_out else h
        h = nx.dropout(nx.relu(z + short), drop, rng, training)
    return h


def _encoder_layer(weights, prefix, x, training, rng):
    p = weights.params
    cfg = weights.config
    drop = cfg.encoder_dropout
    attn = {k: p[f"{prefix}.attn.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    h = nx.layer_norm(x, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])
    x = x + nx.dropout(nx.multi_head_attention(h, attn, cfg.n_head), drop, rng, training)
    h = nx.layer_norm(x, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
    h = nx.relu(nx.linear(h, p[f"{prefix}.ff1.w"], p[f"{prefix}.ff1.b"]))
    h = nx.dropout(h, drop, rng, training)
    h = nx.linear(h, p[f"{prefix}.ff2.w"], p[f"{prefix}.ff2.b"])
    return x + nx.dropout(h, drop, rng, training)


def forward(weights: NetworkWeights, windows, training=False, rng=None, update_stats=None,
            return_cnn=False):
    """Predict normalized landmarks for one (T, D) window or a batch (B, T, D).

    Returns a Tensor of shape (51, 2) or (B, 51, 2). In training mode dropout
    draws from ``rng`` and batch norm uses batch statistics (updating the
    running buffers) unless ``update_stats=False``, which keeps the norm
    layers on their running statistics. With ``return_cnn`` the CNN output
    (B, T, d_model) is returned as well.
    """
    cfg = weights.config
    dtype = weights.dtype
    arr = np.asarray(windows.data if isinstance(windows, nx.Tensor) else windows)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (cfg.seq_len, cfg.input_dim):
        raise DataError(
            f"expected windows of shape ({cfg.seq_len}, {cfg.input_dim}), got {arr.shape[-2:]}"
        )
    if training and rng is None:
        raise ConfigError("training-mode forward needs an explicit random generator for dropout")
    b = weights.buffers
    arr = ((arr - b["input_mean"].data) / b["input_std"].data).astype(dtype, copy=False)
    x = nx.Tensor(arr.transpose(0, 2, 1))
    h = cnn_features(weights, x, training, rng, update_stats)
    tokens = nx.transpose(h, (0, 2, 1))
    p = weights.params
    z = nx.linear(tokens, p["embed.w"], p["embed.b"]) + b["pos_table"]
    z = nx.dropout(z, cfg.encoder_dropout, rng, training)
    for layer in range(cfg.encoder_layers):
        z = _encoder_layer(weights, f"enc{layer}", z, training, rng)
    z = nx.layer_norm(z, p["final_ln.gamma"], p["final_ln.beta"])
    last = z[:, -1, :]
    out = nx.linear(last, p["head.w"], p["head.b"])
    out = nx.reshape(out, (arr.shape[0], cfg.output_landmarks, 2))
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("network output contains non-finite values")
    if single:
        out = nx.reshape(out, (cfg.output_landmarks, 2))
    return (out, tokens) if return_cnn else out


def wing_loss(pred, target, params: WingLossParams = WingLossParams()):
    """Mean Wing loss over landmarks (and batch) of the per-landmark Euclidean error."""
    pred = nx.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, nx.Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DataError(f"prediction shape {pred.shape} differs from target {target.shape}")
    dist = nx.norm(pred - target, axis=-1)
    small = (dist.data < params.w).astype(pred.dtype)
    log_branch = nx.log(dist / params.epsilon + 1.0) * params.w
    lin_branch = dist - params.C
    return nx.mean(log_branch * small + lin_branch * (1.0 - small))


def save_weights(path, weights: NetworkWeights):
    meta = {
        "kind": "imu2face.network",
        "format_version": str(weights.version),
        "config": weights.config.to_json(),
    }
    container.save(path, meta, weights.arrays())


def load_weights(path) -> NetworkWeights:
    meta, arrays = container.load(path)
    if meta.get("kind") != "imu2face.network":
        raise DataError(f"{path}: not a network weight file")
    config = IMUTwinTransConfig.from_json(meta["config"])
    params, buffers = {}, {}
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        (params if kind == "param" else buffers)[name] = nx.Tensor(arr, name=name)
    expected = parameter_shapes(config)
    for name, shape in expected.items():
        if name not in params or params[name].shape != tuple(shape):
            raise DataError(f"{path}: parameter {name!r} missing or misshaped")
        if not np.all(np.isfinite(params[name].data)):
            raise DataError(f"{path}: parameter {name!r} has non-finite values")
    return NetworkWeights(config, params, buffers, int(meta["format_version"]))
