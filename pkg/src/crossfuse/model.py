"""Two-stream stacked cross-attention encoder/decoder network for HSI + LiDAR patches.

Each stack holds, per stream, an encoder (three filter blocks producing
query/key/value maps, plus self attention over spatial tokens) and a decoder
(attention of one stream applied to the *other* stream's values, followed by a
residual add-and-normalize "cross-out"). Both stream outputs of every stack are
concatenated channel-wise, globally pooled, and classified.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kvtext
from .initializers import conv_fans, glorot_init, ones, zeros
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d_same,
    dense,
    dropout,
    global_avg_pool,
    identity,
    layer_norm,
    matmul,
    relu,
    reshape,
    scale,
    softmax_rows,
    tanh,
    transpose,
)

MAX_EMBED_DIM = 512
MAX_STACKS = 8
STREAMS = ("hsi", "lidar")
ROLES = ("query", "key", "value")

ACTIVATIONS = {"relu": relu, "tanh": tanh, "linear": identity}


class ConfigError(kvtext.FieldError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_stacks: int = 4
    embed_dim: int = 128
    patch_size: int = 11
    hsi_channels: int = 144
    lidar_channels: int = 1
    n_classes: int = 15
    dropout_rate: float = 0.5
    activation: str = "relu"
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_stacks <= MAX_STACKS:
            raise ConfigError("n_stacks", f"must be in [1, {MAX_STACKS}], got {self.n_stacks}")
        if not 1 <= self.embed_dim <= MAX_EMBED_DIM:
            raise ConfigError("embed_dim", f"must be in [1, {MAX_EMBED_DIM}], got {self.embed_dim}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError("patch_size", f"must be a positive odd integer, got {self.patch_size}")
        if self.hsi_channels < 1:
            raise ConfigError("hsi_channels", "must be positive")
        if self.lidar_channels < 1:
            raise ConfigError("lidar_channels", "must be positive")
        if self.n_classes < 2:
            raise ConfigError("n_classes", f"must be at least 2, got {self.n_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate", f"must lie in [0, 1), got {self.dropout_rate}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError("activation", f"must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")
        if not self.ln_eps > 0:
            raise ConfigError("ln_eps", "must be positive")

    @property
    def feature_dim(self) -> int:
        """Length of the pooled head input: both streams of every stack."""
        return 2 * self.n_stacks * self.embed_dim

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _stack_in_channels(config: ModelConfig, k: int) -> dict[str, int]:
    if k == 0:
        return {"hsi": config.hsi_channels, "lidar": config.lidar_channels}
    return {"hsi": config.embed_dim, "lidar": config.embed_dim}


def filter_block_size(c_in: int, d: int) -> int:
    return 9 * c_in * d + d + 2 * d


def stack_param_count(config: ModelConfig, k: int) -> int:
    d = config.embed_dim
    total = 0
    for c_in in _stack_in_channels(config, k).values():
        total += 3 * filter_block_size(c_in, d) + 2 * d
    return total


def head_param_count(config: ModelConfig) -> int:
    return config.feature_dim * config.n_classes + config.n_classes


def param_count(config: ModelConfig) -> int:
    return sum(stack_param_count(config, k) for k in range(config.n_stacks)) + head_param_count(config)


# ---------------------------------------------------------------------------
# building blocks


def filter_block(x: Tensor, conv_w: Tensor, conv_b: Tensor, gamma: Tensor, beta: Tensor,
                 activation: str = "relu", eps: float = 1e-5) -> Tensor:
    """Conv2D (3x3, same) -> LayerNorm over channels -> activation."""
    y = conv2d_same(x, conv_w, conv_b)
    y = layer_norm(y, gamma, beta, eps)
    return ACTIVATIONS[activation](y)


def tokens(x: Tensor) -> Tensor:
    """(..., p, p, d) -> (..., p*p, d); token r*p + c is map position (r, c)."""
    if x.ndim < 3:
        raise ShapeError(f"tokens expects (..., p, p, d), got {x.shape}")
    return reshape(x, x.shape[:-3] + (x.shape[-3] * x.shape[-2], x.shape[-1]))


def untokens(x: Tensor, p: int) -> Tensor:
    if x.shape[-2] != p * p:
        raise ShapeError(f"untokens: {x.shape[-2]} tokens cannot form a {p}x{p} map")
    return reshape(x, x.shape[:-2] + (p, p, x.shape[-1]))


def self_attention(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic scores softmax(Q K^T / sqrt(d)) over tokens."""
    if q.shape != k.shape:
        raise ShapeError(f"self_attention: query {q.shape} and key {k.shape} differ")
    d = q.shape[-1]
    return softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)))


def cross_decode(a: Tensor, v: Tensor) -> Tensor:
    if a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"cross_decode: attention must be square, got {a.shape}")
    if v.shape[-2] != a.shape[-1]:
        raise ShapeError(f"cross_decode: {a.shape[-1]} attention columns vs {v.shape[-2]} value rows")
    return matmul(a, v)


def cross_out(x1: Tensor, x2: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Residual add of two token maps followed by per-token layer norm."""
    if x1.shape != x2.shape:
        raise ShapeError(f"cross_out: shape mismatch {x1.shape} vs {x2.shape}")
    return layer_norm(add(x1, x2), gamma, beta, eps)


# ---------------------------------------------------------------------------
# the network


class FusionModel:
    """Parameters plus forward wiring for the full stacked network.

    Parameter names follow ``stack{k}.{stream}.{role}.{kind}`` for filter
    blocks, ``stack{k}.{stream}.crossout.{ln_gamma,ln_beta}`` for decoders and
    ``head.w`` / ``head.b`` for the classifier.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params: dict[str, Tensor] = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, Tensor]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d = cfg.embed_dim
        params: dict[str, Tensor] = {}
        for k in range(cfg.n_stacks):
            c_in = _stack_in_channels(cfg, k)
            for stream in STREAMS:
                fan_in, fan_out = conv_fans(c_in[stream], d)
                for role in ROLES:
                    pre = f"stack{k}.{stream}.{role}"
                    params[f"{pre}.conv_w"] = glorot_init((3, 3, c_in[stream], d), fan_in, fan_out, rng)
                    params[f"{pre}.conv_b"] = zeros((d,))
                    params[f"{pre}.ln_gamma"] = ones((d,))
                    params[f"{pre}.ln_beta"] = zeros((d,))
                pre = f"stack{k}.{stream}.crossout"
                params[f"{pre}.ln_gamma"] = ones((d,))
                params[f"{pre}.ln_beta"] = zeros((d,))
        params["head.w"] = glorot_init((cfg.feature_dim, cfg.n_classes), cfg.feature_dim, cfg.n_classes, rng)
        params["head.b"] = zeros((cfg.n_classes,))
        for name, t in params.items():
            t.name = name
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def filter(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return filter_block(
            x, p[f"{prefix}.conv_w"], p[f"{prefix}.conv_b"], p[f"{prefix}.ln_gamma"], p[f"{prefix}.ln_beta"],
            self.config.activation, self.config.ln_eps,
        )

    def stack_forward(self, k: int, h_in: Tensor, l_in: Tensor, attention: list | None = None) -> tuple[Tensor, Tensor]:
        if h_in.shape[-3:-1] != l_in.shape[-3:-1]:
            raise ShapeError(f"stack {k}: HSI {h_in.shape} and LiDAR {l_in.shape} differ spatially")
        p = h_in.shape[-3]
        q, kk, v, a = {}, {}, {}, {}
        for stream, x in zip(STREAMS, (h_in, l_in)):
            pre = f"stack{k}.{stream}"
            q[stream] = tokens(self.filter(x, f"{pre}.query"))
            kk[stream] = tokens(self.filter(x, f"{pre}.key"))
            v[stream] = tokens(self.filter(x, f"{pre}.value"))
            a[stream] = self_attention(q[stream], kk[stream])
            if attention is not None:
                attention.append(a[stream])
        out = []
        for stream, other in (("hsi", "lidar"), ("lidar", "hsi")):
            decoded = cross_decode(a[stream], v[other])
            pre = f"stack{k}.{stream}.crossout"
            y = cross_out(decoded, q[stream], self.params[f"{pre}.ln_gamma"], self.params[f"{pre}.ln_beta"],
                          self.config.ln_eps)
            out.append(untokens(y, p))
        return out[0], out[1]

    def features(self, h_patch: Tensor, l_patch: Tensor, attention: list | None = None) -> Tensor:
        """Pooled concatenation of every stack's two stream outputs, length 2*N_x*d."""
        cfg = self.config
        self._check_inputs(h_patch, l_patch)
        maps = []
        h, l = h_patch, l_patch
        for k in range(cfg.n_stacks):
            h, l = self.stack_forward(k, h, l, attention)
            maps.extend((h, l))
        return global_avg_pool(concat_channels(maps))

    def forward(self, h_patch, l_patch, training: bool = False, rng: np.random.Generator | None = None,
                attention: list | None = None) -> Tensor:
        """Class probabilities for one patch pair ``(p, p, C)`` or a batch ``(N, p, p, C)``."""
        h_patch = _as_tensor(h_patch)
        l_patch = _as_tensor(l_patch)
        f = self.features(h_patch, l_patch, attention)
        f = dropout(f, self.config.dropout_rate, training, rng)
        return softmax_rows(dense(f, self.params["head.w"], self.params["head.b"]))

    __call__ = forward

    def _check_inputs(self, h: Tensor, l: Tensor) -> None:
        cfg = self.config
        p = cfg.patch_size
        if h.shape[-3:] != (p, p, cfg.hsi_channels):
            raise ShapeError(f"HSI patch {h.shape} does not end in ({p}, {p}, {cfg.hsi_channels})")
        if l.shape[-3:] != (p, p, cfg.lidar_channels):
            raise ShapeError(f"LiDAR patch {l.shape} does not end in ({p}, {p}, {cfg.lidar_channels})")
        if h.shape[:-3] != l.shape[:-3]:
            raise ShapeError(f"batch shapes differ: {h.shape} vs {l.shape}")

    def predict(self, h_patches: np.ndarray, l_patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Argmax class index per patch, inference mode."""
        preds = []
        for i in range(0, len(h_patches), batch_size):
            probs = self.forward(h_patches[i : i + batch_size], l_patches[i : i + batch_size])
            preds.append(probs.data.argmax(axis=-1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# checkpoint container
#
#   8s   magic  b"XFUSECKP"
#   <I   format version
#   <I   config length, then that many bytes of UTF-8 key=value text
#   <I   tensor count, then per tensor:
#        <H name length, name (UTF-8), <B ndim, <I x ndim dims, float64 LE payload

CKPT_MAGIC = b"XFUSECKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: FusionModel, path) -> None:
    cfg_bytes = kvtext.dumps(model.config.to_dict()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> FusionModel:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {buf[:8]!r})")
    version, cfg_len = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    config = kvtext.to_dataclass(ModelConfig, kvtext.loads(buf[pos : pos + cfg_len].decode("utf-8")))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    reference = FusionModel(config)
    expected = {k: t.shape for k, t in reference.params.items()}
    got = {k: t.shape for k, t in params.items()}
    if expected != got:
        raise CheckpointError(f"{path}: parameter layout does not match its config")
    return FusionModel(config, {k: params[k] for k in reference.params})
