"""Pose-regressor network: configurable bottleneck CNN backbone, latent
encoders, translation head, and the single-token attention rotation head.

Three training branches share one parameter dict; the checkpoint written
here is the wire format consumed by the trainer, evaluator, and CLI.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import (
    Tensor,
    conv2d,
    dense,
    depthwise_conv2d,
    global_avg_pool,
    h_swish,
    h_sigmoid,
    softmax,
    spatial_channel_avg_pool,
    spatial_channel_max_pool,
)

CHECKPOINT_FORMAT = "poseadapt-ckpt/1"


class ConfigError(ValueError):
    """Architecture or run configuration violates a documented constraint."""


def make_divisible(value: float, divisor: int = 8) -> int:
    """Round a channel count to the nearest multiple of divisor, never below 90%."""
    new_value = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if new_value < 0.9 * value:
        new_value += divisor
    return new_value


@dataclass(frozen=True)
class BlockSpec:
    """One backbone stage: a plain conv or an inverted bottleneck."""

    kind: str                    # "conv" | "dw-sep" | "se-bottleneck"
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None   # None -> (kernel - 1) // 2
    expand: int | None = None    # bottleneck expansion width (absolute channels)
    activation: str = "h-swish"  # "relu6" | "h-swish"

    def pad(self) -> int:
        return (self.kernel - 1) // 2 if self.padding is None else self.padding

    def se_squeeze(self) -> int:
        return make_divisible(self.expand / 4.0)


@dataclass(frozen=True)
class ArchConfig:
    """Declarative description of backbone + heads; drives both the forward
    pass and the analytic complexity profiler."""

    name: str
    input_size: tuple[int, int]
    blocks: tuple[BlockSpec, ...]
    latent_dim: int
    mha_heads: int = 7
    mha_embed: int = 49
    attention_dropout: float = 0.0025
    head_hidden: bool = True     # one h-swish hidden layer (width D) in each head MLP
    batchnorm: bool = False      # declared for complexity counting only

    def validate(self) -> None:
        if self.mha_embed % self.mha_heads != 0:
            raise ConfigError(
                f"attention embedding width {self.mha_embed} must be divisible "
                f"by the number of heads {self.mha_heads}")
        c, h, w = self.feature_shape()
        if h * w != self.mha_embed:
            raise ConfigError(
                f"final feature map {c}x{h}x{w} gives {h * w} spatial positions, "
                f"but the attention embedding width is {self.mha_embed}")
        for block in self.blocks:
            if block.kind in ("dw-sep", "se-bottleneck") and block.expand is None:
                raise ConfigError(f"bottleneck block needs an expansion width: {block}")
            if block.kind == "se-bottleneck" and block.se_squeeze() > block.expand:
                raise ConfigError(
                    f"SE squeeze {block.se_squeeze()} exceeds expansion {block.expand}")

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """(C, H, W) after each block, starting from the input image."""
        c, (h, w) = 3, self.input_size
        shapes = []
        for block in self.blocks:
            p, k, s = block.pad(), block.kernel, block.stride
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            c = block.out_channels
            shapes.append((c, h, w))
        return shapes

    def feature_shape(self) -> tuple[int, int, int]:
        return self.stage_shapes()[-1]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        d["blocks"] = [dataclasses.asdict(b) for b in self.blocks]
        return d

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        blocks = tuple(BlockSpec(**b) for b in d["blocks"])
        return ArchConfig(
            name=d["name"], input_size=tuple(d["input_size"]), blocks=blocks,
            latent_dim=d["latent_dim"], mha_heads=d["mha_heads"],
            mha_embed=d["mha_embed"], attention_dropout=d["attention_dropout"],
            head_hidden=d["head_hidden"], batchnorm=d["batchnorm"])


def _bneck(out, k, s, exp, se, act) -> BlockSpec:
    kind = "se-bottleneck" if se else "dw-sep"
    return BlockSpec(kind=kind, out_channels=out, kernel=k, stride=s,
                     expand=exp, activation=act)


# Stage table of the large mobile backbone at 224x224 (out, k, s, exp, se, act).
_LARGE_ROWS = [
    (16, 3, 1, 16, False, "relu6"),
    (24, 3, 2, 64, False, "relu6"),
    (24, 3, 1, 72, False, "relu6"),
    (40, 5, 2, 72, True, "relu6"),
    (40, 5, 1, 120, True, "relu6"),
    (40, 5, 1, 120, True, "relu6"),
    (80, 3, 2, 240, False, "h-swish"),
    (80, 3, 1, 200, False, "h-swish"),
    (80, 3, 1, 184, False, "h-swish"),
    (80, 3, 1, 184, False, "h-swish"),
    (112, 3, 1, 480, True, "h-swish"),
    (112, 3, 1, 672, True, "h-swish"),
    (160, 5, 2, 672, True, "h-swish"),
    (160, 5, 1, 960, True, "h-swish"),
    (160, 5, 1, 960, True, "h-swish"),
]

_SMALL_ROWS = [
    (16, 3, 2, 16, True, "relu6"),
    (24, 3, 2, 72, False, "relu6"),
    (24, 3, 1, 88, False, "relu6"),
    (40, 5, 2, 96, True, "h-swish"),
    (40, 5, 1, 240, True, "h-swish"),
    (40, 5, 1, 240, True, "h-swish"),
    (48, 5, 1, 120, True, "h-swish"),
    (48, 5, 1, 144, True, "h-swish"),
    (96, 5, 2, 288, True, "h-swish"),
    (96, 5, 1, 576, True, "h-swish"),
    (96, 5, 1, 576, True, "h-swish"),
]


def _full_scale(name: str, rows, final_channels: int) -> ArchConfig:
    blocks = [BlockSpec(kind="conv", out_channels=16, kernel=3, stride=2)]
    blocks += [_bneck(*row) for row in rows]
    blocks.append(BlockSpec(kind="conv", out_channels=final_channels, kernel=1))
    # Full-scale profiles are read by the complexity profiler; they declare the
    # reference model's plain-linear heads and normalized convolutions.
    return ArchConfig(
        name=name, input_size=(224, 224), blocks=tuple(blocks),
        latent_dim=256, head_hidden=False, batchnorm=True)


def desk_small() -> ArchConfig:
    """Four SE-bottleneck stages, 3x64x64 in, 64x7x7 out, trainable in minutes."""
    blocks = (
        BlockSpec(kind="conv", out_channels=16, kernel=3, stride=2, padding=0),
        BlockSpec(kind="se-bottleneck", out_channels=32, kernel=3, stride=2,
                  padding=0, expand=32),
        BlockSpec(kind="se-bottleneck", out_channels=48, kernel=3, stride=2,
                  padding=0, expand=64),
        BlockSpec(kind="se-bottleneck", out_channels=64, kernel=3, stride=1,
                  padding=1, expand=96),
        BlockSpec(kind="se-bottleneck", out_channels=64, kernel=3, stride=1,
                  padding=1, expand=128),
    )
    return ArchConfig(name="desk-small", input_size=(64, 64), blocks=blocks,
                      latent_dim=32)


_PROFILES = {
    "desk-small": desk_small,
    "mobilenetv3-large": lambda: _full_scale("mobilenetv3-large", _LARGE_ROWS, 960),
    "mobilenetv3-small": lambda: _full_scale("mobilenetv3-small", _SMALL_ROWS, 576),
}


def get_profile(name: str) -> ArchConfig:
    if name not in _PROFILES:
        raise ConfigError(
            f"unknown profile {name!r}; choose from {sorted(_PROFILES)}")
    cfg = _PROFILES[name]()
    cfg.validate()
    return cfg


def profile_names() -> list[str]:
    return sorted(_PROFILES)


# -- parameters -----------------------------------------------------------------


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _mlp_params(rng, prefix: str, d_in: int, d_hidden: int, d_out: int,
                hidden: bool, params: dict) -> None:
    if hidden:
        params[f"{prefix}.fc1.w"] = Tensor(_he(rng, (d_in, d_hidden), d_in), True)
        params[f"{prefix}.fc1.b"] = Tensor(np.zeros(d_hidden), True)
        d_in = d_hidden
    params[f"{prefix}.out.w"] = Tensor(_he(rng, (d_in, d_out), d_in), True)
    params[f"{prefix}.out.b"] = Tensor(np.zeros(d_out), True)


def init_params(cfg: ArchConfig, seed: int = 0) -> dict[str, Tensor]:
    """Deterministically initialize every trainable tensor of the network."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9e3779b9]))
    params: dict[str, Tensor] = {}
    c_in = 3
    for i, block in enumerate(cfg.blocks):
        tag = f"block{i}"
        if block.kind == "conv":
            k, c_out = block.kernel, block.out_channels
            params[f"{tag}.conv.w"] = Tensor(
                _he(rng, (c_out, c_in, k, k), c_in * k * k), True)
            params[f"{tag}.conv.b"] = Tensor(np.zeros(c_out), True)
        else:
            exp, k, c_out = block.expand, block.kernel, block.out_channels
            if exp != c_in:
                params[f"{tag}.expand.w"] = Tensor(
                    _he(rng, (exp, c_in, 1, 1), c_in), True)
                params[f"{tag}.expand.b"] = Tensor(np.zeros(exp), True)
            params[f"{tag}.dw.w"] = Tensor(_he(rng, (exp, k, k), k * k), True)
            params[f"{tag}.dw.b"] = Tensor(np.zeros(exp), True)
            if block.kind == "se-bottleneck":
                sq = block.se_squeeze()
                params[f"{tag}.se.fc1.w"] = Tensor(_he(rng, (exp, sq), exp), True)
                params[f"{tag}.se.fc1.b"] = Tensor(np.zeros(sq), True)
                params[f"{tag}.se.fc2.w"] = Tensor(_he(rng, (sq, exp), sq), True)
                params[f"{tag}.se.fc2.b"] = Tensor(np.zeros(exp), True)
            params[f"{tag}.project.w"] = Tensor(
                _he(rng, (c_out, exp, 1, 1), exp), True)
            params[f"{tag}.project.b"] = Tensor(np.zeros(c_out), True)
        c_in = block.out_channels

    c_f, _, _ = cfg.feature_shape()
    d, e = cfg.latent_dim, cfg.mha_embed
    _mlp_params(rng, "enc_t", c_f, d, d, cfg.head_hidden, params)
    _mlp_params(rng, "enc_r", c_f, d, d, cfg.head_hidden, params)
    _mlp_params(rng, "head_t", d, d, 3, cfg.head_hidden, params)
    _mlp_params(rng, "head_v", d, d, e, cfg.head_hidden, params)
    for proj in ("q", "k", "v", "out"):
        params[f"mha.{proj}.w"] = Tensor(_he(rng, (e, e), e), True)
        params[f"mha.{proj}.b"] = Tensor(np.zeros(e), True)
    _mlp_params(rng, "head_q", e, d, 4, cfg.head_hidden, params)
    # identity-rotation bias keeps the normalized quaternion well defined at init
    params["head_q.out.b"] = Tensor(np.array([1.0, 0.0, 0.0, 0.0]), True)
    return params


# -- forward passes ---------------------------------------------------------------


def se_block(feature: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Channelwise gate: h_sigmoid(dense(relu(dense(GAP(F))))) applied to F."""
    c = feature.shape[-3]
    if w1.shape[0] != c:
        raise ConfigError(
            f"SE weights expect {w1.shape[0]} channels, feature has {c}")
    single = feature.ndim == 3
    batch = feature.reshape(1, *feature.shape) if single else feature
    pooled = global_avg_pool(batch)
    gate = h_sigmoid(dense(dense(pooled, w1, b1).relu(), w2, b2))
    gated = batch * gate.reshape(batch.shape[0], c, 1, 1)
    return gated.reshape(*feature.shape) if single else gated


def _activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu6":
        return x.relu6()
    if kind == "h-swish":
        return h_swish(x)
    raise ConfigError(f"unknown activation {kind!r}")


def backbone_forward(params: dict[str, Tensor], image: Tensor, cfg: ArchConfig) -> Tensor:
    """Run the stage list on a [3,H,W] image or [N,3,H,W] batch."""
    h, w = cfg.input_size
    if image.shape[-3:] != (3, h, w):
        raise ConfigError(
            f"image shape {tuple(image.shape)} does not match configured "
            f"input 3x{h}x{w}")
    x = image
    c_in = 3
    for i, block in enumerate(cfg.blocks):
        tag = f"block{i}"
        if block.kind == "conv":
            x = conv2d(x, params[f"{tag}.conv.w"], params[f"{tag}.conv.b"],
                       stride=block.stride, padding=block.pad())
            x = _activate(x, block.activation)
        else:
            residual = x if (block.stride == 1 and c_in == block.out_channels) else None
            y = x
            if f"{tag}.expand.w" in params:
                y = conv2d(y, params[f"{tag}.expand.w"], params[f"{tag}.expand.b"])
                y = _activate(y, block.activation)
            y = depthwise_conv2d(y, params[f"{tag}.dw.w"], params[f"{tag}.dw.b"],
                                 stride=block.stride, padding=block.pad())
            y = _activate(y, block.activation)
            if block.kind == "se-bottleneck":
                y = se_block(y, params[f"{tag}.se.fc1.w"], params[f"{tag}.se.fc1.b"],
                             params[f"{tag}.se.fc2.w"], params[f"{tag}.se.fc2.b"])
            y = conv2d(y, params[f"{tag}.project.w"], params[f"{tag}.project.b"])
            x = y + residual if residual is not None else y
        c_in = block.out_channels
    return x


def _mlp(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    if f"{prefix}.fc1.w" in params:
        x = h_swish(dense(x, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    return dense(x, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def encode_latents(feature: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """GAP then separate translation/rotation MLPs. Returns ([N,D], [N,D])."""
    pooled = global_avg_pool(feature)
    if pooled.ndim == 1:
        pooled = pooled.reshape(1, -1)
    return _mlp(params, "enc_t", pooled), _mlp(params, "enc_r", pooled)


def translation_head(latent_t: Tensor, params: dict[str, Tensor]) -> Tensor:
    return _mlp(params, "head_t", latent_t)


def rotation_head(latent_r: Tensor, feature: Tensor, params: dict[str, Tensor],
                  cfg: ArchConfig, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> Tensor:
    """Single-token multi-head attention over (SMP, SAP, V-MLP), then a quaternion MLP.

    With one token per sequence the softmax over keys is identically 1, so the
    output does not depend on the Q/K values; the projections still exist and
    are counted. Attention dropout applies to the attention weight in train mode.
    """
    e, heads = cfg.mha_embed, cfg.mha_heads
    head_width = e // heads
    query = spatial_channel_max_pool(feature)
    key = spatial_channel_avg_pool(feature)
    if query.ndim == 1:
        query = query.reshape(1, -1)
        key = key.reshape(1, -1)
    if query.shape[1] != e:
        raise ConfigError(
            f"feature map provides {query.shape[1]} spatial positions, "
            f"attention expects {e}")
    value = _mlp(params, "head_v", latent_r)
    n = value.shape[0]

    q = dense(query, params["mha.q.w"], params["mha.q.b"]).reshape(n, heads, head_width)
    k = dense(key, params["mha.k.w"], params["mha.k.b"]).reshape(n, heads, head_width)
    v = dense(value, params["mha.v.w"], params["mha.v.b"]).reshape(n, heads, head_width)

    scores = (q * k).sum(axis=2, keepdims=True) * (1.0 / np.sqrt(head_width))
    attn = softmax(scores, axis=-1)            # single key: exactly ones
    if mode == "train" and cfg.attention_dropout > 0.0:
        if rng is None:
            raise ConfigError("train-mode rotation head needs an rng for dropout")
        keep = 1.0 - cfg.attention_dropout
        mask = (rng.random((n, heads, 1)) < keep) / keep
        attn = attn * mask
    att_out = (attn * v).reshape(n, e)
    att_out = dense(att_out, params["mha.out.w"], params["mha.out.b"])
    return _mlp(params, "head_q", att_out)


class BranchOutput(NamedTuple):
    pose: Tensor          # [N, 7] = [t, q]
    latent_t: Tensor      # [N, D]
    latent_r: Tensor      # [N, D]
    feature: Tensor       # [N, C_f, H_f, W_f]


def apr_forward(params: dict[str, Tensor], image: Tensor, cfg: ArchConfig,
                mode: str = "eval",
                rng: np.random.Generator | None = None) -> BranchOutput:
    """Backbone -> latents -> heads. Eval mode emits a unit, w>=0 quaternion."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    single = image.ndim == 3
    batch = image.reshape(1, *image.shape) if single else image
    feature = backbone_forward(params, batch, cfg)
    latent_t, latent_r = encode_latents(feature, params)
    t = translation_head(latent_t, params)
    q = rotation_head(latent_r, feature, params, cfg, mode=mode, rng=rng)
    if mode == "eval":
        norm = (q * q).sum(axis=1, keepdims=True).sqrt()
        q = q / norm
        sign = np.where(q.data[:, :1] < 0.0, -1.0, 1.0)
        q = q * sign
    pose = Tensor.concat([t, q], axis=1)
    if single:
        pose = pose.reshape(7)
    return BranchOutput(pose, latent_t, latent_r, feature)


# -- model container + checkpoint format ------------------------------------------


@dataclass
class LearnableScales:
    """Loss-balancing log-scales learned jointly with the network."""

    s_x: Tensor
    s_q: Tensor


class AprModel:
    """One parameter set serving any number of shared-weight branches."""

    def __init__(self, config: ArchConfig, seed: int = 0,
                 preprocess: dict | None = None):
        config.validate()
        self.config = config
        self.params = init_params(config, seed)
        self.scales = LearnableScales(Tensor(0.0, True), Tensor(-3.0, True))
        self.preprocess = preprocess or {"short_side": 72, "crop": config.input_size[0]}

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out["scales.s_x"] = self.scales.s_x
        out["scales.s_q"] = self.scales.s_q
        return out

    def num_params(self) -> int:
        return sum(p.data.size for p in self.trainable().values())

    def forward(self, image: Tensor, mode: str = "eval",
                rng: np.random.Generator | None = None) -> BranchOutput:
        return apr_forward(self.params, image, self.config, mode=mode, rng=rng)

    def save(self, path) -> None:
        order = sorted(self.params)
        header = {
            "format": CHECKPOINT_FORMAT,
            "arch": self.config.to_dict(),
            "scales": {"s_x": self.scales.s_x.item(), "s_q": self.scales.s_q.item()},
            "preprocess": self.preprocess,
            "params": [{"path": k, "shape": list(self.params[k].shape)} for k in order],
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for key in order:
                fh.write(self.params[key].data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "AprModel":
        with open(path, "rb") as fh:
            header_len = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(header_len).decode())
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ConfigError(
                    f"unsupported checkpoint format {header.get('format')!r}, "
                    f"expected {CHECKPOINT_FORMAT!r}")
            model = cls.__new__(cls)
            model.config = ArchConfig.from_dict(header["arch"])
            model.config.validate()
            model.preprocess = header["preprocess"]
            model.params = {}
            for entry in header["params"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * 8)
                data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
                model.params[entry["path"]] = Tensor(data, True)
            model.scales = LearnableScales(
                Tensor(header["scales"]["s_x"], True),
                Tensor(header["scales"]["s_q"], True))
        return model
