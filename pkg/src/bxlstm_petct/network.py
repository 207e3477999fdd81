"""BiXLSTM-ResNet U-Net: ResNet encoder, optional xLSTM blocks, conv decoder.

Parameters are initialised from ``(seed, crc32(name))``, so two models built
with the same seed share every identically-named parameter regardless of
which extra blocks (e.g. xLSTM placements) the other one carries.
"""
from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, concat
from .errors import IncompatibleInit, InvalidConfig, ShapeConflict, ShapeMismatch, VersionMismatch
from .layers import Conv, ConvNormAct, Module, ResBlock, Upsample
from .xlstm import BiXlstmBlock

PLACEMENTS = ("none", "enc", "bot")
_PLACEMENT_ALIASES = {"none_bottleneck_baseline": "bot", "plain": "none"}

CHECKPOINT_MAGIC = b"VXLS"
CHECKPOINT_VERSION = 1
STAGE_TAGS = ("mae_pretrained", "finetuned")

FULL_SCALE_PATCH = (128, 192, 160)
# a quarter of the full-scale patch per axis, keeping its 4:6:5 aspect
DESK_PATCH = tuple(p // 4 for p in FULL_SCALE_PATCH)


@dataclass
class NetworkConfig:
    in_channels: int = 2
    n_classes: int = 2
    stages: int = 4
    base_channels: int = 8
    max_channels: int = 320
    blocks_per_stage: int = 1
    xlstm_placement: str = "bot"
    patch_dims: tuple = DESK_PATCH
    upsample: str = "transposed"
    deep_supervision: bool = False
    seed: int = 0

    def __post_init__(self):
        self.patch_dims = tuple(int(p) for p in self.patch_dims)
        self.xlstm_placement = _PLACEMENT_ALIASES.get(self.xlstm_placement, self.xlstm_placement)

    @classmethod
    def full_scale(cls, **overrides) -> "NetworkConfig":
        """The challenge-scale configuration: six stages at a 128x192x160 patch."""
        return cls(**{"stages": 6, "base_channels": 32, "patch_dims": FULL_SCALE_PATCH, **overrides})

    def validate(self):
        if self.xlstm_placement not in PLACEMENTS:
            raise InvalidConfig(f"xlstm_placement must be one of {PLACEMENTS}, got {self.xlstm_placement!r}")
        if self.stages < 1 or self.base_channels < 1 or self.blocks_per_stage < 0:
            raise InvalidConfig("stages, base_channels must be >= 1 and blocks_per_stage >= 0")
        if self.deep_supervision:
            raise InvalidConfig("deep supervision is not implemented")
        if len(self.patch_dims) != 3:
            raise InvalidConfig(f"patch_dims must have 3 entries, got {self.patch_dims}")
        f = self.divisor
        if any(p % f for p in self.patch_dims):
            raise InvalidConfig(f"patch_dims {self.patch_dims} not divisible by {f}")
        return self

    @property
    def divisor(self) -> int:
        return 2 ** (self.stages - 1)

    def channels(self, stage: int) -> int:
        return min(self.base_channels * 2**stage, self.max_channels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_dims"] = list(self.patch_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidConfig(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    def encoder_signature(self) -> dict:
        d = self.to_dict()
        for key in ("n_classes", "patch_dims", "upsample", "deep_supervision", "seed"):
            d.pop(key)
        return d


class EncoderStage(Module):
    def __init__(self, rng, cfg: NetworkConfig, s: int):
        cin = cfg.in_channels if s == 0 else cfg.channels(s - 1)
        cout = cfg.channels(s)
        self.down = ConvNormAct(rng, cin, cout, stride=1 if s == 0 else 2)
        self.blocks = [ResBlock(rng, cout) for _ in range(cfg.blocks_per_stage)]
        last = s == cfg.stages - 1
        if cfg.xlstm_placement == "enc" or (cfg.xlstm_placement == "bot" and last):
            self.xlstm = BiXlstmBlock(rng, cout)

    def __call__(self, x):
        x = self.down(x)
        for block in self.blocks:
            x = block(x)
        if hasattr(self, "xlstm"):
            x = self.xlstm(x)
        return x


class Encoder(Module):
    def __init__(self, rng, cfg: NetworkConfig):
        self.stages = [EncoderStage(rng, cfg, s) for s in range(cfg.stages)]

    def __call__(self, x) -> list:
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        return skips


class DecoderStage(Module):
    def __init__(self, rng, cfg: NetworkConfig, s: int, n_convs: int):
        c = cfg.channels(s)
        self.up = Upsample(rng, cfg.channels(s + 1), c, cfg.upsample)
        self.convs = [ConvNormAct(rng, 2 * c if i == 0 else c, c) for i in range(n_convs)]

    def __call__(self, x, skip):
        x = concat([self.up(x), skip], axis=1)
        for conv in self.convs:
            x = conv(x)
        return x


class Decoder(Module):
    """Mirrors the encoder: upsample, concatenate the skip, ``n_convs`` conv blocks per level."""

    def __init__(self, rng, cfg: NetworkConfig, n_convs: int = 2):
        self.stages = [DecoderStage(rng, cfg, s, n_convs) for s in reversed(range(cfg.stages - 1))]

    def __call__(self, skips):
        x = skips[-1]
        for stage, skip in zip(self.stages, reversed(skips[:-1])):
            x = stage(x, skip)
        return x


class UNet(Module):
    """Shared encoder + decoder + 1x1x1 head.  ``kind`` is "segmentation" or "mae"."""

    def __init__(self, cfg: NetworkConfig, kind: str = "segmentation"):
        cfg.validate()
        self._config = cfg
        self._kind = kind
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(rng, cfg)
        if kind == "segmentation":
            self.decoder = Decoder(rng, cfg, n_convs=2)
            self.head = Conv(rng, cfg.channels(0), cfg.n_classes, kernel=1)
        elif kind == "mae":
            self.decoder = Decoder(rng, cfg, n_convs=1)
            self.head = Conv(rng, cfg.channels(0), cfg.in_channels, kernel=1)
        else:
            raise InvalidConfig(f"unknown model kind {kind!r}")
        reinitialize(self, cfg.seed)

    @property
    def config(self) -> NetworkConfig:
        return self._config

    @property
    def kind(self) -> str:
        return self._kind

    def check_input(self, x: Tensor):
        cfg = self._config
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ShapeMismatch(f"expected [N,{cfg.in_channels},D,H,W] input, got {x.shape}")
        if any(s % cfg.divisor for s in x.shape[2:]):
            raise ShapeMismatch(f"spatial dims {x.shape[2:]} not divisible by {cfg.divisor}")

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x)
        return self.head(self.decoder(self.encoder(x)))


def reinitialize(model: Module, seed: int):
    """He-normal weights drawn from a generator keyed on (seed, crc32(name)); biases/norms keep 0/1."""
    for name, p in model.named_parameters():
        fan_in = getattr(p, "_fan_in", None)
        if fan_in is None:
            continue
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        p.data = (rng.standard_normal(p.shape) * np.sqrt(2.0 / fan_in)).astype(p.dtype)


def build(config: NetworkConfig) -> UNet:
    return UNet(config, "segmentation")


def build_mae(config: NetworkConfig) -> UNet:
    return UNet(config, "mae")


def forward(model: UNet, x: Tensor) -> Tensor:
    return model.forward(x)


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: UNet, path, stage_tag: str):
    if stage_tag not in STAGE_TAGS:
        raise ValueError(f"stage_tag must be one of {STAGE_TAGS}")
    directory, payloads, offset = [], [], 0
    for name, p in model.named_parameters():
        buf = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(buf)})
        payloads.append(buf)
        offset += len(buf)
    header = {
        "stage": stage_tag,
        "model": model.kind,
        "config": model.config.to_dict(),
        "params": directory,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for buf in payloads:
            fh.write(buf)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into ``(header, {name: float32 array})``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise VersionMismatch(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(raw[12 : 12 + hlen].decode())
    payload = raw[12 + hlen :]
    params = {}
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name in params:
            raise ShapeConflict(f"duplicate parameter {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        start = entry["offset"]
        if entry["nbytes"] != nbytes or start + nbytes > len(payload):
            raise ShapeConflict(f"payload for {name!r} does not match shape {shape}")
        params[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape).astype(np.float32)
    return header, params


def load_checkpoint(path) -> UNet:
    header, params = read_checkpoint(path)
    model = UNet(NetworkConfig.from_dict(header["config"]), header.get("model", "segmentation"))
    own = dict(model.named_parameters())
    if set(own) != set(params):
        raise ShapeConflict(f"{path}: parameter names do not match the stored config")
    for name, p in own.items():
        if p.shape != params[name].shape:
            raise ShapeConflict(f"{name}: stored {params[name].shape}, model {p.shape}")
        p.data = params[name]
    model.stage_tag = header["stage"]
    return model


def load_encoder(model: UNet, path) -> dict:
    """Copy every ``encoder.`` parameter of a checkpoint into ``model``.

    Returns ``{"copied": [...], "fresh": [...]}`` naming the transferred and the
    untouched (freshly initialised) parameters.
    """
    header, params = read_checkpoint(path)
    src_cfg = NetworkConfig.from_dict(header["config"])
    if src_cfg.encoder_signature() != model.config.encoder_signature():
        raise IncompatibleInit("checkpoint encoder config differs from the model's")
    own = dict(model.named_parameters())
    enc_src = {n for n in params if n.startswith("encoder.")}
    enc_own = {n for n in own if n.startswith("encoder.")}
    if enc_src != enc_own:
        raise IncompatibleInit(f"encoder parameter names differ: {sorted(enc_src ^ enc_own)[:5]}")
    for name in sorted(enc_own):
        if own[name].shape != params[name].shape:
            raise ShapeConflict(f"{name}: checkpoint {params[name].shape}, model {own[name].shape}")
    for name in enc_own:
        own[name].data = params[name].astype(own[name].dtype)
    return {"copied": sorted(enc_own), "fresh": sorted(set(own) - enc_own)}
