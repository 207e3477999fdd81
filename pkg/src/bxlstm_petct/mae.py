"""Masked-autoencoder pretraining: cube masking, masked MSE, and the pretraining loop."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .autodiff import Tensor, tsum, use_tape
from .data import PatchSampler, load_samples
from .errors import DivergedLoss, EmptyMask, IndivisiblePatch, InvalidConfig, ShapeMismatch
from .network import NetworkConfig, build_mae, save_checkpoint
from .optim import SGD, poly_lr
from .phantom import read_manifest


@dataclass
class MaeConfig:
    mask_patch: int = 4
    mask_ratio: float = 0.6
    fill_value: float = 0.0
    lr: float = 1e-2
    momentum: float = 0.99
    weight_decay: float = 3e-5
    batch_size: int = 1
    seed: int = 0

    def validate(self) -> "MaeConfig":
        if self.mask_patch < 1:
            raise InvalidConfig("mask_patch must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise InvalidConfig(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.lr <= 0 or self.batch_size < 1:
            raise InvalidConfig("lr and batch_size must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MaeConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidConfig(f"unknown MAE config keys: {sorted(unknown)}")
        return cls(**d)


def n_masked_cubes(n_cubes: int, ratio: float) -> int:
    # round half up, so 0.5 * 5 masks 3 cubes rather than banker's 2
    return int(math.floor(ratio * n_cubes + 0.5))


def mask_volume(x: np.ndarray, cfg: MaeConfig, rng: np.random.Generator):
    """Blank ``round(ratio * n_cubes)`` random cubes of ``x[N,C,D,H,W]`` per sample.

    Returns ``(x_masked, indicator)`` with ``indicator[N,D,H,W]`` equal to 1 on blanked voxels.
    """
    if x.ndim != 5:
        raise ShapeMismatch(f"expected [N,C,D,H,W], got {x.shape}")
    p = cfg.mask_patch
    spatial = x.shape[2:]
    if any(s % p for s in spatial):
        raise IndivisiblePatch(f"cube side {p} does not divide {spatial}")
    grid = tuple(s // p for s in spatial)
    n_cubes = int(np.prod(grid))
    k = n_masked_cubes(n_cubes, cfg.mask_ratio)
    indicator = np.zeros((x.shape[0],) + spatial, dtype=np.float32)
    for i in range(x.shape[0]):
        chosen = np.zeros(n_cubes, dtype=np.float32)
        chosen[rng.choice(n_cubes, size=k, replace=False)] = 1
        cubes = chosen.reshape(grid)
        indicator[i] = cubes.repeat(p, 0).repeat(p, 1).repeat(p, 2)
    masked = np.where(indicator[:, None] > 0, np.float32(cfg.fill_value), x).astype(x.dtype)
    return masked, indicator


def mae_loss(recon: Tensor, target, indicator) -> Tensor:
    """Mean squared error over masked voxels of all channels."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    indicator = np.asarray(indicator)
    if recon.shape != target.shape:
        raise ShapeMismatch(f"recon {recon.shape} vs target {target.shape}")
    full = np.broadcast_to(indicator[:, None] if indicator.ndim == recon.ndim - 1 else indicator, recon.shape)
    count = int(np.count_nonzero(full))
    if count == 0:
        raise EmptyMask("mask indicator selects no voxels")
    m = Tensor(np.ascontiguousarray(full, dtype=recon.dtype))
    diff = (recon - Tensor(target.astype(recon.dtype))) * m
    return tsum(diff * diff) * (1.0 / count)


def pretrain(
    corpus_dir,
    net_cfg: NetworkConfig,
    mae_cfg: MaeConfig,
    steps: int,
    out_ckpt,
    log_path=None,
    names=None,
    progress=None,
) -> list[dict]:
    """Train the MAE model for ``steps`` updates and write an ``mae_pretrained`` checkpoint.

    Patches are random crops with flips as the only augmentation.  Returns
    the per-step log rows ``{"step", "loss", "pet_present"}``; the same rows
    go to ``log_path`` as CSV.
    """
    mae_cfg.validate()
    net_cfg.validate()
    names = list(read_manifest(corpus_dir)["cases"] if names is None else names)
    model = build_mae(net_cfg)
    log: list[dict] = []
    if steps > 0:
        samples = load_samples(corpus_dir, names)
        flips_only = dataclasses.replace(AugmentConfig.disabled(), p_flip=0.5)
        sampler = PatchSampler(samples, net_cfg.patch_dims, mae_cfg.seed, flips_only, fg_p=0.0)
        mask_rng = np.random.Generator(np.random.Philox(key=[mae_cfg.seed & (2**64 - 1), 0x4D41]))
        opt = SGD(model.parameters(), lr=mae_cfg.lr, momentum=mae_cfg.momentum, weight_decay=mae_cfg.weight_decay)
        for step in range(steps):
            images, _, picked = sampler.draw(mae_cfg.batch_size)
            masked, indicator = mask_volume(images, mae_cfg, mask_rng)
            opt.zero_grad()
            with use_tape() as tape:
                loss = mae_loss(model(Tensor(masked)), images, indicator)
                value = float(loss.item())
                if not np.isfinite(value):
                    raise DivergedLoss(f"MAE loss became {value} at step {step}")
                tape.backward(loss)
            opt.step(poly_lr(mae_cfg.lr, step, steps))
            row = {"step": step, "loss": value, "pet_present": int(all(s.pet_present for s in picked))}
            log.append(row)
            if progress is not None:
                progress(row)
    save_checkpoint(model, out_ckpt, "mae_pretrained")
    if log_path is not None:
        write_log(log, log_path, ("step", "loss", "pet_present"))
    return log


def write_log(rows: list[dict], path, columns) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_config_json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}
