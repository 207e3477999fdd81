"""Volumes on disk (``.vvol``), resampling and intensity normalization.

A ``.vvol`` file is one JSON header line followed by the raw little-endian
float32 payload in C order::

    {"dims": [D, H, W], "spacing": [sd, sh, sw], "kind": "CT", "dtype": "<f4"}\\n<payload>
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DegenerateVolume, InvalidSpacing, MalformedHeader, SizeMismatch, UnalignedCase

KINDS = ("CT", "PET", "MASK")
BODY_THRESHOLD = -500.0
CLIP_PERCENTILES = (0.5, 99.5)


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple
    kind: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if len(self.spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in self.spacing):
            raise InvalidSpacing(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))


@dataclass
class Case:
    name: str
    ct: Volume
    pet: Volume
    mask: Volume | None = None

    def volumes(self) -> list[Volume]:
        return [v for v in (self.ct, self.pet, self.mask) if v is not None]

    def check_aligned(self):
        ref = self.ct
        for v in self.volumes()[1:]:
            if v.dims != ref.dims or not np.allclose(v.spacing, ref.spacing):
                raise UnalignedCase(f"{self.name}: {v.kind} {v.dims}@{v.spacing} vs CT {ref.dims}@{ref.spacing}")
        return self

    def image(self) -> np.ndarray:
        """``[2, D, H, W]`` float32 stack, CT first."""
        return np.stack([self.ct.data, self.pet.data])


def write_volume(volume: Volume, path) -> None:
    header = {
        "dims": list(volume.dims),
        "spacing": list(volume.spacing),
        "kind": volume.kind,
        "dtype": "<f4",
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())


def _parse_header(line: bytes, path) -> dict:
    try:
        header = json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{path}: header is not JSON ({exc})") from None
    if not isinstance(header, dict):
        raise MalformedHeader(f"{path}: header must be a JSON object")
    for key in ("dims", "spacing", "kind"):
        if key not in header:
            raise MalformedHeader(f"{path}: header lacks {key!r}")
    dims, spacing = header["dims"], header["spacing"]
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims)):
        raise MalformedHeader(f"{path}: dims must be three positive integers, got {dims}")
    if not (
        isinstance(spacing, list)
        and len(spacing) == 3
        and all(isinstance(s, (int, float)) and s > 0 and np.isfinite(s) for s in spacing)
    ):
        raise MalformedHeader(f"{path}: spacing must be three positive numbers, got {spacing}")
    if header["kind"] not in KINDS:
        raise MalformedHeader(f"{path}: unknown kind {header['kind']!r}")
    if header.get("dtype", "<f4") != "<f4":
        raise MalformedHeader(f"{path}: unsupported dtype {header['dtype']!r}")
    return header


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise MalformedHeader(f"{path}: no header line")
    header = _parse_header(raw[:nl], path)
    payload = raw[nl + 1 :]
    dims = tuple(header["dims"])
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise SizeMismatch(f"{path}: payload has {len(payload)} bytes, dims {dims} need {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return Volume(data, tuple(header["spacing"]), header["kind"])


def resampled_dims(dims, spacing, target) -> tuple:
    return tuple(max(1, int(round(d * s / t))) for d, s, t in zip(dims, spacing, target))


def resample(volume: Volume, target_spacing) -> Volume:
    """Trilinear for CT/PET, nearest for MASK; voxel centres keep their physical positions."""
    target = tuple(float(t) for t in np.broadcast_to(np.asarray(target_spacing, dtype=float), (3,)))
    if not all(t > 0 and np.isfinite(t) for t in target):
        raise InvalidSpacing(f"target spacing must be positive, got {target}")
    return resample_to(volume, resampled_dims(volume.dims, volume.spacing, target), target)


def resample_to(volume: Volume, new_dims, spacing) -> Volume:
    """Resample onto an explicit grid covering the same physical extent."""
    new_dims = tuple(int(n) for n in new_dims)
    spacing = tuple(float(t) for t in spacing)
    if new_dims == volume.dims and np.allclose(spacing, volume.spacing):
        return Volume(volume.data.copy(), volume.spacing, volume.kind)
    axes = [
        (np.arange(n) + 0.5) * (old / n) - 0.5
        for n, old in zip(new_dims, volume.dims)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    order = 0 if volume.kind == "MASK" else 1
    data = ndimage.map_coordinates(volume.data, coords, order=order, mode="nearest")
    return Volume(data, spacing, volume.kind)


def body_mask(ct: np.ndarray) -> np.ndarray:
    return ct > BODY_THRESHOLD


def normalize(volume: Volume, body: np.ndarray | None = None) -> Volume:
    """CT: clip to body percentiles then z-score by the body population; PET: z-score.

    ``body`` overrides the CT body selection. Raw CT picks voxels above the
    air threshold; passing the mask used on the first application makes
    normalization idempotent on its own output.
    """
    if volume.kind == "MASK":
        return volume
    x = volume.data.astype(np.float64)
    if volume.kind == "CT":
        sel = body_mask(volume.data) if body is None else np.asarray(body, dtype=bool)
        pop = x[sel]
        if pop.size == 0:
            raise DegenerateVolume("CT volume has no body voxels")
        lo, hi = np.percentile(pop, CLIP_PERCENTILES)
        x = np.clip(x, lo, hi)
        pop = x[sel]
    else:
        pop = x.ravel()
    mu, sd = pop.mean(), pop.std()
    if not sd >= 1e-8:
        raise DegenerateVolume(f"{volume.kind} volume is constant (std {sd:.3g})")
    return Volume(((x - mu) / sd).astype(np.float32), volume.spacing, volume.kind)


def preprocess_case(case: Case, target_spacing=(1.0, 1.0, 1.0)) -> Case:
    """Resample every volume onto ``target_spacing`` and normalize CT and PET."""
    vols = {k: getattr(case, k) for k in ("ct", "pet", "mask")}
    vols = {k: None if v is None else resample(v, target_spacing) for k, v in vols.items()}
    body = body_mask(vols["ct"].data)
    ct = normalize(vols["ct"], body)
    pet = vols["pet"]
    if np.ptp(pet.data) > 0:
        pet = normalize(pet)
    out = Case(case.name, ct, pet, vols["mask"])
    return out.check_aligned()


def case_paths(corpus_dir, name) -> dict:
    d = Path(corpus_dir)
    return {k: d / f"{name}_{k}.vvol" for k in ("ct", "pet", "mask")}


def read_case(corpus_dir, name) -> Case:
    paths = case_paths(corpus_dir, name)
    mask = read_volume(paths["mask"]) if paths["mask"].exists() else None
    return Case(name, read_volume(paths["ct"]), read_volume(paths["pet"]), mask).check_aligned()


def write_case(case: Case, corpus_dir) -> None:
    paths = case_paths(corpus_dir, case.name)
    write_volume(case.ct, paths["ct"])
    write_volume(case.pet, paths["pet"])
    if case.mask is not None:
        write_volume(case.mask, paths["mask"])


def with_data(volume: Volume, data) -> Volume:
    return replace(volume, data=np.asarray(data, dtype=np.float32))
