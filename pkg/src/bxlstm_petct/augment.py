"""Joint spatial + intensity augmentation of (image, mask) pairs and patch cropping.

Spatial transforms act identically on every image channel (trilinear) and on
the mask (nearest).  Intensity transforms touch the image only.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InvalidConfig, UnalignedCase
from .volume_io import Case, with_data


@dataclass
class AugmentConfig:
    p_rotation: float = 0.2
    max_rotation_deg: float = 15.0
    p_flip: float = 0.5
    p_scale: float = 0.2
    scale_range: tuple = (0.85, 1.25)
    p_elastic: float = 0.2
    elastic_sigma: float = 8.0
    elastic_max_disp: float = 4.0
    p_brightness: float = 0.15
    brightness_range: tuple = (-0.2, 0.2)
    p_gamma: float = 0.15
    gamma_range: tuple = (0.7, 1.5)

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.brightness_range = tuple(float(v) for v in self.brightness_range)
        self.gamma_range = tuple(float(v) for v in self.gamma_range)
        for f in dataclasses.fields(self):
            if f.name.startswith("p_") and not 0.0 <= getattr(self, f.name) <= 1.0:
                raise InvalidConfig(f"{f.name} must lie in [0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(**{f.name: 0.0 for f in dataclasses.fields(cls) if f.name.startswith("p_")})

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidConfig(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "AugmentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


def _rotation_matrix(angles_rad) -> np.ndarray:
    r = np.eye(3)
    for axis, a in enumerate(angles_rad):
        i, j = [k for k in range(3) if k != axis]
        m = np.eye(3)
        m[i, i] = m[j, j] = np.cos(a)
        m[i, j], m[j, i] = -np.sin(a), np.sin(a)
        r = m @ r
    return r


def _elastic_field(rng, shape, sigma, max_disp) -> np.ndarray:
    field = np.stack([ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="nearest") for _ in range(3)])
    peak = np.abs(field).max()
    magnitude = rng.uniform(0, max_disp)
    return field * (magnitude / peak) if peak > 0 else field


def spatial_coords(shape, matrix=None, displacement=None) -> np.ndarray:
    """Sampling coordinates ``[3, D, H, W]``: ``matrix`` about the centre, then ``displacement``."""
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))
    centre = (np.array(shape, dtype=np.float64) - 1) / 2
    coords = grid
    if matrix is not None:
        rel = grid.reshape(3, -1) - centre[:, None]
        coords = (matrix @ rel + centre[:, None]).reshape(grid.shape)
    if displacement is not None:
        coords = coords + displacement
    return coords


def warp(image: np.ndarray, mask: np.ndarray | None, coords: np.ndarray):
    img = np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="nearest") for ch in image]).astype(image.dtype)
    if mask is None:
        return img, None
    m = ndimage.map_coordinates(mask, coords, order=0, mode="nearest").astype(mask.dtype)
    return img, m


def _gamma(ch: np.ndarray, gamma: float) -> np.ndarray:
    lo, hi = ch.min(), ch.max()
    if hi <= lo:
        return ch
    unit = (ch - lo) / (hi - lo)
    return (np.sign(unit) * np.abs(unit) ** gamma * (hi - lo) + lo).astype(ch.dtype)


def augment_arrays(image: np.ndarray, mask: np.ndarray | None, rng: np.random.Generator, cfg: AugmentConfig):
    """Augment ``image[C,D,H,W]`` and ``mask[D,H,W]`` with draws from ``rng``.

    All scalar parameters are drawn up front whether or not their transform
    fires; only the elastic noise field is drawn on demand.
    """
    if mask is not None and mask.shape != image.shape[1:]:
        raise UnalignedCase(f"image {image.shape} and mask {mask.shape} are not aligned")
    shape = image.shape[1:]
    u = rng.uniform(size=4)
    angles = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, 3))
    scale = rng.uniform(*cfg.scale_range)
    flips = rng.uniform(size=3) < cfg.p_flip
    brightness = rng.uniform(*cfg.brightness_range)
    gammas = rng.uniform(*cfg.gamma_range, size=image.shape[0])
    u_int = rng.uniform(size=2)

    matrix = None
    if u[0] < cfg.p_rotation:
        matrix = _rotation_matrix(angles)
    if u[1] < cfg.p_scale:
        # sampling at coords / scale magnifies the content by ``scale``
        matrix = (np.eye(3) if matrix is None else matrix) / scale
    displacement = None
    if u[2] < cfg.p_elastic:
        displacement = _elastic_field(rng, shape, cfg.elastic_sigma, cfg.elastic_max_disp)

    image, mask = image.copy(), None if mask is None else mask.copy()
    if matrix is not None or displacement is not None:
        image, mask = warp(image, mask, spatial_coords(shape, matrix, displacement))
    for axis, do in enumerate(flips):
        if do:
            image = np.flip(image, axis + 1)
            mask = None if mask is None else np.flip(mask, axis)
    image = np.ascontiguousarray(image)
    mask = None if mask is None else np.ascontiguousarray(mask)
    if u_int[0] < cfg.p_brightness:
        image = (image + image.dtype.type(brightness)).astype(image.dtype)
    if u_int[1] < cfg.p_gamma:
        image = np.stack([_gamma(ch, g) for ch, g in zip(image, gammas)])
    return image, mask


def augment(case: Case, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> Case:
    case.check_aligned()
    cfg = cfg or AugmentConfig()
    mask = None if case.mask is None else case.mask.data
    image, mask = augment_arrays(case.image(), mask, rng, cfg)
    return Case(
        case.name,
        with_data(case.ct, image[0]),
        with_data(case.pet, image[1]),
        None if mask is None else with_data(case.mask, mask),
    )


def crop_patch(
    image: np.ndarray,
    mask: np.ndarray | None,
    patch_dims,
    rng: np.random.Generator,
    fg_p: float = 0.5,
):
    """Crop ``patch_dims`` from ``image[C,D,H,W]`` (and mask), edge-padding small volumes.

    With probability ``fg_p`` and a nonempty mask the patch is centred on a
    uniformly chosen foreground voxel (clamped to stay inside the volume).
    """
    patch = tuple(int(p) for p in patch_dims)
    shape = image.shape[1:]
    if any(s < p for s, p in zip(shape, patch)):
        extra = [max(0, p - s) for s, p in zip(shape, patch)]
        pads = [(e // 2, e - e // 2) for e in extra]
        image = np.pad(image, [(0, 0)] + pads, mode="edge")
        if mask is not None:
            mask = np.pad(mask, pads, mode="edge")
        shape = image.shape[1:]
    want_fg = rng.uniform() < fg_p
    fg = None
    if want_fg and mask is not None:
        fg = np.flatnonzero(mask)
    if fg is not None and fg.size:
        centre = np.unravel_index(fg[rng.integers(fg.size)], shape)
        start = [int(np.clip(c - p // 2, 0, s - p)) for c, p, s in zip(centre, patch, shape)]
    else:
        start = [int(rng.integers(0, s - p + 1)) for s, p in zip(shape, patch)]
    sl = tuple(slice(a, a + p) for a, p in zip(start, patch))
    out_img = np.ascontiguousarray(image[(slice(None),) + sl])
    out_mask = None if mask is None else np.ascontiguousarray(mask[sl])
    return out_img, out_mask
