"""Synthetic PET/CT phantoms: an ellipsoidal body with organ blobs and tracer-avid lesions.

Each case draws from a Philox counter-based generator keyed on ``(seed, index)``,
so any case can be regenerated on its own, in any order.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidSpec
from .volume_io import Case, Volume, write_case

# HU-like CT levels and SUV-like PET levels
AIR_HU = -1000.0
TISSUE_HU = 40.0
CT_NOISE_UNIT = 100.0
BODY_SUV = 1.0
LESION_SUV = (4.0, 8.0)
LESION_HU_OFFSET = 30.0


@dataclass
class PhantomSpec:
    """Phantom corpus parameters.

    ``noise_sigma`` is relative: PET noise is ``noise_sigma * BODY_SUV`` and CT
    noise is ``noise_sigma * 100`` HU.  ``ct_only_fraction`` of the cases carry
    no PET signal and no mask (unlabeled CT-only studies for pretraining).
    """

    seed: int = 0
    dims: tuple = (40, 56, 48)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    n_lesions_range: tuple = (1, 3)
    lesion_radius_mm_range: tuple = (2.5, 5.0)
    body_axes_mm: tuple | None = None
    n_organs: int = 2
    noise_sigma: float = 0.1
    ct_only_fraction: float = 0.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.n_lesions_range = tuple(int(n) for n in self.n_lesions_range)
        self.lesion_radius_mm_range = tuple(float(r) for r in self.lesion_radius_mm_range)
        if self.body_axes_mm is not None:
            self.body_axes_mm = tuple(float(a) for a in self.body_axes_mm)

    def validate(self) -> "PhantomSpec":
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise InvalidSpec(f"dims must be three values >= 16, got {self.dims}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise InvalidSpec(f"spacing must be positive, got {self.spacing_mm}")
        lo, hi = self.n_lesions_range
        if lo < 0 or lo > hi:
            raise InvalidSpec(f"n_lesions_range must satisfy 0 <= min <= max, got {self.n_lesions_range}")
        rlo, rhi = self.lesion_radius_mm_range
        if rlo <= 0 or rlo > rhi:
            raise InvalidSpec(f"lesion radii must satisfy 0 < min <= max, got {self.lesion_radius_mm_range}")
        if self.body_axes_mm is not None and (len(self.body_axes_mm) != 3 or min(self.body_axes_mm) <= 0):
            raise InvalidSpec(f"body_axes_mm must be three positive values, got {self.body_axes_mm}")
        if self.noise_sigma < 0 or self.n_organs < 0:
            raise InvalidSpec("noise_sigma and n_organs must be non-negative")
        if not 0.0 <= self.ct_only_fraction <= 1.0:
            raise InvalidSpec(f"ct_only_fraction must lie in [0, 1], got {self.ct_only_fraction}")
        return self

    @property
    def extent_mm(self) -> np.ndarray:
        return np.array(self.dims) * np.array(self.spacing_mm)

    def body_axes(self) -> np.ndarray:
        if self.body_axes_mm is not None:
            return np.array(self.body_axes_mm)
        return 0.42 * self.extent_mm

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidSpec(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**d)


def case_name(index: int) -> str:
    return f"case_{index:03d}"


def case_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), index]))


def _grid_mm(spec: PhantomSpec):
    return [(np.arange(n) + 0.5) * s for n, s in zip(spec.dims, spec.spacing_mm)]


def _inside(grid, centre, axes) -> np.ndarray:
    z, y, x = grid
    return (
        ((z[:, None, None] - centre[0]) / axes[0]) ** 2
        + ((y[None, :, None] - centre[1]) / axes[1]) ** 2
        + ((x[None, None, :] - centre[2]) / axes[2]) ** 2
    ) <= 1.0


def _point_in_body(rng, centre, axes, shrink) -> np.ndarray:
    # uniform in the unit ball, scaled into the shrunken body ellipsoid
    u = rng.standard_normal(3)
    u *= rng.uniform() ** (1 / 3) / np.linalg.norm(u)
    return centre + u * axes * shrink


def generate_case(spec: PhantomSpec, index: int) -> tuple[Case, dict]:
    """One phantom case plus a description of what was drawn (lesion geometry, modality)."""
    spec.validate()
    rng = case_rng(spec.seed, index)
    grid = _grid_mm(spec)
    centre = spec.extent_mm / 2
    body_axes = spec.body_axes()
    body = _inside(grid, centre, body_axes)
    ct_only = rng.uniform() < spec.ct_only_fraction

    ct = np.full(spec.dims, AIR_HU)
    ct[body] = TISSUE_HU
    pet = np.zeros(spec.dims)
    pet[body] = BODY_SUV
    for _ in range(spec.n_organs):
        c = _point_in_body(rng, centre, body_axes, 0.5)
        axes = body_axes * rng.uniform(0.2, 0.35, 3)
        organ = _inside(grid, c, axes) & body
        ct[organ] = TISSUE_HU + rng.uniform(-80.0, 80.0)
        pet[organ] = BODY_SUV * rng.uniform(0.6, 1.6)

    n_lesions = int(rng.integers(spec.n_lesions_range[0], spec.n_lesions_range[1] + 1))
    mask = np.zeros(spec.dims, dtype=bool)
    lesions = []
    rlo, rhi = spec.lesion_radius_mm_range
    for _ in range(n_lesions):
        axes = rng.uniform(rlo, rhi, 3)
        c = _point_in_body(rng, centre, body_axes - axes.max(), 0.8)
        region = _inside(grid, c, axes)
        uptake = rng.uniform(*LESION_SUV)
        pet[region] = uptake
        ct[region] += LESION_HU_OFFSET
        mask |= region
        lesions.append({"centre_mm": c.tolist(), "axes_mm": axes.tolist(), "uptake": float(uptake)})

    ct += rng.standard_normal(spec.dims) * spec.noise_sigma * CT_NOISE_UNIT
    pet += rng.standard_normal(spec.dims) * spec.noise_sigma * BODY_SUV
    if ct_only:
        pet[:] = 0.0
    sp = spec.spacing_mm
    case = Case(
        case_name(index),
        Volume(ct, sp, "CT"),
        Volume(pet, sp, "PET"),
        None if ct_only else Volume(mask, sp, "MASK"),
    )
    info = {"name": case.name, "modality": "ct_only" if ct_only else "petct", "lesions": lesions}
    return case, info


def generate_corpus(spec: PhantomSpec, n_cases: int, out_dir) -> dict:
    """Write ``n_cases`` phantoms plus ``manifest.json`` into ``out_dir``.

    The manifest lists every case under ``"cases"`` and the ones with a mask
    under ``"labeled"``.
    """
    spec.validate()
    if n_cases < 0:
        raise InvalidSpec(f"n_cases must be >= 0, got {n_cases}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names, labeled = [], []
    for i in range(n_cases):
        case, info = generate_case(spec, i)
        write_case(case, out)
        names.append(case.name)
        if info["modality"] == "petct":
            labeled.append(case.name)
    manifest = {"cases": names, "labeled": labeled, "spec": spec.to_dict()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest.setdefault("labeled", list(manifest["cases"]))
    return manifest
