"""Preprocessed cases in memory and the random patch sampler fed to training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import AugmentConfig, augment_arrays, crop_patch
from .volume_io import Case, preprocess_case, read_case


@dataclass
class Sample:
    name: str
    image: np.ndarray
    mask: np.ndarray | None
    spacing: tuple
    pet_present: bool

    @classmethod
    def from_case(cls, case: Case) -> "Sample":
        mask = None if case.mask is None else case.mask.data.astype(np.float32)
        return cls(case.name, case.image(), mask, case.ct.spacing, bool(np.ptp(case.pet.data) > 0))


def load_samples(corpus_dir, names, target_spacing=(1.0, 1.0, 1.0)) -> list[Sample]:
    return [Sample.from_case(preprocess_case(read_case(corpus_dir, n), target_spacing)) for n in names]


class PatchSampler:
    """Draws augmented training patches; all randomness comes from one seeded generator."""

    def __init__(self, samples, patch_dims, seed: int, aug: AugmentConfig | None = None, fg_p: float = 0.5):
        if not samples:
            raise ValueError("patch sampler needs at least one case")
        self.samples = list(samples)
        self.patch_dims = tuple(patch_dims)
        self.aug = aug
        self.fg_p = fg_p
        self.rng = np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), 0x5A4D]))

    def draw(self, batch_size: int):
        """``(images [B,C,*patch], masks [B,*patch] or None, samples)``."""
        images, masks, picked = [], [], []
        for _ in range(batch_size):
            s = self.samples[int(self.rng.integers(len(self.samples)))]
            img, m = crop_patch(s.image, s.mask, self.patch_dims, self.rng, self.fg_p)
            if self.aug is not None:
                img, m = augment_arrays(img, m, self.rng, self.aug)
            images.append(img)
            masks.append(m)
            picked.append(s)
        if any(m is None for m in masks):
            return np.stack(images), None, picked
        return np.stack(images), np.stack(masks), picked
