"""Sliding-window prediction with Gaussian blending, flip TTA and thresholding."""
from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import ShapeMismatch
from .volume_io import Case, Volume, write_volume

ALL_FLIPS = tuple(tuple(ax for ax, on in zip((0, 1, 2), bits) if on) for bits in itertools.product((0, 1), repeat=3))


def tile_starts(size: int, patch: int, overlap: float = 0.5) -> list[int]:
    """Tile origins along one axis: regular stride, last tile clamped to the end."""
    if size <= patch:
        return [0]
    step = max(1, int(patch * (1 - overlap)))
    starts = list(range(0, size - patch, step))
    starts.append(size - patch)
    return starts


def gaussian_importance(patch, sigma_scale: float = 1 / 8) -> np.ndarray:
    axes = []
    for p in patch:
        c = (p - 1) / 2
        s = max(p * sigma_scale, 1e-6)
        axes.append(np.exp(-0.5 * ((np.arange(p) - c) / s) ** 2))
    g = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    g /= g.max()
    # keep the tile rims strictly positive so every covered voxel has weight
    return np.maximum(g, g[g > 0].min())


def foreground_probability(logits: np.ndarray) -> np.ndarray:
    """Softmax over the class axis of ``[N,K,...]`` logits, foreground (class 1) channel."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def forward_probability(model, patch: np.ndarray) -> np.ndarray:
    """Foreground probability ``[D,H,W]`` of one ``[C,D,H,W]`` patch."""
    with no_grad():
        logits = model.forward(Tensor(np.ascontiguousarray(patch[None], dtype=np.float32)))
    return foreground_probability(logits.data)[0]


def sliding_window(model, image: np.ndarray, patch_dims, overlap: float = 0.5) -> np.ndarray:
    """Blend per-tile probabilities of ``image[C,D,H,W]`` into a ``[D,H,W]`` probability map."""
    if image.ndim != 4:
        raise ShapeMismatch(f"expected [C,D,H,W] image, got {image.shape}")
    patch = tuple(int(p) for p in patch_dims)
    shape = image.shape[1:]
    extra = [max(0, p - s) for s, p in zip(shape, patch)]
    pads = [(e // 2, e - e // 2) for e in extra]
    padded = np.pad(image, [(0, 0)] + pads, mode="edge") if any(extra) else image
    pshape = padded.shape[1:]
    weight_map = gaussian_importance(patch)
    acc = np.zeros(pshape, dtype=np.float64)
    norm = np.zeros(pshape, dtype=np.float64)
    for start in itertools.product(*[tile_starts(s, p, overlap) for s, p in zip(pshape, patch)]):
        sl = tuple(slice(a, a + p) for a, p in zip(start, patch))
        prob = forward_probability(model, padded[(slice(None),) + sl])
        acc[sl] += prob * weight_map
        norm[sl] += weight_map
    out = (acc / norm).astype(np.float32)
    crop = tuple(slice(a, a + s) for (a, _), s in zip(pads, shape))
    return np.ascontiguousarray(out[crop])


def tta_predict(model, image: np.ndarray, patch_dims, flips=ALL_FLIPS, overlap: float = 0.5) -> np.ndarray:
    """Mean over ``flips`` of ``g⁻¹(sliding_window(g(image)))``.

    The per-voxel terms are sorted before summing, so the result does not
    depend on the order in which the flip set is enumerated; that makes
    flip equivariance exact rather than approximate.
    """
    preds = []
    for axes in flips:
        img_axes = tuple(a + 1 for a in axes)
        x = np.ascontiguousarray(np.flip(image, img_axes))
        p = sliding_window(model, x, patch_dims, overlap)
        preds.append(np.flip(p, axes) if axes else p)
    if len(preds) == 1:
        return preds[0]
    stack = np.sort(np.stack(preds).astype(np.float64), axis=0)
    return (stack.sum(axis=0) / len(preds)).astype(np.float32)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) > threshold).astype(np.float32)


def predict_case(model, case: Case, patch_dims=None, tta: bool = True, overlap: float = 0.5) -> tuple[np.ndarray, Volume]:
    """Foreground probability array and binary MASK volume for a preprocessed case."""
    patch = patch_dims or model.config.patch_dims
    image = case.image()
    prob = tta_predict(model, image, patch, ALL_FLIPS if tta else ((),), overlap)
    sp = case.ct.spacing
    return prob, Volume(binarize(prob), sp, "MASK")


def prediction_path(out_dir, name) -> Path:
    return Path(out_dir) / f"{name}_pred.vvol"


def write_prediction(mask: Volume, out_dir, name) -> Path:
    path = prediction_path(out_dir, name)
    write_volume(mask, path)
    return path
