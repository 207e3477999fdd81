"""Mid-slice export as portable graymaps, with GT / prediction contours in a sidecar overlay."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from scipy import ndimage

VIEWS = {"axial": 0, "coronal": 1, "sagittal": 2}
OVERLAY_GT = 128
OVERLAY_PRED = 255
OVERLAY_BOTH = 192


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) 8-bit graymap."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # exactly one whitespace byte ends the header; payload bytes may themselves look like whitespace
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(raw[m.end() : m.end() + w * h], dtype=np.uint8).reshape(h, w)


def to_gray(slice2d: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(slice2d, (1, 99))
    if hi <= lo:
        return np.zeros(slice2d.shape, dtype=np.uint8)
    return np.round(np.clip((slice2d - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)


def contour(mask2d: np.ndarray) -> np.ndarray:
    m = np.asarray(mask2d) != 0
    return m & ~ndimage.binary_erosion(m)


def overlay(gt2d: np.ndarray, pred2d: np.ndarray) -> np.ndarray:
    g, p = contour(gt2d), contour(pred2d)
    out = np.zeros(g.shape, dtype=np.uint8)
    out[g] = OVERLAY_GT
    out[p] = OVERLAY_PRED
    out[g & p] = OVERLAY_BOTH
    return out


def mid_slice(volume: np.ndarray, axis: int, index: int | None = None) -> np.ndarray:
    idx = volume.shape[axis] // 2 if index is None else index
    return np.take(volume, idx, axis=axis)


def lesion_centre(mask: np.ndarray) -> tuple | None:
    if not np.any(mask):
        return None
    return tuple(int(round(c)) for c in ndimage.center_of_mass(mask != 0))


def export_slices(name: str, image: np.ndarray, gt: np.ndarray, pred: np.ndarray, out_dir) -> list[Path]:
    """Write ``<name>_<view>.pgm`` and ``<name>_<view>_overlay.pgm`` for each view.

    Slices pass through the ground-truth lesion centroid when there is one,
    else through the volume centre.  Overlay values: 128 GT contour, 255
    prediction contour, 192 where both coincide, 0 elsewhere.
    """
    if not (image.shape == gt.shape == pred.shape):
        raise ValueError(f"image {image.shape}, gt {gt.shape} and prediction {pred.shape} differ")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    centre = lesion_centre(gt)
    written = []
    for view, axis in VIEWS.items():
        idx = None if centre is None else centre[axis]
        img_path = out / f"{name}_{view}.pgm"
        ovl_path = out / f"{name}_{view}_overlay.pgm"
        write_pgm(img_path, to_gray(mid_slice(image, axis, idx)))
        write_pgm(ovl_path, overlay(mid_slice(gt, axis, idx), mid_slice(pred, axis, idx)))
        written += [img_path, ovl_path]
    return written
