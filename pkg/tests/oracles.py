"""Independent brute-force references used by several test modules."""
import itertools

import numpy as np


def naive_conv3d(x, w, stride=(1, 1, 1), padding=None):
    """Six nested loops, accumulating in the input dtype in (cin, kd, kh, kw) order."""
    dt = np.result_type(x.dtype, w.dtype).type
    N, Ci, D, H, W = x.shape
    Co, _, kd, kh, kw = w.shape
    if padding is None:
        padding = (kd // 2, kh // 2, kw // 2)
    pd, ph, pw = padding
    sd, sh, sw = stride
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    Do = (D + 2 * pd - kd) // sd + 1
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((N, Co, Do, Ho, Wo), dtype=dt)
    for n, o, z, y, xx in itertools.product(range(N), range(Co), range(Do), range(Ho), range(Wo)):
        acc = dt(0)
        for i in range(Ci):
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        acc = dt(acc + dt(xp[n, i, z * sd + a, y * sh + b, xx * sw + c] * w[o, i, a, b, c]))
        out[n, o, z, y, xx] = acc
    return out


def neighbours(connectivity):
    offs = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
    limit = {6: 1, 18: 2, 26: 3}[connectivity]
    return [d for d in offs if sum(map(abs, d)) <= limit]


def flood_components(mask, connectivity=26):
    """List of voxel sets, found by explicit breadth-first search."""
    mask = np.asarray(mask) != 0
    seen = np.zeros(mask.shape, dtype=bool)
    comps = []
    offs = neighbours(connectivity)
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        comp, queue = set(), [start]
        seen[start] = True
        while queue:
            v = queue.pop()
            comp.add(v)
            for d in offs:
                u = tuple(p + q for p, q in zip(v, d))
                if all(0 <= u[k] < mask.shape[k] for k in range(3)) and mask[u] and not seen[u]:
                    seen[u] = True
                    queue.append(u)
        comps.append(comp)
    return comps


def brute_dice(pred, gt):
    p = {tuple(v) for v in zip(*np.nonzero(pred))}
    g = {tuple(v) for v in zip(*np.nonzero(gt))}
    if not p and not g:
        return 1.0
    return 2.0 * len(p & g) / (len(p) + len(g))


def brute_false_volumes(pred, gt, spacing=(1.0, 1.0, 1.0), connectivity=26):
    voxel = float(np.prod(spacing)) / 1000.0
    p = {tuple(v) for v in zip(*np.nonzero(pred))}
    g = {tuple(v) for v in zip(*np.nonzero(gt))}
    fnv = sum(len(c) for c in flood_components(gt, connectivity) if not c & p)
    fpv = sum(len(c) for c in flood_components(pred, connectivity) if not c & g)
    return fnv * voxel, fpv * voxel


def random_mask_pair(rng, max_side=8):
    shape = tuple(int(s) for s in rng.integers(1, max_side + 1, 3))
    density = rng.uniform(0.0, 0.6, 2)
    pred = (rng.uniform(size=shape) < density[0]).astype(np.uint8)
    gt = (rng.uniform(size=shape) < density[1]).astype(np.uint8)
    return pred, gt
