"""Numpy implementations of the hot loops; the fallback when the compiled
extension is unavailable. Operation order matches ``_ckernels.pyx``."""
import numpy as np


def bilinear_many(field, xs, ys):
    H, W = field.shape
    x = np.clip(xs, 0.0, W - 1)
    y = np.clip(ys, 0.0, H - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = x - x0
    fy = y - y0
    top = field[y0, x0] * (1.0 - fx) + field[y0, x1] * fx
    bot = field[y1, x0] * (1.0 - fx) + field[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def edge_scores(us, vs, width, height, m0, m1):
    d = np.minimum(np.minimum(us, vs), np.minimum((width - 1.0) - us, (height - 1.0) - vs))
    d = np.maximum(d, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ramp = (m1 - d) / (m1 - m0)
    return np.where(d <= m0, 1.0, np.where(d >= m1, 0.0, ramp))


def plane_abs_distances(P, a, b, c, d):
    return np.abs(a * P[:, 0] + b * P[:, 1] + c * P[:, 2] + d)


def count_inliers(P, a, b, c, d, tau):
    return int(np.count_nonzero(plane_abs_distances(P, a, b, c, d) <= tau))


def neighbor_counts(us, vs, flags, radius, chunk=512):
    n = us.shape[0]
    out = np.zeros(n, dtype=np.int64)
    if n == 0:
        return out
    sel = np.flatnonzero(flags)
    if sel.size == 0:
        return out
    su, sv = us[sel], vs[sel]
    r2 = radius * radius
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        du = su[None, :] - us[idx, None]
        dv = sv[None, :] - vs[idx, None]
        hit = (du * du + dv * dv) <= r2
        hit &= sel[None, :] != idx[:, None]
        out[idx] = hit.sum(axis=1)
    return out


def block_match(prev, nxt, cx, cy, patch, search):
    H, W = prev.shape
    cx = min(max(cx, patch), W - 1 - patch)
    cy = min(max(cy, patch), H - 1 - patch)
    ref = prev[cy - patch:cy + patch + 1, cx - patch:cx + patch + 1]
    if ref.max() == ref.min():
        return 0, 0, 0.0, True
    best = None
    for dy in range(-search, search + 1):
        if cy + dy - patch < 0 or cy + dy + patch > nxt.shape[0] - 1:
            continue
        for dx in range(-search, search + 1):
            if cx + dx - patch < 0 or cx + dx + patch > nxt.shape[1] - 1:
                continue
            win = nxt[cy + dy - patch:cy + dy + patch + 1, cx + dx - patch:cx + dx + patch + 1]
            s = float(np.sum((win - ref) ** 2))
            key = (s, dx * dx + dy * dy, dx, dy)
            if best is None or key < best:
                best = key
    if best is None:
        return 0, 0, 0.0, True
    return best[2], best[3], best[0], False
