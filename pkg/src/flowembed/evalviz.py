"""Dice, embedding/flow similarity maps, random projections, warping and flow colors.

Embedding fields are ``(D, H, W)``; flow fields are ``(H, W, 2)``.
"""

from dataclasses import dataclass

import numpy as np

from .flowloss import NORM_FLOOR, KernelConfig, flow_similarity
from .synthgen import bilinear_sample, warp_bilinear

INVALID_GRAY = 128


def dice_score(pred, target, threshold=0.5):
    """2|A&B| / (|A|+|B|) with A = pred >= threshold; two empty masks score 1."""
    a = np.asarray(pred) >= threshold
    b = np.asarray(target).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"prediction {a.shape} and target {b.shape} differ")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


@dataclass
class SimilarityMap:
    values: np.ndarray
    valid: np.ndarray
    kind: str  # "anchor" or "shifted"
    where: tuple  # anchor (row, col) or offset (dx, dy)

    def to_image(self, lo=0.0, hi=1.0):
        """Grayscale uint8 rendering; invalid pixels mid-gray."""
        v = np.clip((np.nan_to_num(self.values) - lo) / (hi - lo), 0, 1)
        img = np.floor(v * 255 + 0.5).astype(np.uint8)
        img[~self.valid] = INVALID_GRAY
        return img


def make_basis(embedding_dim, seed=0):
    """Fixed standard-normal D x 3 projection; reuse one basis per report."""
    return np.random.default_rng(seed).standard_normal((embedding_dim, 3))


def random_projection(emb, basis):
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape[0] != basis.shape[0]:
        raise ValueError(f"basis is for {basis.shape[0]}-dim embeddings, field has {emb.shape[0]}")
    proj = np.tensordot(emb, basis, axes=([0], [0]))  # H x W x 3
    out = np.empty(proj.shape, dtype=np.uint8)
    for c in range(3):
        ch = proj[..., c]
        lo, hi = ch.min(), ch.max()
        if hi - lo <= 1e-12 * max(1.0, abs(hi)):
            out[..., c] = 128
        else:
            out[..., c] = np.floor((ch - lo) / (hi - lo) * 255 + 0.5).astype(np.uint8)
    return out


def _unit(emb):
    n = np.sqrt(np.sum(emb * emb, axis=0))
    return emb / np.maximum(n, NORM_FLOOR)


def _check_kind(field, kind):
    if kind not in ("embedding", "flow"):
        raise ValueError(f"kind must be 'embedding' or 'flow', got {kind!r}")
    field = np.asarray(field, dtype=np.float64)
    if kind == "flow" and (field.ndim != 3 or field.shape[2] != 2):
        raise ValueError(f"flow field must be H x W x 2, got {field.shape}")
    if kind == "embedding" and field.ndim != 3:
        raise ValueError(f"embedding field must be D x H x W, got {field.shape}")
    return field


def _extents(field, kind):
    return field.shape[:2] if kind == "flow" else field.shape[1:]


def anchor_similarity_map(field, anchor, cfg=KernelConfig(), kind="embedding"):
    """Cosine (embedding) or RBF (flow) similarity of every pixel to ``anchor``."""
    field = _check_kind(field, kind)
    h, w = _extents(field, kind)
    r, c = anchor
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"anchor {anchor} outside {h}x{w}")
    if kind == "flow":
        vals = flow_similarity(field[r, c], field, cfg)
    else:
        u = _unit(field)
        vals = np.tensordot(u[:, r, c], u, axes=([0], [0]))
    return SimilarityMap(vals, np.ones((h, w), dtype=bool), "anchor", (int(r), int(c)))


def shifted_similarity_map(field, offset=(5, 5), cfg=KernelConfig(), kind="embedding"):
    """value(i, j) = similarity of element (i, j) with (i + dy, j + dx)."""
    field = _check_kind(field, kind)
    h, w = _extents(field, kind)
    dx, dy = offset
    if abs(dx) >= w or abs(dy) >= h:
        raise ValueError(f"offset {offset} exceeds {h}x{w} field")
    rows = np.arange(h)[:, None] + dy
    cols = np.arange(w)[None, :] + dx
    valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    rr = np.clip(rows, 0, h - 1) + 0 * cols
    cc = np.clip(cols, 0, w - 1) + 0 * rows
    if kind == "flow":
        vals = flow_similarity(field, field[rr, cc], cfg)
    else:
        u = _unit(field)
        vals = np.sum(u * u[:, rr, cc], axis=0)
    vals = np.where(valid, vals, np.nan)
    return SimilarityMap(vals, valid, "shifted", (int(dx), int(dy)))


def warp_and_occlude(frame2, forward, backward, tol=0.5):
    """Pull frame 2 back onto frame 1 by the forward flow; darken occluded pixels.

    Returns ``(warped, occluded)``.
    """
    frame2 = np.asarray(frame2, dtype=np.float64)
    if not (frame2.shape == forward.shape[:2] == backward.shape[:2]):
        raise ValueError("frame and flow extents differ")
    h, w = frame2.shape
    warped = warp_bilinear(frame2, forward)
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    tx, ty = x + forward[..., 0], y + forward[..., 1]
    trip = forward + bilinear_sample(backward, tx, ty)
    occluded = np.sqrt(np.sum(trip ** 2, axis=-1)) > tol
    return np.where(occluded, 0.0, warped), occluded


# flow colors -------------------------------------------------------------------

def color_wheel():
    """The 55-entry Middlebury hue wheel (RY, YG, GC, CB, BM, MR segments)."""
    segs = [(15, (1, 0, 0), (1, 1, 0)), (6, (1, 1, 0), (0, 1, 0)), (4, (0, 1, 0), (0, 1, 1)),
            (11, (0, 1, 1), (0, 0, 1)), (13, (0, 0, 1), (1, 0, 1)), (6, (1, 0, 1), (1, 0, 0))]
    rows = []
    for n, a, b in segs:
        t = np.arange(n)[:, None] / n
        rows.append((1 - t) * np.array(a, float) + t * np.array(b, float))
    return np.concatenate(rows)


def flow_color_encode(flow, max_mag=None):
    """Hue from direction, saturation from magnitude / 99th-percentile magnitude."""
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = np.percentile(mag, 99)
    if max_mag <= 0:
        return np.full(flow.shape[:2] + (3,), 255, dtype=np.uint8)
    wheel = color_wheel()
    n = len(wheel)
    ang = np.arctan2(-v, -u) / np.pi  # (-1, 1]
    fk = (ang + 1) / 2 * (n - 1)
    k0 = np.floor(fk).astype(int) % n
    k1 = (k0 + 1) % n
    f = (fk - np.floor(fk))[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    rad = np.minimum(mag / max_mag, 1.0)[..., None]
    col = 1 - rad * (1 - col)
    return np.floor(col * 255 + 0.5).astype(np.uint8)


def fg_bg_similarity_gap(emb, mask):
    """Mean fg-fg cosine minus mean fg-bg cosine over all pixel pairs."""
    u = _unit(np.asarray(emb, dtype=np.float64)).reshape(emb.shape[0], -1)
    m = np.asarray(mask, dtype=bool).ravel()
    if m.all() or not m.any():
        raise ValueError("mask needs both foreground and background pixels")
    sf, sb = u[:, m].sum(axis=1), u[:, ~m].sum(axis=1)
    nf, nb = m.sum(), (~m).sum()
    ff = (sf @ sf - nf) / (nf * max(nf - 1, 1))  # self-pairs excluded
    fb = sf @ sb / (nf * nb)
    return float(ff - fb)
