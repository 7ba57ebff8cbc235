"""Flow-consistency metric loss over local pixel neighborhoods.

Conventions: a flow field is an ``(H, W, 2)`` array of ``(u, v)`` pixel
displacements (u along columns); an embedding field is ``(D, H, W)``, the
layout the network emits.  Pixel coordinates are ``(row, col)``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autograd as ag

NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 0.5
    eps_flow: float = 1.0
    cos_floor: float = 1e-4
    neighborhood_radius: int = 2
    anchors_per_image: int = 250

    def __post_init__(self):
        if self.sigma <= 0 or self.eps_flow <= 0:
            raise ValueError("sigma and eps_flow must be positive")
        if not 0 < self.cos_floor < 1:
            raise ValueError("cos_floor must lie in (0, 1)")
        if self.neighborhood_radius < 1:
            raise ValueError("neighborhood_radius must be >= 1")
        if self.anchors_per_image < 1:
            raise ValueError("anchors_per_image must be >= 1")


@dataclass(frozen=True)
class NeighborhoodSample:
    anchor: tuple
    neighbors: np.ndarray  # (n, 2) int rows of (row, col)


def flow_similarity(f_p, f_q, cfg=KernelConfig()):
    """RBF kernel on the flow difference relative to the anchor's magnitude.

    Not symmetric: only ``f_p`` enters the normalizer.  Broadcasts over
    leading axes.
    """
    f_p = np.asarray(f_p, dtype=np.float64)
    f_q = np.asarray(f_q, dtype=np.float64)
    return np.exp(_flow_log_similarity(f_p, f_q, cfg))


def _flow_log_similarity(f_p, f_q, cfg):
    d2 = np.sum((f_p - f_q) ** 2, axis=-1)
    rel = d2 / (np.sum(f_p * f_p, axis=-1) + cfg.eps_flow)
    return -rel / (2.0 * cfg.sigma ** 2)


def _softmax(logits, mask=None):
    """Normalize exp(logits) along the last axis; masked entries get 0."""
    if mask is not None:
        logits = np.where(mask > 0, logits, -np.inf)
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def embedding_similarity(phi_p, phi_q):
    phi_p = np.asarray(phi_p, dtype=np.float64)
    phi_q = np.asarray(phi_q, dtype=np.float64)
    n_p = np.linalg.norm(phi_p, axis=-1)
    n_q = np.linalg.norm(phi_q, axis=-1)
    if np.any(n_p < NORM_FLOOR) or np.any(n_q < NORM_FLOOR):
        raise ValueError("embedding vector norm below floor; cosine undefined")
    return np.sum(phi_p * phi_q, axis=-1) / (n_p * n_q)


@lru_cache(maxsize=8)
def _window_offsets(radius):
    d = np.arange(-radius, radius + 1)
    off = np.stack(np.meshgrid(d, d, indexing="ij"), axis=-1).reshape(-1, 2)
    off = off[np.any(off != 0, axis=1)]
    off.setflags(write=False)
    return off


def build_neighborhood(anchor, extents, radius):
    """In-bounds window pixels around ``anchor`` in row-major order, anchor excluded."""
    h, w = extents
    r, c = anchor
    if radius < 1:
        raise ValueError("radius must be >= 1 (empty neighborhood)")
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"anchor {anchor} outside {h}x{w} image")
    nb = np.array([r, c]) + _window_offsets(radius)
    nb = nb[(nb[:, 0] >= 0) & (nb[:, 0] < h) & (nb[:, 1] >= 0) & (nb[:, 1] < w)]
    return NeighborhoodSample((int(r), int(c)), nb)


def _normalize(s):
    return s / s.sum()


def flow_transition(sample, flow, cfg=KernelConfig()):
    flow = np.asarray(flow, dtype=np.float64)
    r, c = sample.anchor
    nb = sample.neighbors
    # log domain: similarities of far-apart flows can underflow to 0
    return _softmax(_flow_log_similarity(flow[r, c], flow[nb[:, 0], nb[:, 1]], cfg))


def embedding_transition(sample, emb, cfg=KernelConfig()):
    """Clamped cosine similarities to the anchor, normalized over the neighborhood."""
    emb = np.asarray(emb, dtype=np.float64)
    r, c = sample.anchor
    nb = sample.neighbors
    cos = embedding_similarity(emb[:, r, c], emb[:, nb[:, 0], nb[:, 1]].T)
    return _normalize(np.clip(cos, cfg.cos_floor, 1.0))


def anchor_cross_entropy(p_f, p_phi):
    p_f = np.asarray(p_f, dtype=np.float64)
    p_phi = np.asarray(p_phi, dtype=np.float64)
    if p_f.shape != p_phi.shape:
        raise ValueError("distributions are not aligned")
    live = p_f > 0
    if np.any(p_phi[live] <= 0):
        raise ValueError("p_phi has zero mass where p_f is positive")
    return float(-np.sum(p_f[live] * np.log(p_phi[live])))


def sample_anchors(flow, cfg=KernelConfig(), rng_seed=0):
    """Draw up to ``anchors_per_image`` distinct pixels with probability ~ |f_p|.

    Static pixels are never drawn.  Returns an ``(n, 2)`` int array of
    ``(row, col)``.
    """
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[:2]
    mag = np.sqrt(np.sum(flow * flow, axis=-1)).ravel()
    support = np.flatnonzero(mag > 0)
    n = min(cfg.anchors_per_image, support.size)
    if n == 0:
        return np.zeros((0, 2), dtype=np.int64)
    rng = np.random.default_rng(rng_seed)
    p = mag[support] / mag[support].sum()
    picked = rng.choice(support, size=n, replace=False, p=p)
    return np.stack(np.unravel_index(picked, (h, w)), axis=1).astype(np.int64)


def _stack_samples(samples, extents):
    """Pad neighbor lists to a rectangle; returns flat anchor/neighbor indices and a mask."""
    h, w = extents
    width = max(len(s.neighbors) for s in samples)
    a_idx = np.empty(len(samples), dtype=np.int64)
    n_idx = np.zeros((len(samples), width), dtype=np.int64)
    mask = np.zeros((len(samples), width))
    for i, s in enumerate(samples):
        r, c = s.anchor
        a_idx[i] = r * w + c
        k = len(s.neighbors)
        n_idx[i, :k] = s.neighbors[:, 0] * w + s.neighbors[:, 1]
        n_idx[i, k:] = a_idx[i]
        mask[i, :k] = 1.0
    return a_idx, n_idx, mask


def flow_targets(samples, flow, cfg=KernelConfig()):
    """Per-anchor flow transition rows (zero on padding) and |f_p| weights."""
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[:2]
    a_idx, n_idx, mask = _stack_samples(samples, (h, w))
    ff = flow.reshape(-1, 2)
    p_f = _softmax(_flow_log_similarity(ff[a_idx][:, None, :], ff[n_idx], cfg), mask)
    weight = np.linalg.norm(ff[a_idx], axis=1)
    return p_f, weight, a_idx, n_idx, mask


def consistency_loss(samples, flow, emb, cfg=KernelConfig()):
    """Magnitude-weighted neighborhood cross-entropy, averaged over anchors.

    ``emb`` is a ``(D, H, W)`` Tensor (or array); the result is a scalar
    Tensor differentiable w.r.t. it.
    """
    if len(samples) == 0:
        return ag.Tensor(0.0)
    emb = ag.as_tensor(emb)
    d, h, w = emb.shape
    p_f, weight, a_idx, n_idx, mask = flow_targets(samples, flow, cfg)
    if not np.any(weight):
        return ag.Tensor(0.0)

    flat = emb.reshape(d, h * w)
    used = np.unique(np.concatenate([a_idx, n_idx.ravel()]))
    remap = np.zeros(h * w, dtype=np.int64)
    remap[used] = np.arange(used.size)
    e = flat[:, used]
    unit = e / ag.sqrt((e * e).sum(axis=0) + NORM_FLOOR)
    ua = unit[:, remap[a_idx]]                       # D x A
    un = unit[:, remap[n_idx]]                       # D x A x N
    cos = (un * ua.reshape(d, len(samples), 1)).sum(axis=0)
    cos = ag.clip(cos, cfg.cos_floor, 1.0)
    # padded slots: similarity forced to 0 in the normalizer, log term weighted 0
    masked = cos * mask
    log_norm = ag.log(masked.sum(axis=1))
    ce = log_norm - (ag.log(masked + (1.0 - mask)) * p_f).sum(axis=1)
    return (ce * weight).sum() * (1.0 / len(samples))


def samples_for_image(flow, cfg=KernelConfig(), rng_seed=0):
    h, w = np.asarray(flow).shape[:2]
    anchors = sample_anchors(flow, cfg, rng_seed)
    return [build_neighborhood(tuple(a), (h, w), cfg.neighborhood_radius) for a in anchors]
