"""Synthetic two-layer motion pairs with analytic ground-truth flow.

A foreground (image + alpha) is alpha-blended over a background; each layer
moves by its own rigid transform between frame 1 and frame 2.  Flows are
evaluated from the transforms, never estimated.

Coordinates: ``x`` is the column, ``y`` the row; flow vectors are ``(u, v)``
= ``(dx, dy)`` in an ``(H, W, 2)`` array.
"""

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

OCCLUSION_TOL = 0.5


@dataclass(frozen=True)
class RigidTransform:
    """x -> R(theta) (x - c) + c + t."""

    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def apply(self, x, y):
        co, si = np.cos(self.theta), np.sin(self.theta)
        dx, dy = x - self.cx, y - self.cy
        return co * dx - si * dy + self.cx + self.tx, si * dx + co * dy + self.cy + self.ty

    def inverse(self):
        co, si = np.cos(self.theta), np.sin(self.theta)
        # t' = -R(-theta) t
        return RigidTransform(-(co * self.tx + si * self.ty), -(-si * self.tx + co * self.ty),
                              -self.theta, self.cx, self.cy)


@dataclass(frozen=True)
class TransformRanges:
    tx: tuple = (-8.0, 8.0)
    ty: tuple = (-8.0, 8.0)
    theta_deg: tuple = (-10.0, 10.0)
    center: tuple = None  # (cx, cy); image center when None


@dataclass
class SceneSpec:
    background: np.ndarray
    foreground: np.ndarray
    alpha: np.ndarray
    fg_transform: RigidTransform = RigidTransform()
    bg_transform: RigidTransform = RigidTransform()
    seed: int = None

    def __post_init__(self):
        shapes = {self.background.shape, self.foreground.shape, self.alpha.shape}
        if len(shapes) != 1 or self.background.ndim != 2:
            raise ValueError(f"scene layers must share 2-d extents, got {shapes}")
        if self.alpha.min() < 0 or self.alpha.max() > 1:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def mask(self):
        return self.alpha > 0.5


@dataclass
class SyntheticPair:
    frame1: np.ndarray
    frame2: np.ndarray
    forward_flow: np.ndarray
    backward_flow: np.ndarray
    fg_mask_frame1: np.ndarray
    occlusion_mask: np.ndarray
    seed: int = None
    meta: dict = field(default_factory=dict)


def sample_transform(ranges=TransformRanges(), rng_seed=0, extents=None):
    """Uniform draw of translation and rotation within ``ranges``."""
    for lo, hi in (ranges.tx, ranges.ty, ranges.theta_deg):
        if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
            raise ValueError(f"empty or non-finite range ({lo}, {hi})")
    rng = np.random.default_rng(rng_seed)
    tx = rng.uniform(*ranges.tx)
    ty = rng.uniform(*ranges.ty)
    theta = np.deg2rad(rng.uniform(*ranges.theta_deg))
    if ranges.center is not None:
        cx, cy = ranges.center
    elif extents is not None:
        cy, cx = (extents[0] - 1) / 2.0, (extents[1] - 1) / 2.0
    else:
        cx = cy = 0.0
    return RigidTransform(float(tx), float(ty), float(theta), float(cx), float(cy))


def _grid(extents):
    h, w = extents
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return x, y


def analytic_flow(t, extents):
    x, y = _grid(extents)
    x2, y2 = t.apply(x, y)
    return np.stack([x2 - x, y2 - y], axis=-1)


def compose_flow(fg_flow, bg_flow, alpha):
    if fg_flow.shape != bg_flow.shape or fg_flow.shape[:2] != alpha.shape:
        raise ValueError("flow/alpha extents differ")
    return np.where((alpha > 0.5)[..., None], fg_flow, bg_flow)


def bilinear_sample(image, x, y, fill=None):
    """Sample ``image`` (H x W or H x W x C) at real coordinates.

    Out-of-range coordinates clamp to the edge, or take ``fill`` when given.
    """
    h, w = image.shape[:2]
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), w - 2) if w > 1 else np.zeros_like(xc, dtype=np.int64)
    y0 = np.minimum(np.floor(yc).astype(np.int64), h - 2) if h > 1 else np.zeros_like(yc, dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax, ay = xc - x0, yc - y0
    if image.ndim == 3:
        ax, ay = ax[..., None], ay[..., None]
    out = ((1 - ay) * ((1 - ax) * image[y0, x0] + ax * image[y0, x1])
           + ay * ((1 - ax) * image[y1, x0] + ax * image[y1, x1]))
    if fill is not None:
        outside = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)
        out = np.where(outside[..., None] if image.ndim == 3 else outside, fill, out)
    return out


def warp_bilinear(image, flow):
    """out(x) = image(x + flow(x)), bilinear, clamped at the border."""
    if image.shape[:2] != flow.shape[:2]:
        raise ValueError("image and flow extents differ")
    x, y = _grid(image.shape[:2])
    return bilinear_sample(image, x + flow[..., 0], y + flow[..., 1])


def _moved(layer, t, fill=None):
    """Layer content after moving it by ``t``: out(y) = layer(T^-1(y))."""
    x, y = _grid(layer.shape)
    xs, ys = t.inverse().apply(x, y)
    return bilinear_sample(layer, xs, ys, fill=fill)


def _support_labels(labels, x, y):
    """For each real position, whether all bilinear corners with nonzero weight
    share one label, and that label."""
    h, w = labels.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    corners = [(y0, x0, np.ones(x.shape, dtype=bool)), (y0, x0 + 1, fx > 0), (y0 + 1, x0, fy > 0), (y0 + 1, x0 + 1, (fx > 0) & (fy > 0))]
    base = labels[np.clip(y0, 0, h - 1), np.clip(x0, 0, w - 1)]
    same = np.ones_like(base, dtype=bool)
    for cy, cx, used in corners:
        lab = labels[np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1)]
        same &= ~used | (lab == base)
    return same, base


def render_pair(spec, tol=OCCLUSION_TOL):
    """Composite both frames and their exact forward/backward flows.

    A frame-1 pixel is marked occluded when its frame-2 position leaves the
    image, lands (through any bilinear corner) on the other layer, or fails
    the forward-backward round trip by more than ``tol`` pixels.
    """
    ext = spec.background.shape
    h, w = ext
    fg1, bg1, a1 = spec.foreground, spec.background, spec.alpha
    frame1 = a1 * fg1 + (1 - a1) * bg1

    a2 = _moved(a1, spec.fg_transform, fill=0.0)
    fg2 = _moved(fg1, spec.fg_transform, fill=0.0)
    bg2 = _moved(bg1, spec.bg_transform)
    frame2 = a2 * fg2 + (1 - a2) * bg2

    lab1 = a1 > 0.5
    lab2 = a2 > 0.5
    if lab1.any() and not lab2.any():
        warnings.warn("foreground left the frame entirely after its transform")

    fwd = compose_flow(analytic_flow(spec.fg_transform, ext), analytic_flow(spec.bg_transform, ext), a1)
    bwd = compose_flow(analytic_flow(spec.fg_transform.inverse(), ext),
                       analytic_flow(spec.bg_transform.inverse(), ext), a2)

    x, y = _grid(ext)
    tx, ty = x + fwd[..., 0], y + fwd[..., 1]
    outside = (tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)
    same, lab_at = _support_labels(lab2, tx, ty)
    trip = fwd + bilinear_sample(bwd, tx, ty)
    err = np.sqrt(np.sum(trip ** 2, axis=-1))
    occluded = outside | ~same | (lab_at != lab1) | (err > tol)

    return SyntheticPair(
        frame1=np.clip(frame1, 0, 1), frame2=np.clip(frame2, 0, 1),
        forward_flow=fwd, backward_flow=bwd,
        fg_mask_frame1=lab1, occlusion_mask=occluded, seed=spec.seed,
    )


# procedural corpus ---------------------------------------------------------------

def _smooth_noise(rng, ext, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(ext), sigma, mode="reflect")
    n -= n.min()
    return n / max(n.max(), 1e-12)


def _segment_distance(px, py, pts):
    """Distance from every pixel to a polyline."""
    d = np.full(px.shape, np.inf)
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        vx, vy = x1 - x0, y1 - y0
        ll = vx * vx + vy * vy
        s = np.clip(((px - x0) * vx + (py - y0) * vy) / max(ll, 1e-12), 0, 1)
        d = np.minimum(d, np.hypot(px - x0 - s * vx, py - y0 - s * vy))
    return d


def _stroke(rng, ext, px, py):
    """Coverage of a curved tube (quadratic Bezier) with a 1px antialiased rim."""
    h, w = ext
    p0 = rng.uniform([0.1 * w, 0.1 * h], [0.9 * w, 0.9 * h])
    p2 = rng.uniform([0.1 * w, 0.1 * h], [0.9 * w, 0.9 * h])
    while np.hypot(*(p2 - p0)) < 0.4 * min(h, w):
        p2 = rng.uniform([0.05 * w, 0.05 * h], [0.95 * w, 0.95 * h])
    p1 = (p0 + p2) / 2 + rng.normal(0, 0.2 * min(h, w), 2)
    s = np.linspace(0, 1, 24)[:, None]
    pts = (1 - s) ** 2 * p0 + 2 * s * (1 - s) * p1 + s ** 2 * p2
    half = rng.uniform(0.9, 1.8) * min(h, w) / 64
    return np.clip(half + 0.5 - _segment_distance(px, py, pts), 0, 1)


def _ellipse(rng, ext, px, py):
    h, w = ext
    cx, cy = rng.uniform(0.2 * w, 0.8 * w), rng.uniform(0.2 * h, 0.8 * h)
    a = rng.uniform(0.06, 0.14) * w
    b = a * rng.uniform(0.35, 0.8)
    phi = rng.uniform(0, np.pi)
    dx, dy = px - cx, py - cy
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    # first-order signed distance to the ellipse boundary
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    grad = np.sqrt((u / a ** 2) ** 2 + (v / b ** 2) ** 2) / np.maximum(r, 1e-9)
    sd = (r - 1) / np.maximum(grad, 1e-9)
    return np.clip(0.5 - sd, 0, 1)


def _blob_layer(rng, ext, n):
    """Soft dark blobs baked into the background (they move with it)."""
    h, w = ext
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    acc = np.zeros(ext)
    for _ in range(n):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        s = rng.uniform(0.04, 0.09) * min(h, w)
        acc = np.maximum(acc, np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s)))
    return acc


def random_scene(rng, ext, ranges=TransformRanges(), move_background=False, seed=None):
    h, w = ext
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = min(h, w) / 64

    for _ in range(50):
        alpha = np.zeros(ext)
        for _ in range(rng.integers(1, 4)):
            alpha = np.maximum(alpha, _stroke(rng, ext, x, y))
        if rng.random() < 0.6:
            alpha = np.maximum(alpha, _ellipse(rng, ext, x, y))
        frac = (alpha > 0.5).mean()
        if 0.02 <= frac <= 0.30:
            break
    else:  # pragma: no cover - the draws above essentially never fail 50 times
        raise RuntimeError("could not draw a foreground with 2-30% coverage")

    # dark foreground over a brighter textured background that carries dark,
    # blurred distractors (soft blobs and out-of-focus tubes) moving with it,
    # so intensity alone does not identify the foreground
    bg = 0.45 + 0.35 * _smooth_noise(rng, ext, 6 * scale)
    dark = _blob_layer(rng, ext, rng.integers(1, 4))
    for _ in range(rng.integers(1, 3)):
        tube = ndimage.gaussian_filter(_stroke(rng, ext, x, y), rng.uniform(1.2, 2.2) * scale)
        dark = np.maximum(dark, tube / max(tube.max(), 1e-12))
    bg -= rng.uniform(0.3, 0.5) * dark
    fg = rng.uniform(0.05, 0.3) + 0.08 * (_smooth_noise(rng, ext, 3 * scale) - 0.5)

    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    fr = TransformRanges(ranges.tx, ranges.ty, ranges.theta_deg, ranges.center or center)
    fg_t = sample_transform(fr, rng)
    if move_background:
        small = TransformRanges(tuple(0.25 * v for v in ranges.tx), tuple(0.25 * v for v in ranges.ty),
                                tuple(0.25 * v for v in ranges.theta_deg), ranges.center or center)
        bg_t = sample_transform(small, rng)
    else:
        bg_t = RigidTransform(cx=center[0], cy=center[1])
    return SceneSpec(np.clip(bg, 0, 1), np.clip(fg, 0, 1), alpha, fg_t, bg_t, seed)


def shapes_corpus(count, extents=(64, 64), rng_seed=0, ranges=TransformRanges()):
    """``count`` reproducible scenes; every second one has a moving background."""
    if count <= 0:
        raise ValueError("count must be positive")
    seeds = np.random.SeedSequence(rng_seed).generate_state(count)
    return [random_scene(np.random.default_rng(int(s)), tuple(extents), ranges,
                         move_background=bool(i % 2), seed=int(s))
            for i, s in enumerate(seeds)]


def generate_dataset(specs, out_dir):
    """Render ``specs`` and write them in the on-disk pair layout."""
    from . import fileio

    out_dir = Path(out_dir)
    pairs = [render_pair(s) for s in specs]
    try:
        fileio.write_dataset(out_dir, pairs)
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out_dir}: {exc}") from exc
    return pairs
