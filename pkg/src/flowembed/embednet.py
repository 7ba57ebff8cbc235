"""Encoder-decoder pixel embedding network, segmentation head, BCE and augmentation."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autograd as ag


@dataclass(frozen=True)
class NetworkConfig:
    embedding_dim: int = 16
    levels: int = 3
    base_channels: int = 16
    input_channels: int = 1

    @property
    def divisor(self):
        """Input extents must be multiples of this (one pooling between levels)."""
        return 2 ** (self.levels - 1)


@dataclass(frozen=True)
class AugmentationConfig:
    hflip_prob: float = 0.5
    rotation_deg: tuple = (-20.0, 20.0)
    scale: tuple = (0.8, 1.2)
    shear_deg: tuple = (-20.0, 20.0)


def _he(rng, c_out, c_in, k, gain=2.0):
    std = np.sqrt(gain / (c_in * k * k))
    return rng.standard_normal((c_out, c_in, k, k)) * std


class EmbeddingNetwork:
    """U-Net style trunk whose last layer emits ``embedding_dim`` channels.

    ``params`` is an ordered name -> Tensor dict; ``forward`` maps an H x W
    image to a D x H x W tensor.
    """

    def __init__(self, cfg=NetworkConfig(), rng_seed=0):
        if cfg.levels < 1 or cfg.embedding_dim < 1 or cfg.base_channels < 1:
            raise ValueError(f"invalid network config {cfg}")
        self.cfg = cfg
        rng = np.random.default_rng(rng_seed)
        self.params = {}
        widths = [cfg.base_channels * 2 ** l for l in range(cfg.levels)]
        c_prev = cfg.input_channels
        for l, c in enumerate(widths):
            self._conv(rng, f"enc{l}.0", c_prev, c)
            self._conv(rng, f"enc{l}.1", c, c)
            c_prev = c
        for l in reversed(range(cfg.levels - 1)):
            self._conv(rng, f"dec{l}.0", widths[l] + widths[l + 1], widths[l])
            self._conv(rng, f"dec{l}.1", widths[l], widths[l])
        self._conv(rng, "out", widths[0], cfg.embedding_dim, gain=1.0)
        self.widths = widths

    def _conv(self, rng, name, c_in, c_out, k=3, gain=2.0):
        self.params[f"{name}.w"] = ag.Tensor(_he(rng, c_out, c_in, k, gain), requires_grad=True)
        self.params[f"{name}.b"] = ag.Tensor(np.zeros(c_out), requires_grad=True)

    def _apply(self, name, x, act=True):
        y = ag.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], padding=1)
        return ag.relu(y) if act else y

    def forward(self, image):
        image = np.asarray(image.data if isinstance(image, ag.Tensor) else image, dtype=np.float64)
        if image.ndim == 2:
            image = image[None]
        h, w = image.shape[1:]
        d = self.cfg.divisor
        if h % d or w % d:
            ph, pw = (-h) % d, (-w) % d
            raise ValueError(f"input {h}x{w} not divisible by {d}; pad by ({ph}, {pw}) rows/cols")
        x = ag.Tensor(image)
        skips = []
        for l in range(self.cfg.levels):
            if l:
                x = ag.avg_pool2(x)
            x = self._apply(f"enc{l}.1", self._apply(f"enc{l}.0", x))
            skips.append(x)
        for l in reversed(range(self.cfg.levels - 1)):
            x = ag.concat_channels(skips[l], ag.nearest_upsample2(x))
            x = self._apply(f"dec{l}.1", self._apply(f"dec{l}.0", x))
        return self._apply("out", x, act=False)

    __call__ = forward

    def embed(self, image):
        """Detached ``(D, H, W)`` numpy embedding."""
        return self.forward(image).data

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def build_network(cfg=NetworkConfig(), rng_seed=0):
    return EmbeddingNetwork(cfg, rng_seed)


def embed_forward(net, image):
    return net.forward(image)


class SegmentationHead:
    """1x1 convolution to one logit, then sigmoid."""

    def __init__(self, embedding_dim, rng_seed=0, zero=False):
        rng = np.random.default_rng(rng_seed)
        w = np.zeros((1, embedding_dim, 1, 1)) if zero else _he(rng, 1, embedding_dim, 1, gain=1.0)
        self.params = {"head.w": ag.Tensor(w, requires_grad=True),
                       "head.b": ag.Tensor(np.zeros(1), requires_grad=True)}
        self.embedding_dim = embedding_dim

    def forward(self, emb):
        emb = ag.as_tensor(emb)
        if emb.shape[0] != self.embedding_dim:
            raise ag.ShapeError(f"head expects {self.embedding_dim}-dim embeddings, got {emb.shape[0]}")
        logit = ag.conv2d(emb, self.params["head.w"], self.params["head.b"])
        return ag.sigmoid(logit).reshape(emb.shape[1:])

    __call__ = forward


def segment_forward(head, emb):
    return head.forward(emb)


def bce_loss(pred, target, eps=1e-12, valid=None):
    """Mean binary cross-entropy; ``pred`` is clipped to [eps, 1 - eps] inside the logs.

    With a boolean ``valid`` mask the mean runs over valid pixels only (used to
    drop the zero-filled border of augmented samples, which carries no label).
    """
    pred = ag.as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ag.ShapeError(f"prediction {pred.shape} and target {t.shape} differ")
    p = ag.clip(pred, eps, 1 - eps)
    ll = ag.log(p) * t + ag.log(1.0 - p) * (1.0 - t)
    if valid is None:
        return -ll.mean()
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != t.shape:
        raise ag.ShapeError(f"valid mask {valid.shape} and target {t.shape} differ")
    return -(ll * valid.astype(np.float64)).sum() * (1.0 / max(int(valid.sum()), 1))


# augmentation -----------------------------------------------------------------

@dataclass(frozen=True)
class AffineDraw:
    hflip: bool = False
    rotation_deg: float = 0.0
    scale: float = 1.0
    shear_deg: float = 0.0


def draw_augmentation(cfg, rng):
    rng = np.random.default_rng(rng)
    return AffineDraw(bool(rng.random() < cfg.hflip_prob), float(rng.uniform(*cfg.rotation_deg)),
                      float(rng.uniform(*cfg.scale)), float(rng.uniform(*cfg.shear_deg)))


def _matrix(d):
    """Forward (x, y) map: flip, then rotate, scale and shear about the center."""
    th, sh = np.deg2rad(d.rotation_deg), np.deg2rad(d.shear_deg)
    flip = np.diag([-1.0 if d.hflip else 1.0, 1.0])
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shear = np.array([[1.0, np.tan(sh)], [0.0, 1.0]])
    return rot @ (d.scale * shear) @ flip


def _ndimage_map(draw, h, w):
    # ndimage works in (row, col) and maps output -> input
    inv_rc = np.linalg.inv(_matrix(draw))[::-1, ::-1]
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    return inv_rc, c - inv_rc @ c


def apply_augmentation(image, mask, draw):
    """Warp image (bilinear) and mask (nearest) with one shared affine map; zero fill."""
    h, w = image.shape
    inv_rc, offset = _ndimage_map(draw, h, w)
    img = ndimage.affine_transform(image, inv_rc, offset, order=1, mode="constant", cval=0.0)
    msk = ndimage.affine_transform(np.asarray(mask, dtype=np.float64), inv_rc, offset,
                                   order=0, mode="constant", cval=0.0)
    return img, msk > 0.5


def in_bounds(shape, draw):
    """Pixels of the augmented frame that sample inside the source image."""
    h, w = shape
    inv_rc, offset = _ndimage_map(draw, h, w)
    src = ndimage.affine_transform(np.ones((h, w)), inv_rc, offset, order=0, mode="constant", cval=0.0)
    return src > 0.5


def augment(image, mask, cfg=AugmentationConfig(), rng_seed=0):
    if image.shape != np.shape(mask):
        raise ValueError("image and mask extents differ")
    return apply_augmentation(image, mask, draw_augmentation(cfg, rng_seed))
