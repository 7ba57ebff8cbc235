"""Flow-supervised pretraining, few-shot finetuning, evaluation and checkpoints."""

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .embednet import (AugmentationConfig, EmbeddingNetwork, NetworkConfig, SegmentationHead,
                       apply_augmentation, bce_loss, draw_augmentation, in_bounds)
from .evalviz import dice_score
from .flowloss import KernelConfig, consistency_loss, samples_for_image

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 2
    labeled_count: int = 1
    seed: int = 0
    freeze_backbone: bool = False
    eval_every: int = 10

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune", "scratch"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need learning_rate > 0, epochs >= 0, batch_size >= 1")
        if self.phase != "pretrain" and self.labeled_count < 1:
            raise ValueError("labeled_count must be >= 1 for finetune/scratch")


@dataclass
class RunRecord:
    losses: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    dice: list = field(default_factory=list)  # (epoch, mean test dice)
    checkpoint: str = None
    augmentations: list = field(default_factory=list)

    @property
    def best_dice(self):
        return max((d for _, d in self.dice), default=float("nan"))

    @property
    def final_dice(self):
        return self.dice[-1][1] if self.dice else float("nan")

    def write_csv(self, path):
        by_epoch = dict(self.dice)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "dice", "seconds"])
            for i, loss in enumerate(self.losses, 1):
                d = by_epoch.get(i)
                w.writerow([i, repr(float(loss)), "" if d is None else repr(float(d)),
                            f"{self.seconds[i - 1]:.3f}"])


# checkpoints -------------------------------------------------------------------

def save_checkpoint(path, net, head=None, adam=None):
    arrays = {f"meta.{f.name}": float(getattr(net.cfg, f.name)) for f in dataclasses.fields(net.cfg)}
    arrays.update({k: p.data for k, p in net.params.items()})
    if head is not None:
        arrays.update({k: p.data for k, p in head.params.items()})
    if adam is not None:
        arrays["adam.step"] = float(adam.step)
        arrays["adam.hyper"] = np.array([adam.learning_rate, adam.beta1, adam.beta2, adam.eps_adam])
        for k in adam.m:
            arrays[f"adam.m.{k}"] = adam.m[k]
            arrays[f"adam.v.{k}"] = adam.v[k]
    ag.save_arrays(path, arrays)


def load_checkpoint(path, expect=None):
    """Rebuild ``(net, head or None, arrays)`` from a checkpoint.

    ``expect`` is an optional NetworkConfig the checkpoint must match.
    """
    arrays = ag.load_arrays(path)
    try:
        cfg = NetworkConfig(**{f.name: int(arrays[f"meta.{f.name}"]) for f in dataclasses.fields(NetworkConfig)})
    except KeyError as exc:
        raise ag.CheckpointError(f"{path}: missing network metadata {exc}") from None
    if expect is not None and expect != cfg:
        raise ag.CheckpointError(f"{path}: checkpoint network {cfg} does not match requested {expect}")
    net = EmbeddingNetwork(cfg, rng_seed=0)
    for k, p in net.params.items():
        if k not in arrays:
            raise ag.CheckpointError(f"{path}: parameter {k} missing")
        if arrays[k].shape != p.shape:
            raise ag.CheckpointError(f"{path}: parameter {k} has shape {arrays[k].shape}, expected {p.shape}")
        p.data = arrays[k].copy()
    head = None
    if "head.w" in arrays:
        head = SegmentationHead(cfg.embedding_dim, zero=True)
        if arrays["head.w"].shape != head.params["head.w"].shape:
            raise ag.CheckpointError(f"{path}: head does not match embedding_dim {cfg.embedding_dim}")
        for k, p in head.params.items():
            p.data = arrays[k].copy()
    return net, head, arrays


# pretraining -------------------------------------------------------------------

def validate_flow_pairs(pairs):
    for i, p in enumerate(pairs):
        if getattr(p, "forward_flow", None) is None:
            raise ValueError(f"pair {getattr(p, 'pair_id', i) or i} has no flow field")


def pretrain(net, pairs, cfg=TrainConfig(), kernel=KernelConfig(), checkpoint=None):
    """Self-supervised embedding training from flow.

    Each epoch shuffles the pairs, resamples anchors per image, and takes one
    Adam step per batch.  Batches whose images have no moving pixels leave the
    parameters untouched.
    """
    validate_flow_pairs(pairs)
    rng = np.random.default_rng(cfg.seed)
    adam = ag.AdamState(net.params, cfg.learning_rate)
    rec = RunRecord()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(pairs))
        seeds = rng.integers(0, 2 ** 63, size=len(pairs))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss = None
            for i in batch:
                flow = pairs[i].forward_flow
                samples = samples_for_image(flow, kernel, int(seeds[i]))
                if not samples:
                    continue
                li = consistency_loss(samples, flow, net.forward(pairs[i].frame1), kernel)
                total += li.item()
                loss = li if loss is None else loss + li
            if loss is None or not loss.requires_grad:
                continue
            ag.backward(loss * (1.0 / len(batch)))
            ag.adam_step(net.params, adam)
            net.zero_grad()
        rec.losses.append(total / max(len(pairs), 1))
        rec.seconds.append(time.perf_counter() - t0)
        log.info("pretrain epoch %d loss %.6f (%.1fs)", epoch, rec.losses[-1], rec.seconds[-1])
    if checkpoint is not None:
        save_checkpoint(checkpoint, net, adam=adam)
        rec.checkpoint = str(checkpoint)
    return rec


# finetuning ---------------------------------------------------------------------

def predict(net, head, image):
    return head.forward(net.forward(image)).data


def evaluate(net, head, test_set, threshold=0.5):
    """Mean dice over ``(image, mask)`` pairs."""
    if not test_set:
        raise ValueError("empty test set")
    return float(np.mean([dice_score(predict(net, head, img), m, threshold) for img, m in test_set]))


def finetune(net, labeled, cfg, aug=AugmentationConfig(), test_set=None, checkpoint=None):
    """Supervised training of backbone + fresh head on ``labeled`` (image, mask) pairs.

    The loss ignores the zero-filled border that augmentation pulls in from
    outside the source image.

    The head, shuffling and augmentation draws depend only on ``cfg.seed``, so
    a pretrained and a scratch backbone see the same sample stream.
    """
    if not labeled:
        raise ValueError("finetune needs at least one labeled pair")
    rng = np.random.default_rng(cfg.seed)
    head = SegmentationHead(net.cfg.embedding_dim, rng_seed=int(rng.integers(2 ** 63)))
    params = dict(head.params)
    if not cfg.freeze_backbone:
        params.update(net.params)
    adam = ag.AdamState(params, cfg.learning_rate)
    rec = RunRecord()
    if test_set and cfg.epochs == 0:
        rec.dice.append((0, evaluate(net, head, test_set)))
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(labeled))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss = None
            for i in batch:
                draw = draw_augmentation(aug, rng)
                rec.augmentations.append(draw)
                img, msk = apply_augmentation(labeled[i][0], labeled[i][1], draw)
                li = bce_loss(head.forward(net.forward(img)), msk, valid=in_bounds(img.shape, draw))
                total += li.item()
                loss = li if loss is None else loss + li
            ag.backward(loss * (1.0 / len(batch)))
            ag.adam_step(params, adam)
            for p in params.values():
                p.grad = None
            net.zero_grad()
        rec.losses.append(total / len(labeled))
        rec.seconds.append(time.perf_counter() - t0)
        if test_set and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            rec.dice.append((epoch, evaluate(net, head, test_set)))
            log.info("finetune epoch %d loss %.5f dice %.4f", epoch, rec.losses[-1], rec.dice[-1][1])
    if checkpoint is not None:
        save_checkpoint(checkpoint, net, head)
        rec.checkpoint = str(checkpoint)
    return head, rec
