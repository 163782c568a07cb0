"""Pseudo-labeling of unlabeled target images from branch agreement.

A pixel earns a label only when the two labeling branches predict the
same class and the more confident of the two predictions clears the
threshold.  Everything else gets the ignore id, so downstream losses and
metrics skip it.  The target-specific branch is never consulted here;
it is the consumer of these labels, not a producer.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import IGNORE_ID, write_mask_png
from .model import FctnModel
from .tensor import Tensor


@dataclass
class PseudoLabelConfig:
    confidence_threshold: float = 0.95

    def __post_init__(self):
        if not (0.0 < self.confidence_threshold <= 1.0):
            raise ValueError(
                f"confidence_threshold must be in (0, 1], got {self.confidence_threshold}"
            )


@dataclass
class PseudoLabeledSample:
    image: np.ndarray  # H x W x Cin, float32
    mask: np.ndarray  # H x W, uint8 class ids with ignore id
    coverage: float  # labeled fraction of pixels


@dataclass
class PseudoLabeledSet:
    """All target images with their pseudo-label masks, stacked for sampling."""

    images: np.ndarray  # N x H x W x Cin
    masks: np.ndarray  # N x H x W
    coverages: np.ndarray  # N

    def __len__(self):
        return len(self.images)

    def export_masks(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, mask in enumerate(self.masks):
            write_mask_png(out_dir / f"{i:05d}.png", mask)


@dataclass
class LabelingSummary:
    class_pixel_counts: np.ndarray  # labeled pixels per class
    mean_coverage: float
    total_pixels: int

    @property
    def total_labeled(self) -> int:
        return int(self.class_pixel_counts.sum())


def agreement_mask(p1: np.ndarray, p2: np.ndarray, threshold: float, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Apply the two labeling conditions to a pair of probability maps."""
    l1 = p1.argmax(axis=-1)
    l2 = p2.argmax(axis=-1)
    conf = np.maximum(
        np.take_along_axis(p1, l1[..., None], axis=-1)[..., 0],
        np.take_along_axis(p2, l2[..., None], axis=-1)[..., 0],
    )
    keep = (l1 == l2) & (conf >= threshold)
    return np.where(keep, l1, ignore_id).astype(np.uint8)


def label_image(model: FctnModel, image: np.ndarray, cfg: PseudoLabelConfig) -> PseudoLabeledSample:
    image = np.asarray(image, dtype=np.float32)
    with T.no_grad():
        cache = {}
        feats = model.forward_base(Tensor(image), cache)
        p1 = T.softmax_channel(model.forward_branch("branch1", feats, cache)).data
        p2 = T.softmax_channel(model.forward_branch("branch2", feats, cache)).data
    mask = agreement_mask(p1, p2, cfg.confidence_threshold)
    coverage = float((mask != IGNORE_ID).mean())
    return PseudoLabeledSample(image=image, mask=mask, coverage=coverage)


def label_dataset(model: FctnModel, target, cfg: PseudoLabelConfig) -> tuple[PseudoLabeledSet, LabelingSummary]:
    """Pseudo-label every image of a target dataset, keeping all of them.

    ``target`` is anything carrying a stacked ``images`` array; ground
    truth is neither required nor read.
    """
    images = target.images
    if len(images) == 0:
        raise ValueError("label_dataset: empty target set")
    masks = np.empty(images.shape[:3], dtype=np.uint8)
    coverages = np.empty(len(images))
    for i in range(len(images)):
        sample = label_image(model, images[i], cfg)
        masks[i] = sample.mask
        coverages[i] = sample.coverage
    labeled = masks[masks != IGNORE_ID]
    counts = np.bincount(labeled.ravel(), minlength=model.spec.num_classes)
    summary = LabelingSummary(
        class_pixel_counts=counts.astype(np.int64),
        mean_coverage=float(coverages.mean()),
        total_pixels=int(masks.size),
    )
    return PseudoLabeledSet(images=images, masks=masks, coverages=coverages), summary
