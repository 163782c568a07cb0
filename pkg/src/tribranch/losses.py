"""Objective terms for the tri-branch network.

Three ingredients: a weight-similarity penalty that keeps the two
labeling branches from collapsing into one view, pixel-wise softmax
cross-entropy (optionally class-weighted by median frequency
balancing), and the stage totals that combine them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import IGNORE_ID
from .model import FctnModel
from .tensor import Tensor, apply_op

log = logging.getLogger(__name__)

LABELING_BRANCHES = ("branch1", "branch2")
ALL_BRANCHES = ("branch1", "branch2", "branch_t")


# -- weight similarity ---------------------------------------------------------


def _cosine_from_sums(dot: Tensor, q1: Tensor, q2: Tensor) -> Tensor:
    """cos = dot / sqrt(q1*q2) as one fused graph node.

    Fusing keeps the identical-weights case exactly 1.0: there dot, q1
    and q2 are the same float, and sqrt(round(q*q)) == q in IEEE
    round-to-nearest.
    """
    q1v, q2v = float(q1.data), float(q2.data)
    if q1v <= 0 or q2v <= 0:
        raise ValueError("weight_constraint: zero-norm weight vector")
    s = np.sqrt(q1.data * q2.data)
    out = dot.data / s

    def back(g):
        return [
            (dot, g / s),
            (q1, -g * dot.data / (2.0 * q1.data * s)),
            (q2, -g * dot.data / (2.0 * q2.data * s)),
        ]

    return apply_op(out, (dot, q1, q2), back, "cosine")


def weight_constraint(model: FctnModel) -> Tensor:
    """Cosine similarity of the two labeling branches' filter weights.

    The vectors are the flattened, concatenated convolution kernels of
    branch1 and branch2 (biases excluded).  Differentiable w.r.t. both
    branches; value always in [-1, 1].
    """
    w1 = T.concat([T.reshape(k, (k.size,)) for k in model.branch_kernels("branch1")], axis=0)
    w2 = T.concat([T.reshape(k, (k.size,)) for k in model.branch_kernels("branch2")], axis=0)
    dot = T.tsum(T.mul(w1, w2))
    q1 = T.tsum(T.mul(w1, w1))
    q2 = T.tsum(T.mul(w2, w2))
    return _cosine_from_sums(dot, q1, q2)


# -- class weighting -----------------------------------------------------------


@dataclass
class ClassWeights:
    """Per-class loss weights from median frequency balancing.

    alpha[c] = median_freq / freq[c] for classes that occur at all;
    classes never seen keep weight 1.  freq[c] is the pixel count of
    class c divided by the total labeled pixels of the images that
    contain c.
    """

    alpha: np.ndarray
    freq: np.ndarray
    median_freq: float

    @property
    def num_classes(self) -> int:
        return len(self.alpha)


def class_weights(source_labels: Iterable[np.ndarray], num_classes: int, ignore_id: int = IGNORE_ID) -> ClassWeights:
    pixels = np.zeros(num_classes, dtype=np.int64)
    denom = np.zeros(num_classes, dtype=np.int64)
    n_images = 0
    for mask in source_labels:
        n_images += 1
        m = np.asarray(mask)
        valid = m[m != ignore_id]
        if valid.size and (valid.min() < 0 or valid.max() >= num_classes):
            raise ValueError(f"label id outside [0, {num_classes - 1}]")
        counts = np.bincount(valid.ravel(), minlength=num_classes)
        pixels += counts
        denom[counts > 0] += valid.size
    if n_images == 0:
        raise ValueError("class_weights: empty label set")
    present = pixels > 0
    if not np.any(present):
        raise ValueError("class_weights: no labeled pixels in any image")

    freq = np.zeros(num_classes, dtype=np.float64)
    freq[present] = pixels[present] / denom[present]
    median_freq = float(np.median(freq[present]))
    alpha = np.ones(num_classes, dtype=np.float64)
    alpha[present] = median_freq / freq[present]
    for c in np.flatnonzero(~present):
        log.warning("class %d absent from the labeled set; weight defaults to 1", c)
    return ClassWeights(alpha=alpha, freq=freq, median_freq=median_freq)


# -- cross-entropy --------------------------------------------------------------


def ce_loss(
    logits: Tensor,
    labels: np.ndarray,
    weights: Optional[ClassWeights] = None,
    ignore_id: int = IGNORE_ID,
) -> Tensor:
    """Mean over labeled pixels of -alpha[y] * log softmax(logits)[y].

    Pixels carrying the ignore id contribute nothing.  If every pixel
    is ignored the result is a constant zero tensor whose
    ``all_ignored`` attribute is True.
    """
    h, w, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_id
    picked_ids = np.where(valid, labels, 0)
    if picked_ids.min() < 0 or (valid.any() and labels[valid].max() >= c):
        raise ValueError(f"label id outside [0, {c - 1}]")
    n_valid = int(valid.sum())
    if n_valid == 0:
        out = Tensor(np.zeros((), dtype=logits.dtype))
        out.all_ignored = True
        return out

    # Ignored pixels select every channel; the selection stays finite and
    # the zero weight drops them from both value and gradient.
    onehot = np.zeros((h, w, c), dtype=logits.data.dtype)
    np.put_along_axis(onehot, picked_ids[..., None], 1.0, axis=-1)
    onehot[~valid] = 1.0
    alpha = weights.alpha if weights is not None else np.ones(c)
    wmap = np.where(valid, alpha[picked_ids], 0.0).astype(logits.data.dtype) / n_valid

    # Work in the log domain: -log softmax(x)[y] = logsumexp(x) - x[y].
    # The per-pixel max is subtracted as a constant shift (logsumexp is
    # shift-invariant, so the gradient is unchanged) which pins the summed
    # exponentials to [1, c] and keeps the log finite even when the softmax
    # saturates and individual probabilities underflow to zero.
    shift = np.max(logits.data, axis=-1, keepdims=True)
    shifted = T.sub(logits, Tensor(np.broadcast_to(shift, (h, w, c)).astype(logits.data.dtype)))
    lse = T.log(T.tsum(T.exp(shifted), axis=-1))
    picked = T.tsum(T.mul(shifted, Tensor(onehot)), axis=-1)
    loss = T.tsum(T.mul(T.sub(lse, picked), Tensor(wmap)))
    loss.all_ignored = False
    return loss


# -- totals ----------------------------------------------------------------------


@dataclass
class LossBundle:
    """Scalar graph roots for one optimization step.

    ``target_ce`` is None during pretraining (no pseudo-labeled batch).
    ``total`` is weight_similarity scaled by alpha, plus source_ce,
    plus beta times target_ce when present.
    """

    weight_similarity: Tensor
    source_ce: Tensor
    target_ce: Optional[Tensor]
    total: Tensor


def _batch_ce(model: FctnModel, branches: Sequence[str], batch, weights) -> Tensor:
    """Per-image cross-entropy averaged over the batch and the given branches."""
    images, masks = batch.images, batch.masks
    acc = None
    for b in range(len(images)):
        image = Tensor(images[b], dtype=model.dtype)
        cache = {}
        feats = model.forward_base(image, cache)
        for which in branches:
            logits = model.forward_branch(which, feats, cache)
            term = ce_loss(logits, masks[b], weights)
            acc = term if acc is None else T.add(acc, term)
    return T.mul(acc, 1.0 / (len(images) * len(branches)))


def target_ce_loss(model: FctnModel, target_batch, weights: ClassWeights) -> Tensor:
    """The curriculum target term alone: class-weighted CE averaged over
    all three branches.  Used when the two loss streams are stepped
    separately instead of jointly."""
    if weights is None:
        raise ValueError("target_ce_loss: class weights required")
    return _batch_ce(model, ALL_BRANCHES, target_batch, weights)


def total_loss(
    model: FctnModel,
    source_batch,
    target_batch=None,
    weights: Optional[ClassWeights] = None,
    alpha: float = 1000.0,
    beta: float = 100.0,
    source_branches: Sequence[str] = LABELING_BRANCHES,
) -> LossBundle:
    """Stage total: alpha * weight similarity + source CE (+ beta * target CE).

    Source CE is unweighted and averaged over ``source_branches``
    (the labeling pair by default; pretraining passes all three so the
    target branch starts from source supervision).  Target CE is
    class-weighted and always averaged over all three branches.
    """
    similarity = weight_constraint(model)
    source_ce = _batch_ce(model, source_branches, source_batch, None)
    total = T.add(T.mul(similarity, alpha), source_ce)
    target_ce = None
    if target_batch is not None:
        if weights is None:
            raise ValueError("total_loss: target batch supplied without class weights")
        target_ce = _batch_ce(model, ALL_BRANCHES, target_batch, weights)
        total = T.add(total, T.mul(target_ce, beta))
    return LossBundle(
        weight_similarity=similarity,
        source_ce=source_ce,
        target_ce=target_ce,
        total=total,
    )
