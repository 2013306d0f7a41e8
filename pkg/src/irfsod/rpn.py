"""Region proposal network with semi-supervised anchor labeling.

Standard IoU labeling (below 0.3 negative, above 0.7 positive) is extended
by a pseudo-positive pass: negatives whose predicted objectness exceeds a
threshold tau are relabeled and receive the positive classification loss.
Negatives at base training time are a mix of background and unannotated
foreground, so high-scoring ones are treated as unlabeled objects rather
than hard negatives. Pseudo positives never get a regression target.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import SSRPNConfig
from .geometry import clip_boxes, decode_deltas, encode_deltas, iou_matrix, nms_indices

LABEL_IGNORE = -1
LABEL_NEGATIVE = 0
LABEL_POSITIVE = 1
LABEL_PSEUDO_POSITIVE = 2


@dataclass
class AnchorBatch:
    """Anchors with labels, matched ground truth, and (optionally) predictions.

    matched_gt_index is -1 for anchors without a matched box; positives
    always have a match, pseudo positives never do.
    """

    anchors: np.ndarray
    labels: np.ndarray
    matched_gt_index: np.ndarray
    gt_boxes: np.ndarray
    objectness: np.ndarray | None = None

    def matched_gt(self, anchor_index: int) -> np.ndarray | None:
        g = int(self.matched_gt_index[anchor_index])
        return None if g < 0 else self.gt_boxes[g]

    def check_invariants(self):
        pos = self.labels == LABEL_POSITIVE
        pseudo = self.labels == LABEL_PSEUDO_POSITIVE
        if np.any(self.matched_gt_index[pos] < 0):
            raise AssertionError("positive anchor without matched ground truth")
        if np.any(self.matched_gt_index[pseudo] >= 0):
            raise AssertionError("pseudo positive anchor with matched ground truth")


def generate_anchors(fm_shape: tuple[int, int], stride: int,
                     scales, ratios) -> np.ndarray:
    """One anchor per (cell, ratio, scale), centered on cell centers.

    Cells are row-major and the (ratio, scale) pair is the inner index, so
    row k corresponds to cell k // A and anchor variant k % A. A ratio is
    height/width; areas equal scale^2, so ratio 1 gives side length scale.
    """
    h, w = fm_shape
    if h < 1 or w < 1:
        raise ValueError(f"feature map shape must be positive, got {fm_shape}")
    scales = np.asarray(scales, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    widths = (scales[None, :] / np.sqrt(ratios)[:, None]).reshape(-1)
    heights = (scales[None, :] * np.sqrt(ratios)[:, None]).reshape(-1)
    cx = (np.arange(w, dtype=np.float64) + 0.5) * stride
    cy = (np.arange(h, dtype=np.float64) + 0.5) * stride
    cxg, cyg = np.meshgrid(cx, cy)
    centers = np.stack([cxg.reshape(-1), cyg.reshape(-1)], axis=1)
    half = np.stack([widths, heights], axis=1) / 2.0
    lo = centers[:, None, :] - half[None, :, :]
    hi = centers[:, None, :] + half[None, :, :]
    return np.concatenate([lo, hi], axis=2).reshape(-1, 4)


def label_anchors(anchors: np.ndarray, gt_boxes: np.ndarray,
                  neg_iou: float = 0.3, pos_iou: float = 0.7) -> AnchorBatch:
    """IoU-threshold labeling with the per-ground-truth argmax guarantee.

    Max IoU strictly below neg_iou -> negative, strictly above pos_iou ->
    positive (matched to the argmax box), in between -> ignore. The best
    anchor(s) for each ground-truth box are positive regardless, so no box
    goes unmatched. With no ground truth, every anchor is negative.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = anchors.shape[0]
    if gt_boxes.shape[0] == 0:
        return AnchorBatch(anchors=anchors,
                           labels=np.full(n, LABEL_NEGATIVE, dtype=np.int64),
                           matched_gt_index=np.full(n, -1, dtype=np.int64),
                           gt_boxes=gt_boxes)
    ious = iou_matrix(anchors, gt_boxes)
    max_iou = ious.max(axis=1)
    argmax = ious.argmax(axis=1)
    labels = np.full(n, LABEL_IGNORE, dtype=np.int64)
    labels[max_iou < neg_iou] = LABEL_NEGATIVE
    labels[max_iou > pos_iou] = LABEL_POSITIVE
    matched = np.where(labels == LABEL_POSITIVE, argmax, -1)
    for g in range(gt_boxes.shape[0]):
        best = ious[:, g].max()
        if best <= 0.0:
            continue
        winners = np.nonzero(ious[:, g] == best)[0]
        labels[winners] = LABEL_POSITIVE
        matched[winners] = g
    return AnchorBatch(anchors=anchors, labels=labels,
                       matched_gt_index=matched, gt_boxes=gt_boxes)


def assign_pseudo_labels(batch: AnchorBatch, tau: float) -> AnchorBatch:
    """Relabel negatives with objectness strictly above tau as pseudo positive.

    Positives and ignores are untouched; pseudo positives keep no matched
    box. Pure: returns a new batch.
    """
    if batch.objectness is None:
        raise ValueError("objectness must be populated before pseudo-labeling")
    objectness = np.asarray(batch.objectness, dtype=np.float64).reshape(-1)
    labels = batch.labels.copy()
    promote = (labels == LABEL_NEGATIVE) & (objectness > tau)
    labels[promote] = LABEL_PSEUDO_POSITIVE
    return replace(batch, labels=labels)


@dataclass
class SampledIndices:
    positive: np.ndarray
    negative: np.ndarray
    pseudo_positive: np.ndarray

    @property
    def total(self) -> int:
        return len(self.positive) + len(self.negative) + len(self.pseudo_positive)


def sample_batch(batch: AnchorBatch, caps: tuple[int, int, int],
                 rng: np.random.Generator) -> SampledIndices:
    """Uniform without-replacement sampling, at most a cap per label class.

    Deficits in positives or pseudo positives are backfilled with extra
    negatives so the total stays sum(caps) whenever enough negatives exist.
    """
    cap_pos, cap_neg, cap_pseudo = caps
    pos_pool = np.nonzero(batch.labels == LABEL_POSITIVE)[0]
    neg_pool = np.nonzero(batch.labels == LABEL_NEGATIVE)[0]
    pseudo_pool = np.nonzero(batch.labels == LABEL_PSEUDO_POSITIVE)[0]
    if len(pos_pool) + len(neg_pool) + len(pseudo_pool) == 0:
        raise ValueError("no anchors available to sample")

    def draw(pool: np.ndarray, k: int) -> np.ndarray:
        k = min(k, len(pool))
        if k <= 0:
            return np.zeros(0, dtype=np.int64)
        return np.sort(rng.choice(pool, size=k, replace=False))

    pos = draw(pos_pool, cap_pos)
    pseudo = draw(pseudo_pool, cap_pseudo)
    deficit = (cap_pos - len(pos)) + (cap_pseudo - len(pseudo))
    neg = draw(neg_pool, cap_neg + deficit)
    return SampledIndices(positive=pos, negative=neg, pseudo_positive=pseudo)


class RPNHead(nn.Module):
    """Shared 3x3 conv, then 1x1 objectness and delta branches.

    Output ordering matches generate_anchors: cells row-major, anchor
    variant innermost.
    """

    def __init__(self, channels: int, anchors_per_cell: int):
        super().__init__()
        self.anchors_per_cell = anchors_per_cell
        self.trunk = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.objectness = nn.Conv2d(channels, anchors_per_cell, kernel_size=1)
        self.deltas = nn.Conv2d(channels, 4 * anchors_per_cell, kernel_size=1)
        for conv in (self.trunk, self.objectness, self.deltas):
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)

    def forward(self, fm_values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(C, H, W) feature map -> objectness logits (N,) and deltas (N, 4)."""
        x = F.relu(self.trunk(fm_values.unsqueeze(0)))
        a = self.anchors_per_cell
        logits = self.objectness(x)[0].permute(1, 2, 0).reshape(-1)
        deltas = self.deltas(x)[0].reshape(a, 4, x.shape[2], x.shape[3])
        deltas = deltas.permute(2, 3, 0, 1).reshape(-1, 4)
        return logits, deltas


def rpn_forward(head: RPNHead, fm_values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Objectness probabilities (logistic-squashed) and deltas per anchor."""
    logits, deltas = head(fm_values)
    return torch.sigmoid(logits), deltas


def rpn_loss(logits: torch.Tensor, deltas: torch.Tensor, batch: AnchorBatch,
             sampled: SampledIndices) -> tuple[torch.Tensor, torch.Tensor]:
    """Classification and regression losses over a sampled anchor batch.

    Positives and pseudo positives share the positive classification target;
    regression (smooth L1 against encoded matched boxes, summed over the four
    coordinates) applies to true positives only, since pseudo positives have
    no box to regress to. Each loss is averaged over its own anchor count.
    """
    cls_idx = np.concatenate([sampled.positive, sampled.pseudo_positive, sampled.negative])
    cls_targets = np.concatenate([
        np.ones(len(sampled.positive) + len(sampled.pseudo_positive)),
        np.zeros(len(sampled.negative)),
    ])
    if len(cls_idx) == 0:
        cls_loss = logits.sum() * 0.0
    else:
        idx = torch.as_tensor(cls_idx, dtype=torch.long)
        targets = torch.as_tensor(cls_targets, dtype=logits.dtype)
        cls_loss = F.binary_cross_entropy_with_logits(logits[idx], targets)

    pos = sampled.positive
    if len(pos) == 0:
        reg_loss = deltas.sum() * 0.0
    else:
        matched = batch.gt_boxes[batch.matched_gt_index[pos]]
        target_deltas = encode_deltas(matched, batch.anchors[pos])
        pred = deltas[torch.as_tensor(pos, dtype=torch.long)]
        target = torch.as_tensor(target_deltas, dtype=deltas.dtype)
        reg_loss = F.smooth_l1_loss(pred, target, reduction="sum") / len(pos)
    return cls_loss, reg_loss


def propose(objectness: np.ndarray, deltas: np.ndarray, anchors: np.ndarray,
            image_size: tuple[int, int], cfg: SSRPNConfig) -> tuple[np.ndarray, np.ndarray]:
    """Decode scored anchors into proposals: top-n, decode, clip, NMS, top-n.

    image_size is (width, height). Returns (boxes (M, 4), scores (M,)),
    highest score first; ties resolved by input order throughout.
    """
    objectness = np.asarray(objectness, dtype=np.float64).reshape(-1)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-objectness, kind="stable")[: cfg.pre_nms_top_n]
    boxes = decode_deltas(anchors[order], deltas[order])
    boxes = clip_boxes(boxes, image_size[0], image_size[1])
    scores = objectness[order]
    keep = nms_indices(boxes, scores, cfg.proposal_nms_threshold,
                       max_keep=cfg.post_nms_top_n)
    return boxes[keep], scores[keep]
