"""Contrastive base training and checkpointing.

Each step builds a 2-way episode around one query image: a positive
category present in the image and a negative category absent from it, each
with a fixed-size support set drawn from the base split. The comparison
classifier learns from both pairings (match the same category, distinguish
the different one); box regression is supervised only by proposals matched
to the positive category. The step loss is the plain sum of the RPN and
RoI-head terms.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .config import RunConfig
from .data import DatasetSplit, ImageRecord, SupportInstance, SupportSet, load_image
from .detector import FewShotDetector
from .errors import CheckpointError, DataError, NumericalError
from .features import SupportFeature
from .geometry import encode_deltas, iou_matrix
from .heads import distance_logits
from .rpn import assign_pseudo_labels, label_anchors, rpn_loss, sample_batch


@dataclass
class ContrastiveEpisode:
    """One query image with its positive/negative category support sets."""

    record: ImageRecord
    positive_category: int
    negative_category: int
    positive_supports: SupportSet
    negative_supports: SupportSet

    def check_invariants(self):
        present = {a.category for a in self.record.annotations}
        if self.positive_category not in present:
            raise AssertionError("positive category missing from query image")
        if self.negative_category in present:
            raise AssertionError("negative category present in query image")
        if self.positive_category == self.negative_category:
            raise AssertionError("episode categories must differ")


class SupportPool:
    """Per-category instance index for fast episode sampling."""

    def __init__(self, split: DatasetSplit):
        self.by_category: dict[int, list[SupportInstance]] = {}
        for rec in split.records:
            for ann in rec.annotations:
                self.by_category.setdefault(ann.category, []).append(
                    SupportInstance(record=rec, box=ann.box))

    def count(self, category: int, exclude_image: int | None = None) -> int:
        pool = self.by_category.get(category, [])
        if exclude_image is None:
            return len(pool)
        return sum(1 for inst in pool if inst.record.image_id != exclude_image)

    def sample(self, category: int, k: int, rng: np.random.Generator,
               exclude_image: int | None = None) -> SupportSet:
        pool = self.by_category.get(category, [])
        if exclude_image is not None:
            pool = [inst for inst in pool if inst.record.image_id != exclude_image]
        if len(pool) < k:
            raise DataError(f"category {category} has {len(pool)} usable instances, need {k}")
        chosen = rng.choice(len(pool), size=k, replace=False)
        return SupportSet(category=category, items=[pool[int(i)] for i in chosen])


def build_contrastive_episode(record: ImageRecord, split: DatasetSplit, k: int,
                              rng: np.random.Generator,
                              pool: SupportPool | None = None) -> ContrastiveEpisode | None:
    """Sample the 2-way episode for one query image, or None if ineligible.

    The positive category must appear in the image and have at least k
    instances elsewhere (the query's own boxes never serve as supports);
    the negative category must be absent from the image. Returns None when
    either is impossible, so callers can skip the image.
    """
    pool = pool or SupportPool(split)
    base = split.base_categories
    present = sorted({a.category for a in record.annotations if a.category in base})
    eligible_pos = [c for c in present
                    if pool.count(c, exclude_image=record.image_id) >= k]
    eligible_neg = [c for c in sorted(base)
                    if c not in present and pool.count(c) >= k]
    if not eligible_pos or not eligible_neg:
        return None
    c1 = int(rng.choice(eligible_pos))
    c2 = int(rng.choice(eligible_neg))
    return ContrastiveEpisode(
        record=record, positive_category=c1, negative_category=c2,
        positive_supports=pool.sample(c1, k, rng, exclude_image=record.image_id),
        negative_supports=pool.sample(c2, k, rng))


def match_proposals(proposals: np.ndarray, gt_boxes: np.ndarray,
                    pos_iou: float) -> tuple[np.ndarray, np.ndarray]:
    """Label proposals 1 when max IoU >= pos_iou; match to the argmax box."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = proposals.shape[0]
    if gt_boxes.shape[0] == 0 or n == 0:
        return np.zeros(n, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    ious = iou_matrix(proposals, gt_boxes)
    max_iou = ious.max(axis=1)
    labels = (max_iou >= pos_iou).astype(np.int64)
    matched = np.where(labels == 1, ious.argmax(axis=1), -1)
    return labels, matched


def roi_classification_loss(scores_vs_positive: torch.Tensor,
                            labels_vs_positive: torch.Tensor,
                            scores_vs_negative: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over both support pairings.

    Proposals matched to the positive category's boxes carry target 1
    against its supports; everything carries target 0 against the negative
    category's supports.
    """
    scores = torch.cat([scores_vs_positive, scores_vs_negative])
    targets = torch.cat([labels_vs_positive.to(scores.dtype),
                         torch.zeros_like(scores_vs_negative)])
    return F.binary_cross_entropy(scores, targets)


def _roi_classification_loss_logits(logits_pos: torch.Tensor, labels_pos: torch.Tensor,
                                    logits_neg: torch.Tensor) -> torch.Tensor:
    logits = torch.cat([logits_pos, logits_neg])
    targets = torch.cat([labels_pos.to(logits.dtype), torch.zeros_like(logits_neg)])
    return F.binary_cross_entropy_with_logits(logits, targets)


def roi_regression_loss(pred_deltas: torch.Tensor, proposals: np.ndarray,
                        gt_boxes: np.ndarray, labels: np.ndarray,
                        matched: np.ndarray) -> torch.Tensor:
    """Smooth L1 against encoded matched boxes, positive proposals only.

    Summed over the four coordinates and averaged over matched proposals;
    zero when nothing matched.
    """
    pos = np.nonzero(labels == 1)[0]
    if len(pos) == 0:
        return pred_deltas.sum() * 0.0
    targets = encode_deltas(gt_boxes[matched[pos]], np.asarray(proposals)[pos])
    pred = pred_deltas[torch.as_tensor(pos, dtype=torch.long)]
    target = torch.as_tensor(targets, dtype=pred_deltas.dtype)
    return F.smooth_l1_loss(pred, target, reduction="sum") / len(pos)


@dataclass(frozen=True)
class LossBundle:
    """One step's loss decomposition; total is the exact component sum."""

    rpn_cls: float
    rpn_reg: float
    cls: float
    reg: float

    @property
    def rpn(self) -> float:
        return self.rpn_cls + self.rpn_reg

    @property
    def total(self) -> float:
        return self.rpn + self.cls + self.reg

    def check_invariants(self):
        parts = (self.rpn_cls, self.rpn_reg, self.cls, self.reg)
        if not all(math.isfinite(p) and p >= 0 for p in parts):
            raise AssertionError(f"loss components must be finite and >= 0: {parts}")


def total_loss(rpn_cls, rpn_reg, cls, reg) -> LossBundle:
    """Bundle the four loss terms; any non-finite component aborts the step."""
    values = [float(v) for v in (rpn_cls, rpn_reg, cls, reg)]
    if not all(math.isfinite(v) for v in values):
        raise NumericalError(f"non-finite loss components: {values}")
    return LossBundle(*values)


def _support_arrays(support_set: SupportSet) -> list[tuple[np.ndarray, object]]:
    return [(load_image(inst.record.path), inst.box) for inst in support_set.items]


def episode_loss(detector: FewShotDetector, episode: ContrastiveEpisode,
                 rng: np.random.Generator, iteration: int = 0,
                 image: np.ndarray | None = None) -> tuple[torch.Tensor, LossBundle]:
    """Forward one episode and return (differentiable total, logged bundle)."""
    cfg = detector.run_config
    record = episode.record
    if image is None:
        image = load_image(record.path)

    fm = detector.feature_map(image)
    logits, deltas = detector.rpn(fm)
    anchors = detector.anchors_for(fm)

    all_gt = np.array([a.box.to_array() for a in record.annotations]).reshape(-1, 4)
    batch = label_anchors(anchors, all_gt, cfg.rpn.neg_iou, cfg.rpn.pos_iou)
    use_pseudo = cfg.ablation.ss_rpn and iteration > cfg.rpn.pseudo_warmup_iters
    if use_pseudo:
        batch.objectness = torch.sigmoid(logits).detach().numpy()
        batch = assign_pseudo_labels(batch, cfg.rpn.tau)
    sampled = sample_batch(batch, cfg.rpn.caps, rng)
    rpn_cls, rpn_reg = rpn_loss(logits, deltas, batch, sampled)

    objectness = torch.sigmoid(logits).detach().numpy()
    proposals, _ = detector.proposals(fm, (record.width, record.height),
                                      objectness, deltas.detach().numpy())
    regions = detector.region_features(fm, proposals)

    proto_pos = detector.prototype_from_arrays(
        _support_arrays(episode.positive_supports), episode.positive_category)
    proto_neg = detector.prototype_from_arrays(
        _support_arrays(episode.negative_supports), episode.negative_category)

    gt_pos = np.array([a.box.to_array() for a in record.annotations
                       if a.category == episode.positive_category]).reshape(-1, 4)
    labels, matched = match_proposals(proposals, gt_pos, cfg.heads.roi_pos_iou)
    labels_t = torch.as_tensor(labels, dtype=regions.dtype)

    mode = cfg.ablation.classifier
    if mode in ("dynamic", "comparison"):
        logit_pos = detector.comparison_head.forward_logit(regions, proto_pos.values)
        logit_neg = detector.comparison_head.forward_logit(regions, proto_neg.values)
        cls_loss = _roi_classification_loss_logits(logit_pos, labels_t, logit_neg)
    elif mode == "distance":
        alpha, lam = cfg.effective_alpha(), cfg.heads.lam
        logit_pos = distance_logits(regions, proto_pos, alpha, lam)
        logit_neg = distance_logits(regions, proto_neg, alpha, lam)
        cls_loss = _roi_classification_loss_logits(logit_pos, labels_t, logit_neg)
    elif mode == "multi":
        cls_loss = _multi_class_loss(detector, regions, proposals, record, cfg)
    else:
        raise NumericalError(f"unknown classifier mode {mode!r}")

    pos = np.nonzero(labels == 1)[0]
    if len(pos) == 0:
        reg_loss = regions.sum() * 0.0
    else:
        pos_regions = regions[torch.as_tensor(pos, dtype=torch.long)]
        pred = detector.regressor(pos_regions, proto_pos.values)
        targets = encode_deltas(gt_pos[matched[pos]], proposals[pos])
        target = torch.as_tensor(targets, dtype=pred.dtype)
        reg_loss = F.smooth_l1_loss(pred, target, reduction="sum") / len(pos)

    step = rpn_cls + rpn_reg + cls_loss + reg_loss
    bundle = total_loss(rpn_cls.detach(), rpn_reg.detach(),
                        cls_loss.detach(), reg_loss.detach())
    return step, bundle


def _multi_class_loss(detector: FewShotDetector, regions: torch.Tensor,
                      proposals: np.ndarray, record: ImageRecord,
                      cfg: RunConfig) -> torch.Tensor:
    """Cross-entropy over base categories + background for every proposal."""
    gt_boxes = np.array([a.box.to_array() for a in record.annotations]).reshape(-1, 4)
    gt_cats = [a.category for a in record.annotations]
    labels, matched = match_proposals(proposals, gt_boxes, cfg.heads.roi_pos_iou)
    background = len(detector.base_categories)
    targets = np.full(len(proposals), background, dtype=np.int64)
    for i in np.nonzero(labels == 1)[0]:
        idx = detector.multi_category_index(gt_cats[matched[i]])
        if idx is not None:
            targets[i] = idx
    logits = detector.multi_head(regions.mean(dim=(2, 3)))
    return F.cross_entropy(logits, torch.as_tensor(targets, dtype=torch.long))


@dataclass
class TrainResult:
    detector: FewShotDetector
    log: list[dict]
    seconds: float


def train(split: DatasetSplit, config: RunConfig,
          log_path: str | Path | None = None,
          progress: bool = False) -> TrainResult:
    """Run the full schedule over the base split; deterministic per seed."""
    config = config.resolve()
    tc = config.train
    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)

    detector = FewShotDetector(config, base_categories=tuple(sorted(split.base_categories)))
    detector.train()
    optimizer = torch.optim.SGD(detector.parameters(), lr=tc.lr,
                                momentum=tc.momentum, weight_decay=tc.weight_decay)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=list(tc.milestones), gamma=tc.decay_factor)

    pool = SupportPool(split)
    records = list(split.records)
    if not records:
        raise DataError("training split has no images")
    order: list[int] = []
    log: list[dict] = []
    log_file = open(log_path, "w") if log_path is not None else None
    started = time.perf_counter()
    try:
        iteration = 0
        skipped_streak = 0
        while iteration < tc.iterations:
            if not order:
                order = list(rng.permutation(len(records)))
            record = records[order.pop()]
            episode = build_contrastive_episode(record, split, tc.support_shots, rng, pool)
            if episode is None:
                skipped_streak += 1
                if skipped_streak > 2 * len(records):
                    raise DataError("no image yields a valid contrastive episode")
                continue
            skipped_streak = 0
            iteration += 1

            step, bundle = episode_loss(detector, episode, rng, iteration=iteration)
            lr_used = optimizer.param_groups[0]["lr"]
            optimizer.zero_grad()
            step.backward()
            optimizer.step()
            scheduler.step()

            entry = {"iteration": iteration, "l_rpn": bundle.rpn,
                     "l_cls": bundle.cls, "l_reg": bundle.reg,
                     "total": bundle.total, "lr": lr_used}
            log.append(entry)
            if log_file is not None:
                log_file.write(json.dumps(entry) + "\n")
            if progress and iteration % tc.log_every == 0:
                print(f"iter {iteration}/{tc.iterations} "
                      f"total {bundle.total:.4f} lr {entry['lr']:.5f}")
    finally:
        if log_file is not None:
            log_file.close()
    detector.eval()
    return TrainResult(detector=detector, log=log,
                       seconds=time.perf_counter() - started)


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary container with named parameter blobs
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"IRFSOD"
CHECKPOINT_VERSION = 1
_DTYPES = {"<f4": 1, "<f8": 2, "<i8": 3}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(detector: FewShotDetector, path: str | Path) -> None:
    """Write magic, version, config snapshot, and raw parameter blobs."""
    header = {
        "config": detector.run_config.to_flat_dict(),
        "base_categories": list(detector.base_categories) if detector.base_categories else None,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    state = detector.state_dict()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name].detach().cpu().numpy())
            dtype_key = arr.dtype.newbyteorder("<").str
            if dtype_key not in _DTYPES:
                raise CheckpointError(f"unsupported parameter dtype {arr.dtype} for {name}")
            name_bytes = name.encode()
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<BB", _DTYPES[dtype_key], arr.ndim))
            fh.write(struct.pack(f"<{max(arr.ndim, 0)}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> FewShotDetector:
    """Rebuild the detector from a checkpoint; bit-exact parameter round trip."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    view = memoryview(data)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"truncated checkpoint: {path}")
        chunk = view[off:off + n]
        off += n
        return chunk

    if bytes(take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint (bad magic): {path}")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    (header_len,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(bytes(take(header_len)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc

    config = RunConfig.from_flat_dict(header["config"])
    base = header.get("base_categories")
    detector = FewShotDetector(config, base_categories=tuple(base) if base else None)

    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        dtype_code, ndim = struct.unpack("<BB", take(2))
        if dtype_code not in _DTYPE_NAMES:
            raise CheckpointError(f"unknown dtype code {dtype_code} for {name}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        dtype = np.dtype(_DTYPE_NAMES[dtype_code])
        n_bytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        arr = np.frombuffer(take(n_bytes), dtype=dtype).reshape(shape).copy()
        state[name] = torch.from_numpy(arr)
    missing = set(detector.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
    detector.load_state_dict(state)
    detector.eval()
    return detector
