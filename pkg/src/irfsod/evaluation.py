"""Inference and evaluation: detect, COCO-style AP/AR, and both protocols.

detect() runs the full no-update pipeline for novel categories given only
support prototypes: propose, pool, score each region against each prototype
with the parameter-free distance head, regress, threshold, and suppress.
The one-time protocol scores the whole test set once; meta-testing averages
per-episode results over many sampled episodes with a 95% confidence
interval. Nothing here ever writes a model parameter.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import DatasetSplit, SupportSet, instances_of, load_image
from .detector import FewShotDetector
from .errors import DataError
from .features import SupportFeature
from .geometry import Box, Detection, clip_boxes, decode_deltas, iou_matrix, nms

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
# COCO pixel-area buckets.
AREA_BUCKETS = {
    "all": (0.0, math.inf),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, math.inf),
}
MAX_DETECTIONS = (1, 10, 100)

METRIC_FIELDS = ("ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large",
                 "ar1", "ar10", "ar100", "ar_small", "ar_medium", "ar_large")


@dataclass
class EvalResult:
    """The twelve COCO-style metrics, optionally with CI and timing."""

    ap: float = 0.0
    ap50: float = 0.0
    ap75: float = 0.0
    ap_small: float = 0.0
    ap_medium: float = 0.0
    ap_large: float = 0.0
    ar1: float = 0.0
    ar10: float = 0.0
    ar100: float = 0.0
    ar_small: float = 0.0
    ar_medium: float = 0.0
    ar_large: float = 0.0
    episodes: int | None = None
    seconds_per_episode: float | None = None
    ci: dict[str, float] | None = None

    def metrics(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_FIELDS}

    def to_dict(self) -> dict:
        out: dict = dict(self.metrics())
        if self.episodes is not None:
            out["episodes"] = self.episodes
        if self.seconds_per_episode is not None:
            out["seconds_per_episode"] = self.seconds_per_episode
        if self.ci is not None:
            out["ci95"] = dict(self.ci)
        return out

    def check_invariants(self):
        for name, value in self.metrics().items():
            if not (0.0 <= value <= 1.0):
                raise AssertionError(f"{name}={value} outside [0, 1]")
        if self.ap > self.ap50 + 1e-9:
            raise AssertionError(f"ap={self.ap} exceeds ap50={self.ap50}")


def compute_prototypes(model: FewShotDetector,
                       support_sets: list[SupportSet]) -> list[SupportFeature]:
    """Average support RoI features per category, without gradient tracking."""
    prototypes = []
    with torch.no_grad():
        for support in support_sets:
            items = [(load_image(inst.record.path), inst.box) for inst in support.items]
            prototypes.append(model.prototype_from_arrays(items, support.category))
    return prototypes


def _as_prototypes(model: FewShotDetector, supports) -> list[SupportFeature]:
    if not supports:
        raise DataError("detect needs at least one support set")
    if all(isinstance(s, SupportFeature) for s in supports):
        return list(supports)
    return compute_prototypes(model, list(supports))


def detect(image: np.ndarray, supports, model: FewShotDetector,
           cfg: RunConfig | None = None) -> list[Detection]:
    """Detect the support categories in one image, with no parameter updates.

    ``supports`` may be SupportSet objects or precomputed SupportFeature
    prototypes. Scores are the distance-head probabilities (float64 so the
    sharp logistic stays rankable); per-category NMS of the regressed boxes
    follows, then a global cap by score.
    """
    cfg = (cfg or model.run_config).resolve()
    prototypes = _as_prototypes(model, supports)
    height, width = image.shape[0], image.shape[1]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            fm = model.feature_map(image)
            logits, deltas = model.rpn(fm)
            objectness = torch.sigmoid(logits).numpy()
            boxes, _ = model.proposals(fm, (width, height), objectness, deltas.numpy())
            if boxes.shape[0] == 0:
                return []
            regions = model.region_features(fm, boxes)

            detections: list[Detection] = []
            for proto in prototypes:
                scores = _category_scores(model, regions, proto, cfg)
                if scores is None:
                    continue
                reg = model.regressor(regions, proto.values).numpy()
                refined = clip_boxes(decode_deltas(boxes, reg), width, height)
                keep = np.nonzero(scores > cfg.heads.score_threshold)[0]
                for i in keep:
                    detections.append(Detection(box=Box.from_array(refined[i]),
                                                category=proto.category,
                                                score=float(scores[i])))
            detections = nms(detections, cfg.eval.nms_threshold)
            return detections[: cfg.eval.max_detections]
    finally:
        if was_training:
            model.train()


def _category_scores(model: FewShotDetector, regions: torch.Tensor,
                     proto: SupportFeature, cfg: RunConfig) -> np.ndarray | None:
    """Per-proposal probabilities for one category under the classifier toggle.

    Returns None when the classifier cannot represent the category at all
    (the multi-class baseline asked about a non-base category).
    """
    from .heads import distance_scores

    mode = cfg.ablation.classifier
    if mode in ("dynamic", "distance"):
        return distance_scores(regions, proto, cfg.effective_alpha(),
                               cfg.heads.lam).numpy()
    if mode == "comparison":
        probs = model.comparison_head(regions, proto.values)
        return probs.double().numpy()
    if mode == "multi":
        column = model.multi_category_index(proto.category)
        if column is None:
            return None
        probs = model.multi_head.probabilities(regions.mean(dim=(2, 3)).double())
        return probs[:, column].numpy()
    raise DataError(f"unknown classifier mode {mode!r}")


# ---------------------------------------------------------------------------
# COCO-style AP / AR
# ---------------------------------------------------------------------------


def _match_image(det_boxes: np.ndarray, det_order: np.ndarray, gt_boxes: np.ndarray,
                 gt_ignore: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy score-ordered matching for one image and category.

    Returns (matched_gt_index per det in given order, gt matched flags).
    Ignored ground truth may only absorb a detection when no regular box
    qualifies; matching prefers the highest IoU at or above the threshold.
    """
    n_gt = gt_boxes.shape[0]
    gt_matched = np.full(n_gt, False)
    det_match = np.full(len(det_order), -1, dtype=np.int64)
    if n_gt == 0 or len(det_order) == 0:
        return det_match, gt_matched
    ious = iou_matrix(det_boxes[det_order], gt_boxes)
    gt_order = np.argsort(gt_ignore, kind="stable")  # regular boxes first
    for di in range(len(det_order)):
        best = -1
        best_iou = -1.0
        for g in gt_order:
            if gt_matched[g]:
                continue
            if best >= 0 and not gt_ignore[best] and gt_ignore[g]:
                break  # only ignored boxes remain and a regular match exists
            v = ious[di, g]
            if v < threshold or v <= best_iou:
                continue
            best_iou = v
            best = g
        if best >= 0:
            det_match[di] = best
            gt_matched[best] = True
    return det_match, gt_matched


def _interpolated_ap(tp: np.ndarray, fp: np.ndarray, n_positive: int) -> float:
    """101-point interpolated average precision from score-ordered TP/FP flags."""
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / n_positive
    precision = tp_cum / (tp_cum + fp_cum)
    # Monotone envelope: precision at recall r is the best precision at >= r.
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    indices = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(indices < len(precision),
                       precision[np.minimum(indices, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def compute_ap(detections_by_image: dict[int, list[Detection]],
               gts_by_image: dict[int, list[tuple[int, Box]]],
               iou_thresholds=IOU_THRESHOLDS,
               area_buckets=None, max_detections=MAX_DETECTIONS) -> EvalResult:
    """COCO-protocol metrics: greedy matching per threshold, 101-point AP.

    AP averages over thresholds 0.50:0.05:0.95 and over the categories that
    have ground truth; AR_k is the recall cap at k detections per image.
    Size-bucket metrics ignore out-of-bucket ground truth and detections.
    Buckets with no ground truth anywhere report 0.
    """
    area_buckets = area_buckets or AREA_BUCKETS
    image_ids = sorted(set(gts_by_image) | set(detections_by_image))
    categories = sorted({cat for gts in gts_by_image.values() for cat, _ in gts})
    max_det_cap = max(max_detections)

    # Per (category, image): detections sorted by score (stable), capped.
    per_cat: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]] = {}
    gt_per_cat: dict[int, dict[int, np.ndarray]] = {}
    for cat in categories:
        per_cat[cat] = {}
        gt_per_cat[cat] = {}
        for image_id in image_ids:
            dets = [d for d in detections_by_image.get(image_id, []) if d.category == cat]
            scores = np.array([d.score for d in dets], dtype=np.float64)
            order = np.argsort(-scores, kind="stable")
            boxes = np.array([dets[i].box.to_array() for i in order]).reshape(-1, 4)
            per_cat[cat][image_id] = (boxes, scores[order])
            gts = [box for c, box in gts_by_image.get(image_id, []) if c == cat]
            gt_per_cat[cat][image_id] = np.array(
                [b.to_array() for b in gts]).reshape(-1, 4)

    ap_cells: dict[tuple[str, float], list[float]] = {}
    recall_cells: dict[tuple[str, float, int], list[float]] = {}
    for bucket_name, (area_lo, area_hi) in area_buckets.items():
        for threshold in iou_thresholds:
            for cat in categories:
                scores_all, tp_all, fp_all = [], [], []
                matched_per_maxdet = {k: 0 for k in max_detections}
                n_positive = 0
                for image_id in image_ids:
                    boxes, scores = per_cat[cat][image_id]
                    boxes = boxes[:max_det_cap]
                    scores = scores[:max_det_cap]
                    gt_boxes = gt_per_cat[cat][image_id]
                    gt_areas = ((gt_boxes[:, 2] - gt_boxes[:, 0])
                                * (gt_boxes[:, 3] - gt_boxes[:, 1]))
                    gt_ignore = ~((gt_areas >= area_lo) & (gt_areas < area_hi))
                    n_positive += int((~gt_ignore).sum())
                    det_match, _ = _match_image(
                        boxes, np.arange(len(boxes)), gt_boxes, gt_ignore, threshold)
                    det_areas = ((boxes[:, 2] - boxes[:, 0])
                                 * (boxes[:, 3] - boxes[:, 1]))
                    for di in range(len(boxes)):
                        if det_match[di] >= 0:
                            if gt_ignore[det_match[di]]:
                                continue  # matched an out-of-bucket box: ignore
                            scores_all.append(scores[di])
                            tp_all.append(1.0)
                            fp_all.append(0.0)
                        else:
                            in_bucket = area_lo <= det_areas[di] < area_hi
                            if not in_bucket:
                                continue  # unmatched out-of-bucket detection: ignore
                            scores_all.append(scores[di])
                            tp_all.append(0.0)
                            fp_all.append(1.0)
                    for k in max_detections:
                        m, _ = _match_image(boxes, np.arange(min(len(boxes), k)),
                                            gt_boxes, gt_ignore, threshold)
                        kept = [g for g in m if g >= 0 and not gt_ignore[g]]
                        matched_per_maxdet[k] += len(kept)
                if n_positive == 0:
                    continue
                order = np.argsort(-np.array(scores_all), kind="stable")
                tp = np.array(tp_all, dtype=np.float64)[order]
                fp = np.array(fp_all, dtype=np.float64)[order]
                ap_cells.setdefault((bucket_name, threshold), []).append(
                    _interpolated_ap(tp, fp, n_positive))
                for k in max_detections:
                    recall_cells.setdefault((bucket_name, threshold, k), []).append(
                        matched_per_maxdet[k] / n_positive)

    def mean_ap(bucket: str, thresholds) -> float:
        vals = [v for t in thresholds for v in ap_cells.get((bucket, t), [])]
        return float(np.mean(vals)) if vals else 0.0

    def mean_ar(bucket: str, k: int) -> float:
        vals = [v for t in iou_thresholds
                for v in recall_cells.get((bucket, t, k), [])]
        return float(np.mean(vals)) if vals else 0.0

    result = EvalResult(
        ap=mean_ap("all", iou_thresholds),
        ap50=mean_ap("all", [0.5]) if 0.5 in iou_thresholds else 0.0,
        ap75=mean_ap("all", [0.75]) if 0.75 in iou_thresholds else 0.0,
        ap_small=mean_ap("small", iou_thresholds),
        ap_medium=mean_ap("medium", iou_thresholds),
        ap_large=mean_ap("large", iou_thresholds),
        ar1=mean_ar("all", 1),
        ar10=mean_ar("all", 10),
        ar100=mean_ar("all", 100),
        ar_small=mean_ar("small", 100),
        ar_medium=mean_ar("medium", 100),
        ar_large=mean_ar("large", 100),
    )
    result.check_invariants()
    return result


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------


def gts_of(split: DatasetSplit, categories: set[int] | None = None) -> dict[int, list[tuple[int, Box]]]:
    """Ground truth per image id, optionally restricted to some categories."""
    out: dict[int, list[tuple[int, Box]]] = {}
    for rec in split.records:
        out[rec.image_id] = [(a.category, a.box) for a in rec.annotations
                             if categories is None or a.category in categories]
    return out


def one_time_protocol(model: FewShotDetector, support_sets: list[SupportSet],
                      test_split: DatasetSplit,
                      cfg: RunConfig | None = None) -> EvalResult:
    """Detect over the whole test set once, given supports for every novel
    category; a single metric bundle comes back."""
    cfg = (cfg or model.run_config).resolve()
    covered = {s.category for s in support_sets}
    missing = set(test_split.novel_categories) - covered
    if missing:
        raise DataError(f"missing support sets for novel categories {sorted(missing)}")
    prototypes = compute_prototypes(model, support_sets)
    started = time.perf_counter()
    detections: dict[int, list[Detection]] = {}
    for rec in test_split.records:
        detections[rec.image_id] = detect(load_image(rec.path), prototypes, model, cfg)
    result = compute_ap(detections, gts_of(test_split, set(covered)))
    result.episodes = 1
    result.seconds_per_episode = time.perf_counter() - started
    return result


def confidence_interval(values: np.ndarray) -> float | None:
    """95% normal-approximation half-width; None below two samples."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return None
    return float(1.96 * values.std(ddof=1) / math.sqrt(values.size))


@dataclass
class MetaResult:
    """Per-metric mean with 95% CI half-widths over sampled episodes."""

    mean: EvalResult
    per_episode: list[EvalResult]
    episodes: int
    seconds_per_episode: float

    def to_dict(self) -> dict:
        out = self.mean.to_dict()
        out["episodes"] = self.episodes
        out["seconds_per_episode"] = self.seconds_per_episode
        return out


def sample_episode(split: DatasetSplit, n_way: int, k_shot: int,
                   queries_per_category: int, rng: np.random.Generator
                   ) -> tuple[list[SupportSet], list[int]]:
    """One N-way K-shot episode: supports plus query image ids.

    Categories need k_shot support instances and queries_per_category query
    images that are not support sources; queries are sampled without
    replacement per category and merged (an image may serve two categories).
    """
    candidates = []
    for cat in sorted(split.novel_categories):
        instances = instances_of(split, cat)
        images = {inst.record.image_id for inst in instances}
        if len(instances) >= k_shot and len(images) >= queries_per_category + 1:
            candidates.append(cat)
    if len(candidates) < n_way:
        raise DataError(f"only {len(candidates)} categories usable, need {n_way}")
    chosen = sorted(int(c) for c in rng.choice(candidates, size=n_way, replace=False))

    supports: list[SupportSet] = []
    support_images: set[int] = set()
    for cat in chosen:
        pool = instances_of(split, cat)
        picked = rng.choice(len(pool), size=k_shot, replace=False)
        items = [pool[int(i)] for i in picked]
        supports.append(SupportSet(category=cat, items=items))
        support_images.update(item.record.image_id for item in items)

    queries: set[int] = set()
    for cat in chosen:
        images = sorted({inst.record.image_id for inst in instances_of(split, cat)}
                        - support_images)
        if len(images) < queries_per_category:
            raise DataError(
                f"category {cat}: {len(images)} query images left, need {queries_per_category}")
        picked = rng.choice(len(images), size=queries_per_category, replace=False)
        queries.update(images[int(i)] for i in picked)
    return supports, sorted(queries)


def meta_testing(model: FewShotDetector, split: DatasetSplit, n_way: int,
                 k_shot: int, episodes: int = 1000,
                 queries_per_category: int = 10, seed: int = 0,
                 cfg: RunConfig | None = None) -> MetaResult:
    """Average detection quality over random episodes, with a 95% CI.

    Episode i is generated from (seed, i) alone, so any episode is
    reproducible without replaying the previous ones.
    """
    cfg = (cfg or model.run_config).resolve()
    records = {rec.image_id: rec for rec in split.records}
    results: list[EvalResult] = []
    started = time.perf_counter()
    for i in range(episodes):
        rng = np.random.default_rng([seed, i])
        supports, query_ids = sample_episode(split, n_way, k_shot,
                                             queries_per_category, rng)
        prototypes = compute_prototypes(model, supports)
        chosen = {s.category for s in supports}
        detections: dict[int, list[Detection]] = {}
        gts: dict[int, list[tuple[int, Box]]] = {}
        for image_id in query_ids:
            rec = records[image_id]
            detections[image_id] = detect(load_image(rec.path), prototypes, model, cfg)
            gts[image_id] = [(a.category, a.box) for a in rec.annotations
                             if a.category in chosen]
        results.append(compute_ap(detections, gts))
    elapsed = time.perf_counter() - started

    mean = EvalResult(**{name: float(np.mean([getattr(r, name) for r in results]))
                         for name in METRIC_FIELDS})
    mean.ci = {}
    for name in METRIC_FIELDS:
        hw = confidence_interval(np.array([getattr(r, name) for r in results]))
        if hw is not None:
            mean.ci[name] = hw
    if not mean.ci:
        mean.ci = None
    mean.episodes = episodes
    mean.seconds_per_episode = elapsed / max(episodes, 1)
    return MetaResult(mean=mean, per_episode=results, episodes=episodes,
                      seconds_per_episode=mean.seconds_per_episode)


def export_coco_detections(detections_by_image: dict[int, list[Detection]],
                           path: str | Path | None = None) -> list[dict]:
    """COCO results-format records; optionally written to a JSON file."""
    rows = []
    for image_id in sorted(detections_by_image):
        for det in detections_by_image[image_id]:
            x, y, w, h = det.box.to_xywh()
            rows.append({"image_id": image_id, "category_id": det.category,
                         "bbox": [x, y, w, h], "score": det.score})
    if path is not None:
        Path(path).write_text(json.dumps(rows, indent=2))
    return rows
