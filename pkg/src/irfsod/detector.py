"""The assembled two-stage detector: shared backbone, RPN, and swap-able heads.

One module owns every learnable part so a single state dict covers training,
checkpointing, and the no-parameter-writes inference contract. The multi-class
baseline head is only materialized when the ablation asks for it, since it
needs the base category list to size its output.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn

from .config import RunConfig
from .errors import ConfigError
from .features import (Backbone, FeatureMap, RegionFeature, SupportFeature,
                       extract_features, image_to_tensor, roi_extract_batch,
                       roi_extract_per_image, support_prototype)
from .geometry import Box
from .heads import ComparisonHead, MultiClassHead, PlainRegressor, SemiExplicitRegressor
from .rpn import RPNHead, generate_anchors, propose


class FewShotDetector(nn.Module):
    """Backbone + RPN + comparison/distance classification + box regression."""

    def __init__(self, config: RunConfig, base_categories: tuple[int, ...] | None = None):
        super().__init__()
        self.run_config = config.resolve()
        cfg = self.run_config
        self.backbone = Backbone(cfg.backbone)
        d = self.backbone.out_channels
        anchors_per_cell = len(cfg.rpn.anchor_scales) * len(cfg.rpn.anchor_ratios)
        self.rpn_head = RPNHead(d, anchors_per_cell)
        self.comparison_head = ComparisonHead(d, hidden=cfg.heads.comparison_hidden)
        r = cfg.heads.roi_resolution
        if cfg.ablation.regressor == "semi_explicit":
            self.regressor = SemiExplicitRegressor(d, r, hidden=cfg.heads.regressor_hidden)
        else:
            self.regressor = PlainRegressor(d, r, hidden=cfg.heads.regressor_hidden)
        self.base_categories = tuple(sorted(base_categories)) if base_categories else None
        self.multi_head: MultiClassHead | None = None
        if cfg.ablation.classifier == "multi":
            if not self.base_categories:
                raise ConfigError("multi classifier needs the base category list")
            self.multi_head = MultiClassHead(d, len(self.base_categories))
        self._anchor_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def roi_resolution(self) -> int:
        return self.run_config.heads.roi_resolution

    def feature_map(self, image: np.ndarray) -> FeatureMap:
        return extract_features(image, self.backbone)

    def anchors_for(self, fm: FeatureMap) -> np.ndarray:
        key = fm.spatial_shape
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(
                key, fm.stride, self.run_config.rpn.anchor_scales,
                self.run_config.rpn.anchor_ratios)
        return self._anchor_cache[key]

    def rpn(self, fm: FeatureMap) -> tuple[torch.Tensor, torch.Tensor]:
        """Objectness logits (N,) and deltas (N, 4) aligned with anchors_for."""
        return self.rpn_head(fm.values)

    def proposals(self, fm: FeatureMap, image_size: tuple[int, int],
                  objectness: np.ndarray, deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return propose(objectness, deltas, self.anchors_for(fm), image_size,
                       self.run_config.rpn)

    def region_features(self, fm: FeatureMap, boxes: np.ndarray) -> torch.Tensor:
        """(N, d, r, r) pooled features for corner-format proposal boxes."""
        return roi_extract_batch(fm, boxes, self.roi_resolution)

    def _crop_support(self, image: np.ndarray, box: Box) -> tuple[np.ndarray, Box]:
        """Crop a support image around its box (plus margin), shift the box,
        and optionally rescale the patch to the fixed support size."""
        cfg = self.run_config.backbone
        h, w = image.shape[0], image.shape[1]
        if cfg.support_crop_margin >= 0:
            stride = self.backbone.stride
            x0 = int(max(0, np.floor(box.x1) - cfg.support_crop_margin))
            y0 = int(max(0, np.floor(box.y1) - cfg.support_crop_margin))
            x1 = int(min(w, np.ceil(box.x2) + cfg.support_crop_margin))
            y1 = int(min(h, np.ceil(box.y2) + cfg.support_crop_margin))
            # Keep the crop at least one backbone stride on each side.
            x1 = max(x1, min(w, x0 + stride))
            y1 = max(y1, min(h, y0 + stride))
            x0 = min(x0, max(x1 - stride, 0))
            y0 = min(y0, max(y1 - stride, 0))
            image = image[y0:y1, x0:x1]
            box = Box(box.x1 - x0, box.y1 - y0, box.x2 - x0, box.y2 - y0)
            h, w = image.shape[0], image.shape[1]
        size = cfg.support_size
        if size > 0 and (h, w) != (size, size):
            from PIL import Image as PILImage

            resized = PILImage.fromarray(image).resize((size, size), PILImage.BILINEAR)
            sx, sy = size / w, size / h
            image = np.asarray(resized)
            box = Box(box.x1 * sx, box.y1 * sy, box.x2 * sx, box.y2 * sy)
        return image, box

    def prototype_from_arrays(self, items: list[tuple[np.ndarray, Box]],
                              category: int) -> SupportFeature:
        """Average the RoI features of (image, box) support instances.

        Same-shaped images share one batched backbone pass; gradients flow
        into the backbone, so training sees the support branch too.
        """
        if not items:
            raise ValueError("support set must not be empty")
        items = [self._crop_support(image, box) for image, box in items]
        dtype = next(self.backbone.parameters()).dtype
        groups: dict[tuple[int, int], list[int]] = {}
        for i, (image, _) in enumerate(items):
            groups.setdefault(image.shape[:2], []).append(i)
        region_values: dict[int, torch.Tensor] = {}
        for indices in groups.values():
            batch = torch.stack([image_to_tensor(items[i][0], dtype=dtype) for i in indices])
            out = self.backbone(batch)
            boxes = np.stack([items[i][1].to_array() for i in indices])
            pooled = roi_extract_per_image(out, boxes, self.backbone.stride,
                                           self.roi_resolution)
            for slot, i in enumerate(indices):
                region_values[i] = pooled[slot]
        regions = [RegionFeature(region_values[i]) for i in range(len(items))]
        return support_prototype(regions, category)

    def multi_category_index(self, category: int) -> int | None:
        """Logit column for a category id, or None if it is not a base category."""
        if self.base_categories is None or category not in self.base_categories:
            return None
        return self.base_categories.index(category)


def parameter_hash(model: nn.Module) -> str:
    """SHA-256 over all named parameters and buffers; detects any write."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().numpy().tobytes())
    return digest.hexdigest()
