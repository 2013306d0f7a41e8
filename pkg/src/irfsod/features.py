"""Feature extraction: image backbone, RoI pooling, and support prototypes.

The backbone is a small configurable conv stack shared by the query and
support branches. RoI pooling is align-style: one bilinear sample at each
output cell center, so a scalar oracle can reproduce it exactly.

Flattening order of a pooled region (used by the flattened-vector distance)
is fixed once: channel-major, then row-major spatial, i.e. ``values.reshape(-1)``
for a C-contiguous (d, r, r) tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import BackboneConfig
from .geometry import Box


@dataclass
class FeatureMap:
    """A (channels, height, width) activation map with its pixel stride."""

    values: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ValueError(f"feature map must be (C, H, W), got {tuple(self.values.shape)}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return (int(self.values.shape[1]), int(self.values.shape[2]))


class RegionFeature:
    """A pooled d x r x r region with its pooled and flattened vectors."""

    def __init__(self, values: torch.Tensor):
        if values.dim() != 3 or values.shape[1] != values.shape[2]:
            raise ValueError(f"region feature must be (d, r, r), got {tuple(values.shape)}")
        self.values = values

    @property
    def resolution(self) -> int:
        return int(self.values.shape[1])

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])

    @property
    def pooled(self) -> torch.Tensor:
        """Global average pool over the r x r cells: a length-d vector."""
        return self.values.mean(dim=(1, 2))

    @property
    def flattened(self) -> torch.Tensor:
        """Fixed flattening: channel-major then row-major spatial."""
        return self.values.reshape(-1)

    def pixel_vectors(self) -> torch.Tensor:
        """(r^2, d) matrix of per-cell channel vectors, cells row-major."""
        d = self.values.shape[0]
        return self.values.reshape(d, -1).transpose(0, 1)


class SupportFeature(RegionFeature):
    """Per-category prototype: the element-wise mean of K support regions."""

    def __init__(self, values: torch.Tensor, category: int, shots: int):
        super().__init__(values)
        if shots < 1:
            raise ValueError("a prototype averages at least one instance")
        self.category = int(category)
        self.shots = int(shots)


class Backbone(nn.Module):
    """Stacked 'conv + ReLU' stages; overall stride is the product of the
    per-stage strides. Padded so each stage maps H to ceil(H / stride)."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        self.config.validate()
        layers: list[nn.Module] = []
        in_ch = self.config.in_channels
        pad = self.config.kernel_size // 2
        for out_ch, stride in zip(self.config.channels, self.config.strides):
            layers.append(nn.Conv2d(in_ch, out_ch, self.config.kernel_size,
                                    stride=stride, padding=pad))
            layers.append(nn.ReLU(inplace=True))
            in_ch = out_ch
        self.stages = nn.Sequential(*layers)

    @property
    def stride(self) -> int:
        return self.config.stride

    @property
    def out_channels(self) -> int:
        return self.config.out_channels

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.stages(images)


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, C) uint8 or float pixels -> (C, H, W) tensor scaled to [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    tensor = torch.as_tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    return tensor.to(dtype)


def extract_features(image: np.ndarray, backbone: Backbone) -> FeatureMap:
    """Run the backbone on one image. Deterministic under fixed parameters."""
    arr = np.asarray(image)
    if arr.size == 0:
        raise ValueError("empty image")
    h, w = arr.shape[0], arr.shape[1]
    if h < backbone.stride or w < backbone.stride:
        raise ValueError(f"image {h}x{w} smaller than backbone stride {backbone.stride}")
    dtype = next(backbone.parameters()).dtype
    x = image_to_tensor(arr, dtype=dtype).unsqueeze(0)
    values = backbone(x)[0]
    return FeatureMap(values=values, stride=backbone.stride)


def _bilinear_gather(values: torch.Tensor, xs: np.ndarray, ys: np.ndarray) -> torch.Tensor:
    """Sample (C, H, W) values at continuous feature coords, border-clamped.

    Cell (i, j) is treated as a knot at coordinate (j + 0.5, i + 0.5); samples
    interpolate the four surrounding knots. Differentiable in ``values``.
    """
    _, h, w = values.shape
    u = np.asarray(xs, dtype=np.float64) - 0.5
    v = np.asarray(ys, dtype=np.float64) - 0.5
    j0 = np.floor(u)
    i0 = np.floor(v)
    fu = u - j0
    fv = v - i0

    def clamp(idx, upper):
        return np.clip(idx, 0, upper - 1).astype(np.int64)

    j0c, j1c = clamp(j0, w), clamp(j0 + 1, w)
    i0c, i1c = clamp(i0, h), clamp(i0 + 1, h)

    dtype = values.dtype
    fu_t = torch.as_tensor(fu, dtype=dtype)
    fv_t = torch.as_tensor(fv, dtype=dtype)
    w00 = (1 - fv_t) * (1 - fu_t)
    w01 = (1 - fv_t) * fu_t
    w10 = fv_t * (1 - fu_t)
    w11 = fv_t * fu_t

    v00 = values[:, i0c, j0c]
    v01 = values[:, i0c, j1c]
    v10 = values[:, i1c, j0c]
    v11 = values[:, i1c, j1c]
    return v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11


def roi_extract_batch(fm: FeatureMap, boxes: np.ndarray, r: int) -> torch.Tensor:
    """Pool each corner-format box to (d, r, r); returns (N, d, r, r).

    Sample positions are the r x r cell centers of the box mapped into
    feature coordinates (pixel coords divided by the stride).
    """
    if r < 1:
        raise ValueError("roi resolution must be >= 1")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    if n == 0:
        d = fm.channels
        return fm.values.new_zeros((0, d, r, r))
    fx1 = boxes[:, 0] / fm.stride
    fy1 = boxes[:, 1] / fm.stride
    fw = (boxes[:, 2] - boxes[:, 0]) / fm.stride
    fh = (boxes[:, 3] - boxes[:, 1]) / fm.stride
    steps = (np.arange(r, dtype=np.float64) + 0.5) / r
    xs = fx1[:, None, None] + steps[None, None, :] * fw[:, None, None]
    ys = fy1[:, None, None] + steps[None, :, None] * fh[:, None, None]
    xs = np.broadcast_to(xs, (n, r, r))
    ys = np.broadcast_to(ys, (n, r, r))
    sampled = _bilinear_gather(fm.values, xs.reshape(-1), ys.reshape(-1))
    d = fm.channels
    return sampled.reshape(d, n, r, r).permute(1, 0, 2, 3)


def roi_extract(fm: FeatureMap, box: Box, r: int) -> RegionFeature:
    """Pool one region of the feature map to a fixed d x r x r grid."""
    values = roi_extract_batch(fm, box.to_array()[None, :], r)[0]
    return RegionFeature(values)


def roi_extract_per_image(values: torch.Tensor, boxes: np.ndarray, stride: int,
                          r: int) -> torch.Tensor:
    """Pool box i from feature map i: (B, d, H, W) + (B, 4) -> (B, d, r, r).

    Same sampling convention as roi_extract_batch, one gather for the whole
    batch. All maps must share a spatial shape.
    """
    b, d, h, w = values.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] != b:
        raise ValueError(f"{boxes.shape[0]} boxes for {b} feature maps")
    steps = (np.arange(r, dtype=np.float64) + 0.5) / r
    fx1 = boxes[:, 0] / stride
    fy1 = boxes[:, 1] / stride
    fw = (boxes[:, 2] - boxes[:, 0]) / stride
    fh = (boxes[:, 3] - boxes[:, 1]) / stride
    xs = fx1[:, None, None] + steps[None, None, :] * fw[:, None, None]
    ys = fy1[:, None, None] + steps[None, :, None] * fh[:, None, None]
    xs = np.broadcast_to(xs, (b, r, r))
    ys = np.broadcast_to(ys, (b, r, r))

    u = xs - 0.5
    v = ys - 0.5
    j0 = np.floor(u)
    i0 = np.floor(v)
    fu = torch.as_tensor(u - j0, dtype=values.dtype)
    fv = torch.as_tensor(v - i0, dtype=values.dtype)

    def clamp(idx, upper):
        return torch.as_tensor(np.clip(idx, 0, upper - 1).astype(np.int64))

    j0c, j1c = clamp(j0, w), clamp(j0 + 1, w)
    i0c, i1c = clamp(i0, h), clamp(i0 + 1, h)
    batch_idx = torch.arange(b).view(b, 1, 1).expand(b, r, r)

    def gather(ii, jj):
        return values[batch_idx, :, ii, jj].permute(0, 3, 1, 2)

    w00 = ((1 - fv) * (1 - fu)).unsqueeze(1)
    w01 = ((1 - fv) * fu).unsqueeze(1)
    w10 = (fv * (1 - fu)).unsqueeze(1)
    w11 = (fv * fu).unsqueeze(1)
    return (gather(i0c, j0c) * w00 + gather(i0c, j1c) * w01
            + gather(i1c, j0c) * w10 + gather(i1c, j1c) * w11)


def support_prototype(instances: list[RegionFeature], category: int) -> SupportFeature:
    """Element-wise mean of the instance grids; permutation invariant."""
    if not instances:
        raise ValueError("cannot build a prototype from zero instances")
    shapes = {tuple(inst.values.shape) for inst in instances}
    if len(shapes) != 1:
        raise ValueError(f"instance shapes differ: {sorted(shapes)}")
    stacked = torch.stack([inst.values for inst in instances])
    return SupportFeature(stacked.mean(dim=0), category=category, shots=len(instances))
