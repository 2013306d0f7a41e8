"""Box classification and regression heads.

Three classifiers: a learned comparison head (used in training), a
parameter-free distance head (used at inference; no retraining needed when
swapping), and a multi-class baseline over base categories that exists only
for ablations. Localization: the distance head scores mix a flattened-map
cosine (pixel-wise contrast, localization-sensitive) with a pooled-vector
cosine; box regression is driven by the pixel-pair cosine matrix between a
region and its support prototype, concatenated with region context.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .config import HeadConfig
from .features import RegionFeature, SupportFeature


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors, in [-1, 1]; 0 if either has zero norm."""
    a = a.reshape(-1)
    b = b.reshape(-1)
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    denom = na * nb
    if denom.item() == 0.0:
        return torch.zeros((), dtype=a.dtype)
    return torch.dot(a, b) / denom


def cosine_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine between rows of (N, d) and (M, d); zero rows give 0."""
    def normalize(x):
        norms = torch.linalg.vector_norm(x, dim=1, keepdim=True)
        return torch.where(norms > 0, x / norms.clamp(min=torch.finfo(x.dtype).tiny), torch.zeros_like(x))

    return normalize(a) @ normalize(b).transpose(0, 1)


def sharp_sigmoid(x: torch.Tensor | float, lam: float) -> torch.Tensor:
    """1 / (1 + exp(-lam * x)): a logistic with configurable sharpness."""
    x = torch.as_tensor(x)
    return torch.sigmoid(lam * x)


def combined_distance(flat_x: torch.Tensor, flat_c: torch.Tensor,
                      pooled_x: torch.Tensor, pooled_c: torch.Tensor,
                      alpha: float) -> torch.Tensor:
    """(1 - alpha) * cos(flattened maps) + alpha * cos(pooled vectors)."""
    return (1.0 - alpha) * cosine(flat_x, flat_c) + alpha * cosine(pooled_x, pooled_c)


def distance_score(x: RegionFeature, c: SupportFeature, cfg: HeadConfig) -> float:
    """Probability that region x shows c's category, from distances alone.

    Computed in float64 so scores stay distinguishable for ranking even when
    the sharp logistic pushes them close to 1.
    """
    return float(distance_scores(x.values.unsqueeze(0), c, cfg.alpha, cfg.lam)[0])


def distance_logits(region_values: torch.Tensor, support: SupportFeature,
                    alpha: float, lam: float) -> torch.Tensor:
    """lam * combined distance for a (B, d, r, r) batch against one prototype."""
    b = region_values.shape[0]
    flat = region_values.reshape(b, -1)
    pooled = region_values.mean(dim=(2, 3))
    flat_cos = cosine_rows(flat, support.flattened.unsqueeze(0))[:, 0]
    pooled_cos = cosine_rows(pooled, support.pooled.unsqueeze(0))[:, 0]
    return lam * ((1.0 - alpha) * flat_cos + alpha * pooled_cos)


def distance_scores(region_values: torch.Tensor, support: SupportFeature,
                    alpha: float, lam: float) -> torch.Tensor:
    """Batched distance-head probabilities, float64 for stable ranking."""
    return torch.sigmoid(distance_logits(region_values, support, alpha, lam).double())


@dataclass
class DistanceMatrix:
    """Pairwise cosine between region and support cell vectors.

    ``matrix`` is (r^2, r^2) with entry (i, j) the cosine between region cell
    i and support cell j, cells row-major. ``flattened`` is the row-major
    flattening, length r^4.
    """

    matrix: torch.Tensor

    @property
    def flattened(self) -> torch.Tensor:
        return self.matrix.reshape(-1)


def distance_matrix(x: RegionFeature, c: SupportFeature) -> DistanceMatrix:
    if x.values.shape != c.values.shape:
        raise ValueError(f"shape mismatch: {tuple(x.values.shape)} vs {tuple(c.values.shape)}")
    return DistanceMatrix(cosine_rows(x.pixel_vectors(), c.pixel_vectors()))


def distance_matrix_batch(region_values: torch.Tensor, support_values: torch.Tensor) -> torch.Tensor:
    """(B, d, r, r) regions vs one (d, r, r) support -> (B, r^2, r^2)."""
    b, d = region_values.shape[0], region_values.shape[1]
    region_px = region_values.reshape(b, d, -1).transpose(1, 2)
    support_px = support_values.reshape(d, -1).transpose(0, 1)

    def normalize(x, dim):
        norms = torch.linalg.vector_norm(x, dim=dim, keepdim=True)
        return torch.where(norms > 0, x / norms.clamp(min=torch.finfo(x.dtype).tiny), torch.zeros_like(x))

    return normalize(region_px, 2) @ normalize(support_px, 1).transpose(0, 1).unsqueeze(0)


class ComparisonHead(nn.Module):
    """Learned same-category probability from pixel-wise region/support contrast.

    Per-cell concatenation of the two grids -> 1x1 conv -> ReLU -> global
    average pool -> linear logit. The final layer is zero-initialized so an
    untrained head scores 0.5 everywhere.
    """

    def __init__(self, channels: int, hidden: int = 64):
        super().__init__()
        self.contrast = nn.Conv2d(2 * channels, hidden, kernel_size=1)
        self.classify = nn.Linear(hidden, 1)
        nn.init.zeros_(self.classify.weight)
        nn.init.zeros_(self.classify.bias)

    def forward_logit(self, region_values: torch.Tensor, support_values: torch.Tensor) -> torch.Tensor:
        b = region_values.shape[0]
        support = support_values.unsqueeze(0).expand(b, -1, -1, -1)
        paired = torch.cat([region_values, support], dim=1)
        h = F.relu(self.contrast(paired))
        pooled = h.mean(dim=(2, 3))
        return self.classify(pooled)[:, 0]

    def forward(self, region_values: torch.Tensor, support_values: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward_logit(region_values, support_values))


def comparison_score(x: RegionFeature, c: SupportFeature, head: ComparisonHead) -> torch.Tensor:
    """Probability that region x matches support category c, via the learned head."""
    if x.values.shape != c.values.shape:
        raise ValueError(f"shape mismatch: {tuple(x.values.shape)} vs {tuple(c.values.shape)}")
    return head(x.values.unsqueeze(0), c.values)[0]


class MultiClassHead(nn.Module):
    """Softmax over the base categories plus background (ablation baseline).

    A fixed hyper-plane per base category: it cannot emit novel categories,
    so swapping it in at inference yields no novel detections.
    """

    def __init__(self, channels: int, num_base_categories: int):
        super().__init__()
        self.num_base_categories = num_base_categories
        self.classify = nn.Linear(channels, num_base_categories + 1)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.classify(pooled)

    def probabilities(self, pooled: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward(pooled), dim=-1)


def multi_class_score(x: RegionFeature, head: MultiClassHead) -> torch.Tensor:
    """Distribution over base categories + background for one region."""
    return head.probabilities(x.pooled.unsqueeze(0))[0]


class SemiExplicitRegressor(nn.Module):
    """Box regression from pixel-pair correspondence scores plus region context.

    Input is the flattened cell-pair cosine matrix (length r^4) concatenated
    with the pooled region vector; two linear layers map it to the four
    delta outputs. Zero-initialized final layer -> identity regression.
    """

    def __init__(self, channels: int, resolution: int, hidden: int = 128):
        super().__init__()
        self.resolution = resolution
        in_features = resolution ** 4 + channels
        self.mix = nn.Linear(in_features, hidden)
        self.regress = nn.Linear(hidden, 4)
        nn.init.zeros_(self.regress.weight)
        nn.init.zeros_(self.regress.bias)

    def forward(self, region_values: torch.Tensor, support_values: torch.Tensor) -> torch.Tensor:
        b = region_values.shape[0]
        pair_scores = distance_matrix_batch(region_values, support_values).reshape(b, -1)
        pooled = region_values.mean(dim=(2, 3))
        h = F.relu(self.mix(torch.cat([pair_scores, pooled], dim=1)))
        return self.regress(h)


class PlainRegressor(nn.Module):
    """Implicit class-agnostic regression from the region feature alone."""

    def __init__(self, channels: int, resolution: int, hidden: int = 128):
        super().__init__()
        self.resolution = resolution
        self.mix = nn.Linear(channels * resolution * resolution, hidden)
        self.regress = nn.Linear(hidden, 4)
        nn.init.zeros_(self.regress.weight)
        nn.init.zeros_(self.regress.bias)

    def forward(self, region_values: torch.Tensor, support_values: torch.Tensor = None) -> torch.Tensor:
        b = region_values.shape[0]
        h = F.relu(self.mix(region_values.reshape(b, -1)))
        return self.regress(h)


def semi_explicit_regress(x: RegionFeature, c: SupportFeature,
                          regressor: SemiExplicitRegressor) -> torch.Tensor:
    """Four regression offsets for one region against one prototype."""
    if x.values.shape != c.values.shape:
        raise ValueError(f"shape mismatch: {tuple(x.values.shape)} vs {tuple(c.values.shape)}")
    return regressor(x.values.unsqueeze(0), c.values)[0]


def classify_dynamic(x: RegionFeature, c: SupportFeature, mode: str,
                     cfg: HeadConfig, head: ComparisonHead) -> float:
    """Mode-switched classification: learned head in training, parameter-free
    distance head at inference (no retraining needed to switch)."""
    if mode == "train":
        return float(comparison_score(x, c, head).detach())
    if mode == "infer":
        return distance_score(x, c, cfg)
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
