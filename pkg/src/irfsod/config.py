"""Run configuration: typed groups, flat dotted-key files, and overrides.

The on-disk format is a plain text file of ``group.key = value`` lines
(``#`` comments allowed). Values are coerced by the field type of the
matching dataclass; unknown keys are rejected. ``--set key=value``
overrides use the same syntax.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class BackboneConfig:
    """Small convolutional stack shared by the query and support branches.

    support_crop_margin crops support images to the instance box plus this
    many pixels before feature extraction (negative = use the full image);
    the crop keeps the box's receptive-field context while skipping conv
    work on unrelated background. support_size then rescales every crop to
    a fixed square (0 = keep native size), so one batched pass covers the
    whole support set; RoI pooling normalizes region scale either way.
    """

    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    kernel_size: int = 3
    support_crop_margin: int = 16
    support_size: int = 64

    @property
    def stride(self) -> int:
        s = 1
        for v in self.strides:
            s *= v
        return s

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def validate(self):
        if len(self.channels) != len(self.strides):
            raise ConfigError("backbone.channels and backbone.strides must have equal length")
        if any(c < 1 for c in self.channels) or any(s < 1 for s in self.strides):
            raise ConfigError("backbone channels and strides must be positive")
        if self.kernel_size % 2 != 1:
            raise ConfigError("backbone.kernel_size must be odd")


@dataclass
class SSRPNConfig:
    """Anchor labeling, pseudo-positive relabeling, sampling, and proposals."""

    tau: float = 0.25
    neg_iou: float = 0.3
    pos_iou: float = 0.7
    caps: tuple[int, ...] = (128, 128, 128)
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    pre_nms_top_n: int = 1000
    post_nms_top_n: int = 128
    proposal_nms_threshold: float = 0.7
    # Pseudo-labeling starts after the objectness head has seen real labels;
    # at initialization every score is ~0.5 > tau, which would flood the
    # batch with pseudo positives and leave no negative supervision.
    pseudo_warmup_iters: int = 500

    def validate(self):
        if not (0.0 < self.tau < 1.0):
            raise ConfigError(f"rpn.tau must be in (0, 1), got {self.tau}")
        if not (self.neg_iou < self.pos_iou):
            raise ConfigError("rpn.neg_iou must be below rpn.pos_iou")
        if len(self.caps) != 3 or any(c < 1 for c in self.caps):
            raise ConfigError("rpn.caps must be three positive integers")
        if self.pre_nms_top_n < 1 or self.post_nms_top_n < 1:
            raise ConfigError("proposal top-n values must be positive")
        if not self.anchor_scales or not self.anchor_ratios:
            raise ConfigError("anchor scales and ratios must be nonempty")
        if self.pseudo_warmup_iters < 0:
            raise ConfigError("rpn.pseudo_warmup_iters must be >= 0")


@dataclass
class HeadConfig:
    """Classification and regression head hyper-parameters.

    ``alpha`` balances the flattened-map distance against the pooled-vector
    distance; ``lam`` (config key ``heads.lambda``) is the sharpness of the
    logistic that turns the combined distance into a probability.
    """

    alpha: float = 0.5
    lam: float = 20.0
    score_threshold: float = 0.5
    roi_pos_iou: float = 0.5
    roi_resolution: int = 7
    comparison_hidden: int = 64
    regressor_hidden: int = 128

    def validate(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"heads.alpha must be in [0, 1], got {self.alpha}")
        if not self.lam > 0.0:
            raise ConfigError(f"heads.lambda must be > 0, got {self.lam}")
        if self.roi_resolution < 1:
            raise ConfigError("heads.roi_resolution must be >= 1")
        if not (0.0 < self.roi_pos_iou < 1.0):
            raise ConfigError("heads.roi_pos_iou must be in (0, 1)")


@dataclass
class TrainConfig:
    """Optimization schedule. Defaults are the desk-scale schedule;
    :func:`full_scale_train_config` carries the published-scale preset."""

    iterations: int = 5000
    lr: float = 0.01
    milestones: tuple[int, ...] = (3500, 4500)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    support_shots: int = 10
    seed: int = 0
    log_every: int = 50

    def validate(self):
        if self.iterations < 1:
            raise ConfigError("train.iterations must be positive")
        if self.lr <= 0 or self.decay_factor <= 0:
            raise ConfigError("train.lr and train.decay_factor must be positive")
        if any(m < 1 for m in self.milestones):
            raise ConfigError("train.milestones must be positive")
        if self.support_shots < 1:
            raise ConfigError("train.support_shots must be >= 1")


@dataclass
class DataConfig:
    """Dataset location: a directory holding annotations.json and images/."""

    root: str = ""

    def validate(self):
        pass


@dataclass
class EvalConfig:
    max_detections: int = 100
    nms_threshold: float = 0.5
    episodes: int = 1000
    n_way: int = 2
    k_shot: int = 10
    queries_per_category: int = 10
    seed: int = 0

    def validate(self):
        if self.max_detections < 1:
            raise ConfigError("eval.max_detections must be positive")
        if not (0.0 < self.nms_threshold < 1.0):
            raise ConfigError("eval.nms_threshold must be in (0, 1)")
        if min(self.episodes, self.n_way, self.k_shot, self.queries_per_category) < 1:
            raise ConfigError("eval protocol sizes must be positive")


CLASSIFIER_MODES = ("dynamic", "comparison", "distance", "multi")
REGRESSOR_MODES = ("semi_explicit", "plain")


@dataclass
class AblationConfig:
    """Pipeline toggles. ``ss_rpn`` off disables pseudo-positive relabeling;
    ``pixelwise`` off forces alpha to 1 (pooled-vector distance only)."""

    ss_rpn: bool = True
    pixelwise: bool = True
    regressor: str = "semi_explicit"
    classifier: str = "dynamic"

    def validate(self):
        if self.classifier not in CLASSIFIER_MODES:
            raise ConfigError(f"ablation.classifier must be one of {CLASSIFIER_MODES}")
        if self.regressor not in REGRESSOR_MODES:
            raise ConfigError(f"ablation.regressor must be one of {REGRESSOR_MODES}")


_GROUPS = {
    "backbone": BackboneConfig,
    "rpn": SSRPNConfig,
    "heads": HeadConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}

# Flat-key aliases for names that are not valid Python attributes.
_KEY_ALIASES = {"heads.lambda": "heads.lam"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_ALIASES.items()}


@dataclass
class RunConfig:
    """All knobs for one run, merged from defaults, a file, and overrides."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rpn: SSRPNConfig = field(default_factory=SSRPNConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> "RunConfig":
        for name in _GROUPS:
            getattr(self, name).validate()
        return self

    def resolve(self) -> "RunConfig":
        """Apply toggle implications (pixelwise off => alpha 1) and validate."""
        cfg = copy_config(self)
        if not cfg.ablation.pixelwise:
            cfg.heads.alpha = 1.0
        return cfg.validate()

    def effective_alpha(self) -> float:
        return 1.0 if not self.ablation.pixelwise else self.heads.alpha

    def to_flat_dict(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for group_name in _GROUPS:
            group = getattr(self, group_name)
            for f in fields(group):
                attr = f"{group_name}.{f.name}"
                key = _ATTR_TO_KEY.get(attr, attr)
                value = getattr(group, f.name)
                out[key] = list(value) if isinstance(value, tuple) else value
        return dict(sorted(out.items()))

    def to_json(self) -> str:
        return json.dumps(self.to_flat_dict(), sort_keys=True)

    @classmethod
    def from_flat_dict(cls, flat: dict[str, object]) -> "RunConfig":
        cfg = cls()
        for key, value in flat.items():
            _set_key(cfg, key, value, coerce=not isinstance(value, (list, tuple, bool, int, float)))
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_flat_dict(json.loads(text))


def copy_config(cfg: RunConfig) -> RunConfig:
    groups = {name: dataclasses.replace(getattr(cfg, name)) for name in _GROUPS}
    return RunConfig(**groups)


def known_keys() -> list[str]:
    keys = []
    for group_name, group_cls in _GROUPS.items():
        for f in fields(group_cls):
            attr = f"{group_name}.{f.name}"
            keys.append(_ATTR_TO_KEY.get(attr, attr))
    return sorted(keys)


def _coerce(value, target_type, key: str):
    if isinstance(value, str):
        text = value.strip()
        try:
            if target_type is bool:
                low = text.lower()
                if low in ("true", "1", "yes", "on"):
                    return True
                if low in ("false", "0", "no", "off"):
                    return False
                raise ValueError(text)
            if target_type is int:
                return int(text)
            if target_type is float:
                return float(text)
            if target_type is str:
                return text
            # Tuple fields: comma-separated items coerced element-wise.
            origin = getattr(target_type, "__origin__", None)
            if origin is tuple:
                item_type = target_type.__args__[0]
                items = [t for t in (p.strip() for p in text.split(",")) if t]
                return tuple(_coerce(item, item_type, key) for item in items)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {key!r}: {value!r}") from None
        raise ConfigError(f"unsupported field type for {key!r}")
    origin = getattr(target_type, "__origin__", None)
    if origin is tuple and isinstance(value, (list, tuple)):
        item_type = target_type.__args__[0]
        return tuple(item_type(v) for v in value)
    if target_type is float and isinstance(value, int):
        return float(value)
    return value


def _resolve_types(group_cls) -> dict[str, type]:
    import typing

    return typing.get_type_hints(group_cls)


def _set_key(cfg: RunConfig, key: str, value, coerce: bool = True):
    attr_key = _KEY_ALIASES.get(key, key)
    if "." not in attr_key:
        raise ConfigError(f"unknown config key {key!r} (keys are group.name)")
    group_name, field_name = attr_key.split(".", 1)
    group_cls = _GROUPS.get(group_name)
    if group_cls is None:
        raise ConfigError(f"unknown config key {key!r}")
    hints = _resolve_types(group_cls)
    if field_name not in {f.name for f in fields(group_cls)}:
        raise ConfigError(f"unknown config key {key!r}")
    group = getattr(cfg, group_name)
    setattr(group, field_name, _coerce(value, hints[field_name], key))


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines into a RunConfig, starting from defaults."""
    cfg = copy_config(base) if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        _set_key(cfg, key, value)
    return cfg


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), base=base)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` strings on top of an existing config."""
    out = copy_config(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        _set_key(out, key, value)
    return out


def full_scale_train_config() -> TrainConfig:
    """The published-scale schedule (not the default: it is not desk-sized)."""
    return TrainConfig(iterations=120000, lr=0.003, milestones=(80000, 110000),
                       decay_factor=0.1)
