import numpy as np
import pytest
import torch

from irfsod.config import RunConfig
from irfsod.data import ShapesSpec, generate_shapes_dataset, load_coco_annotations


def tiny_config() -> RunConfig:
    """A desk-test configuration: stride-4 backbone, r=4 heads, few anchors."""
    cfg = RunConfig()
    cfg.backbone.channels = (8, 12)
    cfg.backbone.strides = (2, 2)
    cfg.backbone.support_size = 32
    cfg.backbone.support_crop_margin = 8
    cfg.rpn.anchor_scales = (12.0, 24.0)
    cfg.rpn.anchor_ratios = (1.0,)
    cfg.rpn.pre_nms_top_n = 200
    cfg.rpn.post_nms_top_n = 32
    cfg.rpn.pseudo_warmup_iters = 2
    cfg.heads.roi_resolution = 4
    cfg.heads.comparison_hidden = 16
    cfg.heads.regressor_hidden = 32
    cfg.train.iterations = 4
    cfg.train.milestones = (3,)
    cfg.train.support_shots = 2
    return cfg.resolve()


@pytest.fixture
def tiny_run_config() -> RunConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def shapes_dir(tmp_path_factory):
    """A small rendered shapes dataset shared across test modules."""
    out = tmp_path_factory.mktemp("shapes")
    spec = ShapesSpec(images=40, image_size=64, min_size=12, max_size=28,
                      max_instances=2)
    generate_shapes_dataset(spec, out, seed=7)
    return out


@pytest.fixture(scope="session")
def shapes_base_split(shapes_dir):
    return load_coco_annotations(shapes_dir / "annotations.json", visible="base")


@pytest.fixture(scope="session")
def shapes_novel_split(shapes_dir):
    return load_coco_annotations(shapes_dir / "annotations.json", visible="novel")


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
