import numpy as np
import pytest
import torch

from irfsod.config import BackboneConfig
from irfsod.features import (Backbone, FeatureMap, RegionFeature,
                             extract_features, roi_extract, roi_extract_batch,
                             support_prototype)
from irfsod.geometry import Box


def make_backbone(channels=(4, 6), strides=(2, 2), seed=0):
    torch.manual_seed(seed)
    return Backbone(BackboneConfig(channels=channels, strides=strides))


class TestBackbone:
    def test_output_shape_is_ceil_division(self):
        bb = make_backbone(channels=(4, 4, 8), strides=(2, 2, 2))
        image = np.zeros((64, 64, 3), dtype=np.uint8)
        fm = extract_features(image, bb)
        assert fm.stride == 8
        assert fm.spatial_shape == (8, 8)
        irregular = np.zeros((35, 67, 3), dtype=np.uint8)
        fm2 = extract_features(irregular, bb)
        assert fm2.spatial_shape == (int(np.ceil(35 / 8)), int(np.ceil(67 / 8)))

    def test_deterministic(self):
        bb = make_backbone()
        image = (np.arange(32 * 32 * 3) % 255).astype(np.uint8).reshape(32, 32, 3)
        a = extract_features(image, bb).values
        b = extract_features(image, bb).values
        assert torch.equal(a, b)

    def test_empty_and_tiny_images_rejected(self):
        bb = make_backbone()
        with pytest.raises(ValueError):
            extract_features(np.zeros((0, 0, 3), dtype=np.uint8), bb)
        with pytest.raises(ValueError):
            extract_features(np.zeros((2, 2, 3), dtype=np.uint8), bb)

    def test_zero_image_activations_follow_biases(self):
        # Two-stage stack evaluated by hand on an all-zero image: stage one
        # outputs its bias, ReLU clips, stage two mixes the clipped biases.
        bb = make_backbone(channels=(2, 3), strides=(1, 1))
        with torch.no_grad():
            bb.stages[0].weight.zero_()
            bb.stages[0].bias.copy_(torch.tensor([0.5, -1.0]))
            bb.stages[2].weight.zero_()
            # Center tap only, so interior cells see 9 copies of nothing else.
            bb.stages[2].weight[:, :, 1, 1] = torch.tensor(
                [[1.0, 0.0], [0.0, 1.0], [2.0, 3.0]])
            bb.stages[2].bias.copy_(torch.tensor([0.1, 0.2, 0.3]))
        fm = extract_features(np.zeros((8, 8, 3), dtype=np.uint8), bb)
        interior = fm.values[:, 2:-2, 2:-2]
        # relu(stage1) = (0.5, 0.0); stage2 = W @ (0.5, 0) + bias, then relu.
        expected = torch.tensor([0.5 + 0.1, 0.0 + 0.2, 1.0 + 0.3])
        assert torch.allclose(interior, expected[:, None, None], atol=1e-6)


class TestRegionFeature:
    def test_pooled_is_spatial_mean(self, rng):
        values = torch.as_tensor(rng.normal(size=(5, 4, 4)))
        region = RegionFeature(values)
        manual = values.reshape(5, -1).mean(dim=1)
        assert torch.allclose(region.pooled, manual, atol=1e-6)

    def test_flattened_order_channel_major(self):
        values = torch.arange(2 * 2 * 2, dtype=torch.float32).reshape(2, 2, 2)
        region = RegionFeature(values)
        assert torch.equal(region.flattened, torch.arange(8, dtype=torch.float32))

    def test_pixel_vectors_row_major(self):
        values = torch.arange(3 * 2 * 2, dtype=torch.float32).reshape(3, 2, 2)
        px = RegionFeature(values).pixel_vectors()
        assert px.shape == (4, 3)
        assert torch.equal(px[1], values[:, 0, 1])


class TestRoiExtract:
    def test_constant_region_replicates_cell(self):
        values = torch.full((3, 6, 6), 2.5)
        fm = FeatureMap(values, stride=8)
        region = roi_extract(fm, Box(16, 16, 24, 24), r=4)  # one feature cell
        assert region.values.shape == (3, 4, 4)
        assert torch.allclose(region.values, torch.full((3, 4, 4), 2.5))

    def test_deterministic(self, rng):
        values = torch.as_tensor(rng.normal(size=(2, 8, 8)), dtype=torch.float32)
        fm = FeatureMap(values, stride=4)
        a = roi_extract(fm, Box(3, 5, 17, 23), r=3).values
        b = roi_extract(fm, Box(3, 5, 17, 23), r=3).values
        assert torch.equal(a, b)

    def test_linear_ramp_matches_scalar_bilinear_oracle(self):
        # Feature value = x coordinate of the cell, so interpolation is linear
        # in the continuous sample position: value(u) = u - 0.5.
        w = 8
        ramp = torch.arange(w, dtype=torch.float64).repeat(6, 1).unsqueeze(0)
        fm = FeatureMap(ramp, stride=2)
        box = Box(3.0, 2.0, 11.0, 10.0)  # feature coords [1.5, 5.5]
        r = 4
        region = roi_extract(fm, box, r=r)
        for i in range(r):
            x_feature = 1.5 + (i + 0.5) / r * 4.0
            expected = x_feature - 0.5
            assert region.values[0, 0, i].item() == pytest.approx(expected, abs=1e-9)

    def test_full_image_box_reproduces_map(self):
        values = torch.randn(3, 5, 5)
        fm = FeatureMap(values, stride=8)
        region = roi_extract(fm, Box(0, 0, 40, 40), r=5)
        assert torch.allclose(region.values, values, atol=1e-6)

    def test_subcell_box_is_finite(self):
        values = torch.randn(2, 6, 6)
        fm = FeatureMap(values, stride=8)
        region = roi_extract(fm, Box(10.0, 10.0, 10.4, 10.4), r=3)
        assert torch.isfinite(region.values).all()

    def test_border_clamped(self):
        values = torch.randn(2, 4, 4)
        fm = FeatureMap(values, stride=8)
        region = roi_extract(fm, Box(0, 0, 2, 2), r=2)
        assert torch.isfinite(region.values).all()

    def test_batch_matches_single(self, rng):
        values = torch.as_tensor(rng.normal(size=(4, 9, 9)), dtype=torch.float64)
        fm = FeatureMap(values, stride=4)
        boxes = np.array([[2, 2, 20, 20], [0, 0, 36, 36], [5, 9, 7, 30]], float)
        batch = roi_extract_batch(fm, boxes, r=3)
        for i, row in enumerate(boxes):
            single = roi_extract(fm, Box.from_array(row), r=3)
            assert torch.allclose(batch[i], single.values, atol=1e-12)


class TestSupportPrototype:
    def test_single_instance_identity(self, rng):
        inst = RegionFeature(torch.as_tensor(rng.normal(size=(3, 4, 4))))
        proto = support_prototype([inst], category=2)
        assert torch.equal(proto.values, inst.values)
        assert proto.shots == 1 and proto.category == 2

    def test_opposite_instances_cancel(self, rng):
        values = torch.as_tensor(rng.normal(size=(3, 4, 4)))
        proto = support_prototype([RegionFeature(values), RegionFeature(-values)], 1)
        assert torch.allclose(proto.values, torch.zeros_like(values), atol=1e-9)

    def test_mean_matches_scalar_loop_oracle(self, rng):
        instances = [RegionFeature(torch.as_tensor(rng.normal(size=(2, 3, 3))))
                     for _ in range(10)]
        proto = support_prototype(instances, 1)
        manual = np.zeros((2, 3, 3))
        for inst in instances:
            arr = inst.values.numpy()
            for c in range(2):
                for i in range(3):
                    for j in range(3):
                        manual[c, i, j] += arr[c, i, j] / 10
        assert np.abs(proto.values.numpy() - manual).max() < 1e-7

    def test_permutation_invariant(self, rng):
        instances = [RegionFeature(torch.as_tensor(rng.normal(size=(2, 3, 3))))
                     for _ in range(5)]
        a = support_prototype(instances, 1).values
        b = support_prototype(list(reversed(instances)), 1).values
        assert torch.allclose(a, b, atol=1e-9)

    def test_empty_list_is_error(self):
        with pytest.raises(ValueError):
            support_prototype([], 1)

    def test_shape_mismatch_is_error(self, rng):
        a = RegionFeature(torch.zeros(2, 3, 3))
        b = RegionFeature(torch.zeros(2, 4, 4))
        with pytest.raises(ValueError):
            support_prototype([a, b], 1)

    def test_pooled_consistency_invariant(self, rng):
        # pooled always equals the mean over the r^2 cells, prototype or not.
        instances = [RegionFeature(torch.as_tensor(rng.normal(size=(4, 5, 5))))
                     for _ in range(3)]
        proto = support_prototype(instances, 1)
        assert torch.allclose(proto.pooled, proto.values.mean(dim=(1, 2)), atol=1e-6)
