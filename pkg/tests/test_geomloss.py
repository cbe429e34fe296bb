"""Tests for box and mask geometry."""

import numpy as np
import pytest

from crossdiff import tensor as T
from crossdiff.errors import EmptyMaskError, ShapeError
from crossdiff.geomloss import (Box3D, PointMask, box_from_mask, dice_loss, iou3d, iou_loss, mask_from_box,
                                mask_iou)
from crossdiff.tensor import Tensor, grad_check

from . import oracles


def _random_box(rng):
    lo = rng.uniform(-1.0, 0.5, size=3)
    return Box3D(lo, lo + rng.uniform(0.1, 1.0, size=3))


class TestBox3D:
    """Test the box value type."""

    def test_inverted_corners_rejected(self):
        with pytest.raises(ShapeError):
            Box3D([0, 0, 0], [1, -1, 1])

    def test_degenerate_box_allowed(self):
        box = Box3D([0, 0, 0], [0, 1, 1])
        assert box.volume == 0.0

    def test_contains_and_intersects(self):
        box = Box3D([0, 0, 0], [1, 1, 1])
        assert box.contains(np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]])).tolist() == [True, False]
        assert box.intersects(Box3D([0.5, 0.5, 0.5], [2, 2, 2]))
        assert not box.intersects(Box3D([1, 0, 0], [2, 1, 1]))

    def test_dict_round_trip(self):
        box = Box3D([0.1, 0.2, 0.3], [1, 2, 3])
        again = Box3D.from_dict(box.to_dict())
        np.testing.assert_array_equal(again.corners(), box.corners())


class TestIoU:
    """Test box IoU and its loss."""

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = _random_box(rng), _random_box(rng)
            assert iou3d(a, b) == pytest.approx(oracles.iou3d(a.corners().tolist(), b.corners().tolist()))

    def test_identical_and_disjoint(self):
        box = Box3D([0, 0, 0], [1, 2, 3])
        assert iou3d(box, box) == pytest.approx(1.0)
        assert iou3d(box, Box3D([5, 5, 5], [6, 6, 6])) == 0.0
        assert iou3d(Box3D([0, 0, 0], [0, 0, 0]), Box3D([0, 0, 0], [0, 0, 0])) == 0.0

    def test_loss_is_one_minus_iou(self):
        a, b = Box3D([0, 0, 0], [2, 2, 2]), Box3D([1, 1, 1], [3, 3, 3])
        assert iou_loss(a, b).item() == pytest.approx(1.0 - iou3d(a, b))

    def test_loss_of_empty_union(self):
        point = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        assert iou_loss(point, point).item() == 1.0

    def test_loss_gradient(self):
        pred = Tensor([0.0, 0.1, -0.2, 1.0, 1.2, 0.9], requires_grad=True, name="pred")
        target = Box3D([0.3, 0.2, 0.0], [1.4, 0.8, 1.1])
        assert grad_check(lambda: iou_loss(pred, target), [pred]).passed

    def test_bad_tensor_shape(self):
        with pytest.raises(ShapeError):
            iou_loss(Tensor(np.zeros(5)), Box3D([0, 0, 0], [1, 1, 1]))


class TestMasks:
    """Test Dice, mask IoU and the box/mask conversions."""

    def setup_method(self):
        self.points = np.random.default_rng(1).uniform(-1.0, 1.0, size=(20000, 3))

    def test_dice_perfect_and_disjoint(self):
        assert dice_loss([1, 0, 1], [1, 0, 1]).item() == pytest.approx(0.0, abs=1e-6)
        assert dice_loss([1, 0, 0], [0, 1, 0]).item() == pytest.approx(1.0, abs=1e-6)

    def test_dice_of_two_empty_masks(self):
        """Test that eps keeps an all-zero pair finite and perfect."""
        assert dice_loss([0, 0], [0, 0]).item() == pytest.approx(0.0)

    def test_dice_length_mismatch(self):
        with pytest.raises(ShapeError):
            dice_loss([1, 0], [1, 0, 1])

    def test_dice_gradient(self):
        pred = Tensor(np.random.default_rng(2).uniform(0.1, 0.9, size=12), requires_grad=True, name="pred")
        target = (np.arange(12) % 3 == 0).astype(float)
        assert grad_check(lambda: dice_loss(pred, target), [pred]).passed

    def test_mask_iou(self):
        assert mask_iou([0.9, 0.8, 0.1, 0.0], [0.9, 0.1, 0.9, 0.0]) == pytest.approx(1 / 3)
        assert mask_iou([0.0, 0.1], [0.2, 0.3]) == 0.0

    def test_point_mask_validation(self):
        assert PointMask([0.2, 0.7]).binary().tolist() == [False, True]
        with pytest.raises(ValueError):
            PointMask([1.2])

    def test_box_from_mask_is_tight(self):
        mask = np.zeros(20000)
        mask[:10] = 1.0
        box = box_from_mask(mask, self.points)
        np.testing.assert_allclose(box.lo, self.points[:10].min(axis=0))
        np.testing.assert_allclose(box.hi, self.points[:10].max(axis=0))

    def test_box_from_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            box_from_mask(np.full(20000, 0.2), self.points)

    def test_mask_from_box_is_soft_containment(self):
        box = Box3D([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5])
        mask = mask_from_box(box, np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.9, 0.0, 0.0]]), k=20.0).data
        assert mask[0] == pytest.approx(1.0 / (1.0 + np.exp(-10.0)))
        assert mask[1] == pytest.approx(0.5)
        assert mask[2] < 0.5

    def test_box_mask_box_loop(self):
        """Test that converting a box to a sharp mask and back nearly recovers it."""
        rng = np.random.default_rng(3)
        for _ in range(100):
            lo = rng.uniform(-0.9, 0.0, size=3)
            box = Box3D(lo, lo + rng.uniform(0.5, 0.9, size=3))
            recovered = box_from_mask(mask_from_box(box, self.points, k=200.0), self.points)
            assert iou3d(box, recovered) >= 0.9

    def test_mask_from_box_gradient(self):
        corners = Tensor([-0.4, -0.3, -0.5, 0.3, 0.4, 0.2], requires_grad=True, name="box")
        points = np.random.default_rng(4).uniform(-0.6, 0.6, size=(20, 3))
        w = Tensor(np.random.default_rng(5).normal(size=20))
        assert grad_check(lambda: T.sum(mask_from_box(corners, points) * w), [corners]).passed
