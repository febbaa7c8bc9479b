import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from plnet import gradcheck
from plnet import tensor as T
from plnet.errors import DegenerateInputError
from plnet.partgen import (
    ArgmaxLocation,
    PartBox,
    argmax_locations,
    binarize_and_box,
    cluster_saliency,
    cluster_vertical,
    generate_parts,
    grid_parts,
    roi_pool,
)
from plnet.tensor import Node


def banded(rng, bands, z_per_band=4, h=16, w=8):
    """Channels that fire only inside their band's rows, over weak noise."""
    x = rng.uniform(0, 0.1, size=(z_per_band * len(bands), h, w))
    for b, (r0, r1) in enumerate(bands):
        for z in range(b * z_per_band, (b + 1) * z_per_band):
            x[z, r0 : r1 + 1] = rng.uniform(0.5, 1.0, size=(r1 - r0 + 1, w))
    return x


def random_bands(rng, k, h=16):
    cuts = np.sort(rng.choice(np.arange(1, h), size=2 * k - 1, replace=False))
    edges = np.concatenate([[0], cuts, [h]])
    # alternate band / gap so bands are disjoint and separated
    return [(int(edges[2 * i]), int(edges[2 * i + 1]) - 1) for i in range(k)]


class TestArgmax:
    def test_example(self):
        assert argmax_locations(np.array([[[0, 5], [3, 1]]])) == [ArgmaxLocation(0, 0, 1)]

    def test_constant_channel(self):
        assert argmax_locations(np.full((1, 3, 3), 2.0))[0] == ArgmaxLocation(0, 0, 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scan(self, seed):
        x = np.random.default_rng(seed).normal(size=(8, 16, 8))
        assert [(a.row, a.col) for a in argmax_locations(x)] == oracles.argmax_scan(x)


class TestClusterVertical:
    def test_example(self):
        a = cluster_vertical([1, 1, 2, 14, 15, 15], 2)
        assert a.labels == (0, 0, 0, 1, 1, 1)
        assert a.centers == pytest.approx((4 / 3, 44 / 3))

    def test_single_cluster(self):
        a = cluster_vertical([7, 7, 7], 1)
        assert a.labels == (0, 0, 0) and a.centers == (7.0,)

    def test_each_point_own_cluster(self):
        a = cluster_vertical([9, 2, 5], 3)
        assert a.labels == (2, 0, 1)
        assert a.centers == (2.0, 5.0, 9.0)

    def test_accepts_locations(self):
        locs = [ArgmaxLocation(z, r, 0) for z, r in enumerate([3, 0, 3])]
        assert cluster_vertical(locs, 2).labels == (1, 0, 1)

    def test_too_few_channels(self):
        with pytest.raises(DegenerateInputError, match="smaller K"):
            cluster_vertical([1, 2], 3)

    @pytest.mark.parametrize("seed", range(40))
    def test_matches_exhaustive_partition(self, seed):
        rng = np.random.default_rng(seed)
        z, k = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        k = min(k, z)
        rows = rng.integers(0, 16, size=z)
        a = cluster_vertical(rows, k)
        _, winners = oracles.optimal_partitions(rows, k)
        assert frozenset(frozenset(a.members(j)) for j in range(k)) in winners

    def test_lloyd_method_is_available(self):
        a = cluster_vertical([1, 1, 2, 14, 15, 15], 2, method="lloyd")
        assert a.labels == (0, 0, 0, 1, 1, 1)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 15), min_size=3, max_size=12), st.integers(1, 3))
    def test_labels_ordered_by_center(self, rows, k):
        a = cluster_vertical(rows, k)
        assert list(a.centers) == sorted(a.centers)
        assert all(a.members(j) for j in range(k))
        for j in range(k):
            assert np.mean([rows[z] for z in a.members(j)]) == pytest.approx(a.centers[j])


class TestSaliency:
    def test_single_channel(self):
        x = np.array([[[2.0, 4.0, 6.0]]])
        a = cluster_vertical([0], 1)
        assert cluster_saliency(x, a, 0).tolist() == [[0.0, 0.5, 1.0]]

    def test_two_channels(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(2, 3, 4))
        mean = (x[0] + x[1]) / 2
        expected = (mean - mean.min()) / (mean.max() - mean.min())
        np.testing.assert_allclose(cluster_saliency(x, cluster_vertical([0, 0], 1), 0), expected)

    def test_constant_mean(self):
        x = np.stack([np.ones((3, 3)), np.full((3, 3), 3.0)])
        assert not cluster_saliency(x, cluster_vertical([0, 0], 1), 0).any()


class TestBinarizeAndBox:
    def test_example(self):
        s = np.zeros((5, 7))
        s[1, 2] = s[3, 5] = 1.0
        b = binarize_and_box(s)
        assert (b.top, b.bottom, b.left, b.right) == (1, 3, 2, 5)

    def test_empty_foreground(self):
        b = binarize_and_box(np.zeros((4, 3)))
        assert (b.top, b.bottom, b.left, b.right) == (0, 3, 0, 2)

    def test_threshold_is_strict(self):
        s = np.full((2, 2), 0.5)
        assert binarize_and_box(s).height == 2  # nothing above 0.5: fallback
        s[1, 1] = 0.51
        b = binarize_and_box(s)
        assert (b.top, b.left) == (1, 1)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_scan(self, seed):
        s = np.random.default_rng(seed).uniform(size=(16, 8)) ** 4
        b = binarize_and_box(s)
        assert (b.top, b.bottom, b.left, b.right) == oracles.box_scan(s)


class TestGenerateParts:
    def test_two_bands(self):
        x = banded(np.random.default_rng(0), [(1, 4), (9, 13)])
        boxes = generate_parts(x, 2)
        assert [b.index for b in boxes] == [0, 1]
        assert 1 <= boxes[0].top <= boxes[0].bottom <= 4
        assert 9 <= boxes[1].top <= boxes[1].bottom <= 13

    def test_single_part(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(6, 8, 4))
        s = x.mean(axis=0)
        s = (s - s.min()) / (s.max() - s.min())
        b = generate_parts(x, 1)[0]
        assert (b.top, b.bottom, b.left, b.right) == oracles.box_scan(s)

    def test_deterministic(self):
        x = np.random.default_rng(2).uniform(size=(12, 16, 8))
        assert generate_parts(x, 3, seed=5) == generate_parts(x, 3, seed=5)

    def test_band_intersection_rate(self):
        rng = np.random.default_rng(3)
        trials, hits = 200, 0
        for _ in range(trials):
            k = int(rng.integers(2, 5))
            bands = random_bands(rng, k)
            boxes = generate_parts(banded(rng, bands), k)
            hits += all(b.top <= r1 and b.bottom >= r0 for b, (r0, r1) in zip(boxes, bands))
        assert hits / trials >= 0.95

    @pytest.mark.parametrize("seed", range(10))
    def test_channel_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(10, 16, 8)) ** 3
        k = int(rng.integers(1, 4))
        assert generate_parts(x, k) == generate_parts(x[rng.permutation(10)], k)

    @pytest.mark.parametrize("scale", [1e-3, 0.5, 7.0, 1e4])
    def test_scale_invariance(self, scale):
        x = np.random.default_rng(4).uniform(size=(10, 16, 8)) ** 3
        assert generate_parts(x, 3) == generate_parts(x * scale, 3)

    def test_box_centres_follow_cluster_order(self):
        x = banded(np.random.default_rng(5), [(0, 2), (5, 8), (11, 15)])
        boxes = generate_parts(x, 3)
        centres = [(b.top + b.bottom) / 2 for b in boxes]
        assert centres == sorted(centres)


def test_grid_parts():
    boxes = grid_parts(16, 8, 4)
    assert [(b.top, b.bottom) for b in boxes] == [(0, 3), (4, 7), (8, 11), (12, 15)]
    assert all((b.left, b.right) == (0, 7) for b in boxes)


class TestRoiPool:
    def test_example(self):
        x = Node(np.arange(1.0, 17.0).reshape(1, 4, 4))
        out = roi_pool(x, PartBox(0, 0, 3, 0, 3), out=(2, 2))
        assert out.value.tolist() == [[[6.0, 8.0], [14.0, 16.0]]]

    def test_constant_input(self):
        x = Node(np.full((2, 7, 5), 3.0))
        assert (roi_pool(x, PartBox(0, 1, 5, 2, 3)).value == 3.0).all()

    def test_single_cell_box(self):
        x = np.random.default_rng(0).normal(size=(2, 5, 5))
        out = roi_pool(Node(x), PartBox(0, 2, 2, 3, 3)).value
        assert (out == x[:, 2:3, 3:4]).all()
        assert out.shape == (2, 4, 4)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_loops(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 9, 7))
        top, bottom = sorted(rng.integers(0, 9, size=2))
        left, right = sorted(rng.integers(0, 7, size=2))
        out = roi_pool(Node(x), PartBox(0, int(top), int(bottom), int(left), int(right))).value
        np.testing.assert_array_equal(out, oracles.roi_pool_loops(x, top, bottom, left, right))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            build, inputs = gradcheck.case_roi_pool(rng)
            assert gradcheck.check(build, inputs) < 1e-4

    def test_gradient_routes_to_first_maximum(self):
        x = Node(np.zeros((1, 4, 4)), True)
        T.backward(T.total(roi_pool(x, PartBox(0, 0, 3, 0, 3), out=(2, 2))))
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1
        np.testing.assert_array_equal(x.grad[0], expected)
