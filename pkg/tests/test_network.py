import numpy as np
import pytest

from plnet import gradcheck
from plnet import tensor as T
from plnet.errors import ConfigurationError
from plnet.network import (
    BackboneConfig,
    Head,
    LayerSpec,
    ModelConfig,
    forward_backbone,
    gap_scores,
    global_branch,
    init_params,
    load_checkpoint,
    part_boxes,
    part_branch,
    sample_losses,
    save_checkpoint,
    total_loss,
    zero_params,
)
from plnet.partgen import roi_pool
from plnet.tensor import Node

SMALL = BackboneConfig((3, 16, 8), (LayerSpec(3, 4, 1, 1, 2), LayerSpec(3, 6, 1, 1, 0)))


def small(parts=2, classes=3, **kw):
    return ModelConfig(backbone=SMALL, num_classes=classes, parts=parts, **kw)


def image(seed=0, shape=(3, 16, 8)):
    return np.random.default_rng(seed).uniform(size=shape)


class TestBackbone:
    def test_default_feature_shape(self):
        assert BackboneConfig().feature_shape() == (32, 16, 8)
        params = init_params(ModelConfig(parts=0), seed=0)
        assert forward_backbone(image(0, (3, 64, 32)), params).shape == (32, 16, 8)

    def test_zero_everything(self):
        params = zero_params(small())
        assert not forward_backbone(np.zeros((3, 16, 8)), params).value.any()

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            forward_backbone(np.zeros((3, 8, 8)), init_params(small()))

    def test_feature_map_too_small(self):
        cfg = BackboneConfig((3, 8, 8), (LayerSpec(3, 4, 1, 1, 4),))
        with pytest.raises(ConfigurationError):
            cfg.validate()

    def test_first_layer_gradient(self):
        params = init_params(small(), seed=1, dtype=np.float64)
        x = image(1)
        spec = SMALL.layers
        first = {"k": params.backbone[0].kernel.value.copy(), "b": params.backbone[0].bias.value.copy()}

        def build(n):
            h = T.max_pool2d(T.relu(T.conv2d(Node(x), n["k"], n["b"], 1, 1)), 2, 2)
            layer = params.backbone[1]
            return T.total(T.relu(T.conv2d(h, Node(layer.kernel.value), Node(layer.bias.value), spec[1].stride, spec[1].pad)))

        assert gradcheck.check(build, first) < 1e-4

    def test_batch_matches_single(self):
        params = init_params(small(), seed=2)
        batch = np.stack([image(3), image(4)])
        out = forward_backbone(batch, params).value
        np.testing.assert_allclose(out[1], forward_backbone(batch[1], params).value, atol=1e-12)


class TestGapScores:
    def test_mean(self):
        assert gap_scores(Node(np.array([[[1.0, 2.0], [3.0, 4.0]]]))).value.tolist() == [2.5]

    def test_constant(self):
        assert gap_scores(Node(np.full((3, 2, 5), 1.5))).value.tolist() == [1.5] * 3

    def test_double_sum(self):
        maps = np.random.default_rng(0).normal(size=(5, 4, 4))
        expected = [sum(maps[c, h, w] for h in range(4) for w in range(4)) / 16 for c in range(5)]
        np.testing.assert_allclose(gap_scores(Node(maps)).value, expected, atol=1e-14)

    def test_permutation_equivariant(self):
        maps = np.random.default_rng(1).normal(size=(6, 3, 3))
        perm = np.random.default_rng(2).permutation(6)
        np.testing.assert_array_equal(gap_scores(Node(maps[perm])).value, gap_scores(Node(maps)).value[perm])


class TestBranches:
    def test_zero_head(self):
        x = Node(np.random.default_rng(0).normal(size=(6, 8, 4)))
        head = Head(Node(np.zeros((5, 6, 1, 1))), Node(np.zeros(5)))
        assert global_branch(x, head, 2).item() == pytest.approx(np.log(5))
        assert part_branch(Node(x.value[:, :4, :4]), head, 2).item() == pytest.approx(np.log(5))

    def test_saturated(self):
        x = Node(np.ones((1, 2, 2)))
        head = Head(Node(np.array([10.0, -10.0]).reshape(2, 1, 1, 1)), Node(np.zeros(2)))
        assert global_branch(x, head, 0).item() < 1e-3

    def test_equal_heads_equal_losses(self):
        x = Node(np.random.default_rng(1).normal(size=(6, 4, 4)))
        k = np.random.default_rng(2).normal(size=(3, 6, 1, 1))
        a = part_branch(x, Head(Node(k), Node(np.zeros(3))), 1).item()
        b = part_branch(x, Head(Node(k.copy()), Node(np.zeros(3))), 1).item()
        assert a == b

    @pytest.mark.parametrize("branch", [global_branch, part_branch])
    def test_gradient(self, branch):
        rng = np.random.default_rng(3)
        inputs = {"x": rng.normal(size=(6, 4, 4)), "k": rng.normal(size=(3, 6, 1, 1)), "b": rng.normal(size=3)}
        assert gradcheck.check(lambda n: branch(n["x"], Head(n["k"], n["b"]), 2), inputs) < 1e-4


class TestTotalLoss:
    def test_k0_is_global(self):
        params = init_params(small(parts=0), seed=0)
        x = forward_backbone(image(), params)
        assert total_loss(image(), 1, params, 0).item() == global_branch(x, params.global_head, 1).item()

    def test_zero_params_give_log_c(self):
        for k in (0, 2):
            for seed in range(3):
                assert total_loss(image(seed), 0, zero_params(small(k, 4))).item() == pytest.approx(
                    (1 + (k > 0)) * np.log(4)
                )

    def test_averaging_identity(self):
        params = init_params(small(parts=2), seed=4)
        params.part_heads[1].kernel.value = params.part_heads[0].kernel.value.copy()
        params.part_heads[1].bias.value = params.part_heads[0].bias.value.copy()
        x = forward_backbone(image(5), params)
        box = part_boxes(x.value, params.config)[0]
        total, parts = sample_losses(x, 1, params, [box, box])
        assert parts[1].item() == parts[2].item()
        assert total.item() == pytest.approx(parts[0].item() + parts[1].item(), rel=1e-15)

    def test_hand_assembled_k4(self):
        cfg = ModelConfig(backbone=SMALL, num_classes=3, parts=4)
        params = init_params(cfg, seed=6)
        img = image(7)
        x = forward_backbone(img, params)
        boxes = part_boxes(x.value, cfg)
        lg = global_branch(x, params.global_head, 2).item()
        lp = [part_branch(roi_pool(x, b), h, 2).item() for b, h in zip(boxes, params.part_heads)]
        assert total_loss(img, 2, params, 4).item() == lg + sum(lp) / 4
        assert total_loss(img, 2, params, 4).item() >= 0

    def test_k_mismatch(self):
        with pytest.raises(ConfigurationError):
            total_loss(image(), 0, init_params(small(parts=2)), 3)

    def test_part_weight(self):
        params = init_params(small(parts=2), seed=8)
        x = forward_backbone(image(8), params)
        boxes = part_boxes(x.value, params.config)
        _, comps = sample_losses(x, 0, params, boxes)
        weighted, _ = sample_losses(x, 0, params, boxes, part_weight=0.25)
        assert weighted.item() == pytest.approx(comps[0].item() + 0.25 * (comps[1].item() + comps[2].item()) / 2)

    def test_grid_mode(self):
        params = init_params(small(parts=4, part_mode="grid"), seed=9)
        x = forward_backbone(image(9), params)
        assert [(b.top, b.bottom) for b in part_boxes(x.value, params.config)] == [(0, 1), (2, 3), (4, 5), (6, 7)]

    def test_concat_variant(self):
        params = init_params(small(parts=3, part_loss="concat"), seed=10)
        assert len(params.part_heads) == 1
        assert params.part_heads[0].kernel.shape == (3, 18, 1, 1)
        assert np.isfinite(total_loss(image(10), 0, params).item())


class TestParameters:
    @pytest.mark.parametrize("k", [0, 1, 2, 4])
    def test_count(self, k):
        params = init_params(small(parts=k, classes=5))
        backbone = sum(l.kernel.value.size + l.bias.value.size for l in params.backbone)
        z, c = SMALL.z, 5
        assert params.count() == backbone + (k + 1) * (z * c + c)
        assert backbone == 3 * 4 * 9 + 4 + 4 * 6 * 9 + 6

    def test_part_heads_independent(self):
        params = init_params(small(parts=3), seed=11, dtype=np.float64)
        img = image(11)

        def part_grads(drop):
            params.zero_grad()
            x = forward_backbone(img, params)
            _, comps = sample_losses(x, 1, params, part_boxes(x.value, params.config))
            T.backward(T.add_all([c for i, c in enumerate(comps) if i != drop]))
            return [h.kernel.grad.copy() for h in params.part_heads]

        full, without_second = part_grads(None), part_grads(2)
        np.testing.assert_array_equal(full[0], without_second[0])
        np.testing.assert_array_equal(full[2], without_second[2])
        assert not without_second[1].any()
        assert full[1].any()

    def test_seeded_init(self):
        a, b = init_params(small(), seed=3), init_params(small(), seed=3)
        assert all(x.value.tobytes() == y.value.tobytes() for x, y in zip(a.nodes(), b.nodes()))


def test_checkpoint_round_trip(tmp_path):
    params = init_params(small(parts=2, part_mode="grid", threshold=0.4), seed=12, dtype=np.float32)
    save_checkpoint(params, tmp_path / "ck")
    manifest = (tmp_path / "ck" / "manifest.txt").read_text()
    assert "param part.1.kernel 3,6,1,1" in manifest
    loaded = load_checkpoint(tmp_path / "ck")
    assert loaded.config == params.config
    for (n1, a), (n2, b) in zip(params.named(), loaded.named()):
        assert n1 == n2 and a.value.tobytes() == b.value.tobytes()


def test_checkpoint_missing_manifest(tmp_path):
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path)
