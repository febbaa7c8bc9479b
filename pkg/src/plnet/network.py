"""Part-loss network: toy backbone, GAP classifier heads and the joint loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .partgen import PartBox, generate_parts, grid_parts, roi_pool
from .tensor import Node

ROI_SIZE = (4, 4)
# He-uniform initialisation: U(-a, a) with a = sqrt(INIT_GAIN / fan_in)
INIT_GAIN = 6.0


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    channels: int
    stride: int = 1
    pad: int = 0
    pool: int = 0  # max-pool window (and stride); 0 disables pooling

    def encode(self) -> str:
        return f"{self.kernel}:{self.channels}:{self.stride}:{self.pad}:{self.pool}"

    @classmethod
    def decode(cls, text: str) -> "LayerSpec":
        return cls(*(int(v) for v in text.split(":")))


@dataclass(frozen=True)
class BackboneConfig:
    input_shape: tuple[int, int, int] = (3, 64, 32)
    layers: tuple[LayerSpec, ...] = (
        LayerSpec(3, 16, 1, 1, 2),
        LayerSpec(3, 32, 1, 1, 2),
        LayerSpec(3, 32, 1, 1, 0),
    )

    @property
    def z(self) -> int:
        return self.layers[-1].channels

    def feature_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        for spec in self.layers:
            h = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
            if spec.pool:
                h = (h - spec.pool) // spec.pool + 1
                w = (w - spec.pool) // spec.pool + 1
            c = spec.channels
        return c, h, w

    def validate(self) -> None:
        if not self.layers:
            raise ConfigurationError("backbone needs at least one layer")
        _, h, w = self.feature_shape()
        if h < ROI_SIZE[0] or w < ROI_SIZE[1]:
            raise ConfigurationError(f"feature maps {h}×{w} are smaller than the 4×4 RoI grid")


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a trained model."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 2
    parts: int = 4
    part_mode: str = "generated"  # or "grid"
    part_loss: str = "separate"  # or "concat"
    classifier: str = "gap"  # or "fc"
    threshold: float = 0.5

    def validate(self) -> None:
        self.backbone.validate()
        if self.num_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.parts < 0:
            raise ConfigurationError("K must be >= 0")
        if self.parts > self.backbone.z and self.part_mode == "generated":
            raise ConfigurationError(f"K={self.parts} exceeds the {self.backbone.z} feature channels")
        if self.part_mode not in ("generated", "grid"):
            raise ConfigurationError(f"unknown part mode {self.part_mode!r}")
        if self.part_loss not in ("separate", "concat"):
            raise ConfigurationError(f"unknown part loss {self.part_loss!r}")
        if self.classifier not in ("gap", "fc"):
            raise ConfigurationError(f"unknown classifier {self.classifier!r}")


@dataclass
class Head:
    """1×1 convolution to per-class maps; GAP of those maps gives the scores."""

    kernel: Node
    bias: Node


@dataclass
class Params:
    config: ModelConfig
    backbone: list[Head]
    global_head: Head
    part_heads: list[Head]

    def named(self) -> list[tuple[str, Node]]:
        out = []
        for i, layer in enumerate(self.backbone):
            out += [(f"backbone.{i}.kernel", layer.kernel), (f"backbone.{i}.bias", layer.bias)]
        out += [("global.kernel", self.global_head.kernel), ("global.bias", self.global_head.bias)]
        for k, head in enumerate(self.part_heads):
            out += [(f"part.{k}.kernel", head.kernel), (f"part.{k}.bias", head.bias)]
        return out

    def nodes(self) -> list[Node]:
        return [n for _, n in self.named()]

    def count(self) -> int:
        return sum(n.value.size for n in self.nodes())

    def zero_grad(self) -> None:
        for n in self.nodes():
            n.zero_grad()


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Node:
    bound = np.sqrt(INIT_GAIN / fan_in)
    return Node(rng.uniform(-bound, bound, size=shape).astype(dtype), True)


def _head(rng, cin: int, cout: int, kh: int, kw: int, dtype) -> Head:
    return Head(
        _uniform(rng, (cout, cin, kh, kw), cin * kh * kw, dtype),
        Node(np.zeros(cout, dtype=dtype), True),
    )


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Params:
    config.validate()
    rng = np.random.default_rng(seed)
    cin = config.backbone.input_shape[0]
    backbone = []
    for spec in config.backbone.layers:
        backbone.append(_head(rng, cin, spec.channels, spec.kernel, spec.kernel, dtype))
        cin = spec.channels
    z, h, w = config.backbone.feature_shape()
    c = config.num_classes
    if config.classifier == "fc":
        global_head = _head(rng, z, c, h, w, dtype)
    else:
        global_head = _head(rng, z, c, 1, 1, dtype)
    if config.parts == 0:
        part_heads = []
    elif config.part_loss == "concat":
        part_heads = [_head(rng, z * config.parts, c, 1, 1, dtype)]
    else:
        part_heads = [_head(rng, z, c, 1, 1, dtype) for _ in range(config.parts)]
    return Params(config, backbone, global_head, part_heads)


def zero_params(config: ModelConfig, dtype=np.float64) -> Params:
    params = init_params(config, 0, dtype)
    for n in params.nodes():
        n.value[...] = 0
    return params


def forward_backbone(image, params: Params) -> Node:
    """Feature maps X (Z×H×W, or N×Z×H×W for a batch of images)."""
    x = image if isinstance(image, Node) else Node(np.asarray(image, dtype=params.global_head.kernel.dtype))
    expected = params.config.backbone.input_shape
    if tuple(x.shape[-3:]) != tuple(expected) or x.value.ndim not in (3, 4):
        raise ConfigurationError(f"image shape {x.shape} does not match backbone input {expected}")
    for spec, layer in zip(params.config.backbone.layers, params.backbone):
        x = T.relu(T.conv2d(x, layer.kernel, layer.bias, spec.stride, spec.pad))
        if spec.pool:
            x = T.max_pool2d(x, spec.pool, spec.pool)
    return x


def gap_scores(maps: Node) -> Node:
    """Class scores as the spatial average of each activation map."""
    return T.spatial_mean(maps)


def classify(x: Node, head: Head) -> Node:
    return gap_scores(T.conv2d(x, head.kernel, head.bias))


def global_branch(x: Node, head: Head, label: int) -> Node:
    return T.softmax_cross_entropy(classify(x, head), label)


def part_branch(x_part: Node, head: Head, label: int) -> Node:
    return T.softmax_cross_entropy(classify(x_part, head), label)


def part_boxes(features: np.ndarray, config: ModelConfig, seed: int | None = None) -> list[PartBox]:
    """Boxes for one Z×H×W feature array under the model's part mode."""
    if config.parts == 0:
        return []
    if config.part_mode == "grid":
        _, h, w = features.shape
        return grid_parts(h, w, config.parts)
    return generate_parts(features, config.parts, seed, config.threshold)


def sample_losses(
    x: Node,
    label: int,
    params: Params,
    boxes: list[PartBox],
    part_weight: float = 1.0,
) -> tuple[Node, list[Node]]:
    """Joint loss for one sample's feature maps.

    Returns the total and its components ``[global, part_1, ..., part_K]``
    (a single concatenated-part loss when the model uses ``part_loss="concat"``).
    The total is ``global + part_weight · mean(part losses)``; boxes are
    treated as constants.
    """
    lg = global_branch(x, params.global_head, label)
    if not boxes:
        return lg, [lg]
    pooled = [roi_pool(x, box, ROI_SIZE) for box in boxes]
    if params.config.part_loss == "concat":
        parts = [part_branch(T.concat(pooled, axis=0), params.part_heads[0], label)]
    else:
        if len(boxes) != len(params.part_heads):
            raise ConfigurationError(f"{len(boxes)} boxes for {len(params.part_heads)} part heads")
        parts = [part_branch(p, head, label) for p, head in zip(pooled, params.part_heads)]
    mean_part = T.scale(T.add_all(parts), part_weight / len(parts))
    return T.add(lg, mean_part), [lg, *parts]


def total_loss(image, label: int, params: Params, k: int | None = None, part_weight: float = 1.0) -> Node:
    """Global loss plus the averaged part losses for a single image."""
    if k is not None and k != params.config.parts:
        raise ConfigurationError(f"model was built for K={params.config.parts}, got K={k}")
    x = forward_backbone(image, params)
    boxes = part_boxes(x.value, params.config)
    return sample_losses(x, label, params, boxes, part_weight)[0]


def save_checkpoint(params: Params, directory: str | Path) -> None:
    """Write every parameter as a PLTN file plus a ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = params.config
    lines = [
        "# plnet checkpoint",
        f"input_shape = {','.join(map(str, cfg.backbone.input_shape))}",
        f"layers = {';'.join(s.encode() for s in cfg.backbone.layers)}",
        f"num_classes = {cfg.num_classes}",
        f"parts = {cfg.parts}",
        f"part_mode = {cfg.part_mode}",
        f"part_loss = {cfg.part_loss}",
        f"classifier = {cfg.classifier}",
        f"threshold = {cfg.threshold!r}",
    ]
    for name, node in params.named():
        T.save_pltn(directory / f"{name}.pltn", node.value)
        lines.append(f"param {name} {','.join(map(str, node.shape))}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory: str | Path, dtype=np.float32) -> Params:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise ConfigurationError(f"{directory} is not a checkpoint (missing manifest.txt)")
    settings: dict[str, str] = {}
    shapes: dict[str, tuple[int, ...]] = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("param "):
            _, name, shape = line.split()
            shapes[name] = tuple(int(v) for v in shape.split(","))
        else:
            key, _, value = line.partition("=")
            settings[key.strip()] = value.strip()
    backbone = BackboneConfig(
        input_shape=tuple(int(v) for v in settings["input_shape"].split(",")),
        layers=tuple(LayerSpec.decode(t) for t in settings["layers"].split(";")),
    )
    config = ModelConfig(
        backbone=backbone,
        num_classes=int(settings["num_classes"]),
        parts=int(settings["parts"]),
        part_mode=settings["part_mode"],
        part_loss=settings["part_loss"],
        classifier=settings["classifier"],
        threshold=float(settings["threshold"]),
    )
    params = init_params(config, 0, dtype)
    for name, node in params.named():
        if shapes.get(name) != node.shape:
            raise ConfigurationError(f"checkpoint parameter {name} has shape {shapes.get(name)}, expected {node.shape}")
        node.value = T.load_pltn(directory / f"{name}.pltn").astype(dtype)
    return params

