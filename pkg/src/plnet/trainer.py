"""Mini-batch SGD on the joint global + part loss."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, InputError, TrainingError
from .network import BackboneConfig, ModelConfig, Params, forward_backbone, init_params, part_boxes, sample_losses, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.02
    step: int = 250
    gamma: float = 0.75
    max_iter: int = 300
    batch_size: int = 16
    parts: int = 4
    seed: int = 0
    part_weight: float = 1.0
    part_mode: str = "generated"
    part_loss: str = "separate"
    classifier: str = "gap"
    threshold: float = 0.5
    momentum: float = 0.0
    weight_decay: float = 0.0
    checkpoint_interval: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be > 0")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if self.parts < 0:
            raise ConfigurationError("K must be >= 0")
        if self.step < 1 or self.batch_size < 1 or self.max_iter < 0:
            raise ConfigurationError("step and batch size must be positive, max_iter non-negative")

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        """The full-scale schedule: 50k iterations, lr 0.001, step 2500, gamma 0.75."""
        return cls(lr=0.001, step=2500, gamma=0.75, max_iter=50_000)

    def updated(self, values: dict) -> "TrainConfig":
        """Copy with string or typed overrides, e.g. from a config file."""
        types = {f.name: f.type for f in dataclasses.fields(self)}
        changes = {}
        for key, value in values.items():
            key = key.replace("-", "_").lower()
            if key == "k":
                key = "parts"
            if key not in types:
                raise ConfigurationError(f"unknown training option {key!r}")
            if isinstance(value, str):
                kind = types[key]
                value = {"float": float, "int": int, "str": str}[kind](value)
            changes[key] = value
        return dataclasses.replace(self, **changes)


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` pairs; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    return config.lr * config.gamma ** (iteration // config.step)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list[np.ndarray]:
    """Plain gradient descent update ``p - lr * g`` for every parameter."""
    out = []
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ConfigurationError(f"parameter shape {p.shape} != gradient shape {g.shape}")
        out.append(p - lr * g)
    return out


@dataclass
class TrainResult:
    params: Params
    log: list[dict] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [row["total"] for row in self.log]


def model_config(config: TrainConfig, num_classes: int, backbone: BackboneConfig | None = None) -> ModelConfig:
    return ModelConfig(
        backbone=backbone or BackboneConfig(),
        num_classes=num_classes,
        parts=config.parts,
        part_mode=config.part_mode,
        part_loss=config.part_loss,
        classifier=config.classifier,
        threshold=config.threshold,
    )


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Indices drawn from a fresh shuffle each epoch, batches spanning epochs."""
    pending = np.empty(0, dtype=int)
    while True:
        while len(pending) < batch_size:
            pending = np.concatenate([pending, rng.permutation(n)])
        yield pending[:batch_size]
        pending = pending[batch_size:]


def batch_loss(params: Params, images: np.ndarray, classes: np.ndarray, part_weight: float) -> tuple[T.Node, np.ndarray]:
    """Mean joint loss over a batch and the per-component batch means."""
    xb = forward_backbone(images, params)
    totals, parts = [], []
    for i, label in enumerate(classes):
        x = T.take(xb, i)
        boxes = part_boxes(x.value, params.config)
        total, components = sample_losses(x, int(label), params, boxes, part_weight)
        totals.append(total)
        parts.append([c.item() for c in components])
    loss = T.scale(T.add_all(totals), 1.0 / len(totals))
    return loss, np.mean(np.array(parts), axis=0)


def _dump_batch(directory: Path, iteration: int, images: np.ndarray, classes: np.ndarray) -> Path:
    target = directory / f"nonfinite-{iteration}"
    target.mkdir(parents=True, exist_ok=True)
    T.save_pltn(target / "images.pltn", images)
    T.save_pltn(target / "labels.pltn", classes.astype(np.float32))
    return target


def train(
    images: np.ndarray,
    identities: Sequence[int],
    config: TrainConfig,
    backbone: BackboneConfig | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Fit a part-loss network to `images` labelled by `identities`.

    Parts are regenerated from the current feature maps at every iteration.
    With `out_dir`, the loss log goes to ``loss.csv`` and checkpoints to
    ``checkpoint`` (final) and ``checkpoint-<iter>`` (every
    ``checkpoint_interval`` iterations).
    """
    config.validate()
    classes_seen = sorted(set(int(i) for i in identities))
    if len(classes_seen) < 2:
        raise ConfigurationError("training needs at least 2 identities")
    index = {ident: c for c, ident in enumerate(classes_seen)}
    classes = np.array([index[int(i)] for i in identities])
    dtype = np.dtype(config.dtype)
    images = np.asarray(images, dtype=dtype)
    if not np.isfinite(images).all():
        raise InputError("training images contain non-finite values")

    params = init_params(model_config(config, len(classes_seen), backbone), config.seed, dtype)
    nodes = params.nodes()
    velocity = [np.zeros_like(n.value) for n in nodes]
    rng = np.random.default_rng(config.seed + 1)
    draw = batches(len(images), min(config.batch_size, len(images)), rng)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    n_components = 1 + len(params.part_heads)
    result = TrainResult(params)
    for it in range(config.max_iter):
        idx = next(draw)
        lr = lr_schedule(it, config)
        loss, components = batch_loss(params, images[idx], classes[idx], config.part_weight)
        value = loss.item()
        if not math.isfinite(value):
            where = _dump_batch(out, it, images[idx], classes[idx]) if out is not None else None
            raise TrainingError(f"non-finite loss {value} at iteration {it}" + (f"; batch dumped to {where}" if where else ""))
        params.zero_grad()
        T.backward(loss)
        grads = [n.grad for n in nodes]
        if config.weight_decay:
            grads = [g + config.weight_decay * n.value for g, n in zip(grads, nodes)]
        if config.momentum:
            velocity = [config.momentum * v + g for v, g in zip(velocity, grads)]
            grads = velocity
        for node, value_new in zip(nodes, sgd_step([n.value for n in nodes], grads, lr)):
            node.value = value_new.astype(dtype, copy=False)
        params.zero_grad()

        row = {"iter": it, "lr": lr, "global_loss": float(components[0])}
        for j in range(1, n_components):
            row[f"part_loss_{j}"] = float(components[j])
        row["total"] = value
        result.log.append(row)
        logger.debug("iter %d lr %.6g loss %.6f", it, lr, value)
        if out is not None and config.checkpoint_interval and (it + 1) % config.checkpoint_interval == 0:
            save_checkpoint(params, out / f"checkpoint-{it + 1}")

    if out is not None:
        write_loss_log(out / "loss.csv", result.log, n_components - 1)
        save_checkpoint(params, out / "checkpoint")
    return result


def write_loss_log(path: str | Path, log: list[dict], parts: int) -> None:
    header = ["iter", "lr", "global_loss", *[f"part_loss_{j}" for j in range(1, parts + 1)], "total"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in log:
            writer.writerow([row["iter"], repr(row["lr"]), *(repr(row[h]) for h in header[2:])])
