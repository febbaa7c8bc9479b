"""Global, part and concatenated descriptors from trained feature maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .dataio import Record
from .errors import ConfigurationError
from .network import ROI_SIZE, Head, Params, forward_backbone, part_boxes
from .partgen import roi_pool


@dataclass(frozen=True)
class Descriptor:
    kind: str  # "global", "part" or "final"
    values: np.ndarray
    part: int | None = None

    @property
    def dim(self) -> int:
        return len(self.values)


def global_descriptor(x: np.ndarray) -> Descriptor:
    """Per-channel spatial mean of Z×H×W feature maps."""
    return Descriptor("global", np.asarray(x).mean(axis=(1, 2)))


def part_descriptor(x_part: np.ndarray, k: int | None = None) -> Descriptor:
    return Descriptor("part", np.asarray(x_part).mean(axis=(1, 2)), k)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def inference_params(params: Params) -> Params:
    """Same values, no gradient tracking."""

    def frozen(head: Head) -> Head:
        return Head(T.Node(head.kernel.value), T.Node(head.bias.value))

    return Params(
        params.config,
        [frozen(h) for h in params.backbone],
        frozen(params.global_head),
        [frozen(h) for h in params.part_heads],
    )


@dataclass
class FeatureSet:
    """Descriptors for a list of images, one row per image."""

    global_: np.ndarray  # N×Z
    parts: np.ndarray  # N×K×Z

    @property
    def final(self) -> np.ndarray:
        n = len(self.global_)
        return np.concatenate([self.global_, self.parts.reshape(n, -1)], axis=1)

    def part(self, k: int) -> np.ndarray:
        return self.parts[:, k]


def extract(images: np.ndarray, params: Params, batch_size: int = 32) -> FeatureSet:
    frozen = inference_params(params)
    dtype = params.global_head.kernel.dtype
    z = params.config.backbone.z
    k = params.config.parts
    globals_, parts = [], []
    for start in range(0, len(images), batch_size):
        xb = forward_backbone(np.asarray(images[start : start + batch_size], dtype=dtype), frozen).value
        for x in xb:
            globals_.append(global_descriptor(x).values)
            boxes = part_boxes(x, params.config)
            node = T.Node(x)
            parts.append([part_descriptor(roi_pool(node, b, ROI_SIZE).value, b.index).values for b in boxes])
    n = len(globals_)
    return FeatureSet(
        np.array(globals_, dtype=np.float64).reshape(n, z),
        np.array(parts, dtype=np.float64).reshape(n, k, z),
    )


def final_descriptor(image: np.ndarray, params: Params, k: int | None = None, normalize: bool = False) -> Descriptor:
    """[global, part_1, ..., part_K] for one image; dimension (K+1)·Z."""
    if k is not None and k != params.config.parts:
        raise ConfigurationError(f"checkpoint was trained with K={params.config.parts}, asked for K={k}")
    values = extract(np.asarray(image)[None], params).final[0]
    return Descriptor("final", l2_normalize(values) if normalize else values)


def distance(a, b, metric: str = "euclidean") -> float:
    av = a.values if isinstance(a, Descriptor) else np.asarray(a, dtype=float)
    bv = b.values if isinstance(b, Descriptor) else np.asarray(b, dtype=float)
    if isinstance(a, Descriptor) and isinstance(b, Descriptor) and a.kind != b.kind:
        raise ConfigurationError(f"cannot compare {a.kind} and {b.kind} descriptors")
    if av.shape != bv.shape:
        raise ConfigurationError(f"descriptor dimensions differ: {av.shape} vs {bv.shape}")
    if metric == "euclidean":
        return float(np.sqrt(np.sum((av - bv) ** 2)))
    if metric == "cosine":
        na, nb = np.linalg.norm(av), np.linalg.norm(bv)
        if na == 0 or nb == 0:
            return 1.0
        return float(1.0 - av @ bv / (na * nb))
    raise ConfigurationError(f"unknown metric {metric!r}")


def distance_matrix(queries: np.ndarray, gallery: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    q = np.asarray(queries, dtype=float)
    g = np.asarray(gallery, dtype=float)
    if metric == "euclidean":
        return np.sqrt(np.maximum(((q[:, None, :] - g[None, :, :]) ** 2).sum(-1), 0.0))
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        sim = (q @ g.T) / np.where(qn * gn.T == 0, 1.0, qn * gn.T)
        return np.where((qn == 0) | (gn.T == 0), 1.0, 1.0 - sim)
    raise ConfigurationError(f"unknown metric {metric!r}")


def save_descriptors(path: str | Path, matrix: np.ndarray, records: Sequence[Record]) -> Path:
    """PLTN matrix plus a ``<path>.txt`` sidecar: ``row_index image_id identity camera``."""
    path = Path(path)
    T.save_pltn(path, np.asarray(matrix))
    sidecar = path.with_suffix(path.suffix + ".txt")
    lines = [f"{i} {Path(r.path).name} {r.identity} {r.camera}" for i, r in enumerate(records)]
    sidecar.write_text("\n".join(lines) + "\n")
    return sidecar


def load_descriptors(path: str | Path) -> tuple[np.ndarray, list[tuple[str, int, int]]]:
    path = Path(path)
    matrix = T.load_pltn(path)
    rows = []
    for line in path.with_suffix(path.suffix + ".txt").read_text().splitlines():
        if line.strip():
            _, image_id, identity, camera = line.split()
            rows.append((image_id, int(identity), int(camera)))
    if len(rows) != len(matrix):
        raise ConfigurationError(f"{path}: sidecar has {len(rows)} rows, matrix has {len(matrix)}")
    return matrix, rows
