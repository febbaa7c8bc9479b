"""Paired training runs comparing part-loss variants on a shared seed."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataio import Dataset
from .descriptor import FeatureSet, extract
from .errors import ConfigurationError
from .evaluation import Scores, format_csv, format_table, retrieve, score
from .network import BackboneConfig, Params
from .trainer import TrainConfig, TrainResult, train

# preset -> (descriptor compared, [(row label, config overrides), ...])
PRESETS: dict[str, tuple[str, list[tuple[str, dict]]]] = {
    "sweep-k": ("global", [(f"K={k}", {"parts": k}) for k in (0, 2, 4, 8)]),
    "generated-vs-grid": (
        "final",
        [("generated parts", {"part_mode": "generated"}), ("grid parts", {"part_mode": "grid"})],
    ),
    "with-vs-without-partloss": (
        "parts",
        [("with part loss", {"part_weight": 1.0}), ("without part loss", {"part_weight": 0.0})],
    ),
    "concat-vs-separate": (
        "final",
        [("part loss", {"part_loss": "separate"}), ("concat", {"part_loss": "concat"})],
    ),
}


def evaluate_features(query: FeatureSet, gallery: FeatureSet, q_records, g_records, metric: str = "euclidean") -> dict[str, Scores]:
    """Scores of every descriptor kind: global, final, part-k and the part mean."""
    args = (
        [r.identity for r in q_records],
        [r.identity for r in g_records],
        [r.camera for r in q_records],
        [r.camera for r in g_records],
    )
    out = {
        "global": score(retrieve(query.global_, gallery.global_, *args, metric=metric)),
        "final": score(retrieve(query.final, gallery.final, *args, metric=metric)),
    }
    parts = [score(retrieve(query.part(k), gallery.part(k), *args, metric=metric)) for k in range(query.parts.shape[1])]
    for k, s in enumerate(parts, 1):
        out[f"part-{k}"] = s
    if parts:
        out["parts"] = Scores(*(float(np.mean([getattr(s, f) for s in parts])) for f in ("map", "rank1", "rank5", "rank10")))
    return out


def evaluate_params(params: Params, dataset: Dataset, metric: str = "euclidean") -> dict[str, Scores]:
    q_img, q_rec = dataset.select("query")
    g_img, g_rec = dataset.select("gallery")
    return evaluate_features(extract(q_img, params), extract(g_img, params), q_rec, g_rec, metric)


@dataclass
class Run:
    label: str
    seed: int
    config: TrainConfig
    result: TrainResult
    scores: dict[str, Scores]


@dataclass
class AblationReport:
    preset: str
    kind: str
    labels: list[str]
    runs: list[Run] = field(default_factory=list)

    def scores(self, label: str, kind: str | None = None) -> list[Scores]:
        kind = kind or self.kind
        return [r.scores[kind] for r in self.runs if r.label == label]

    def rows(self) -> list[list]:
        out = []
        for label in self.labels:
            s = self.scores(label)
            out.append([label, *(float(np.mean([getattr(x, f) for x in s])) for f in ("map", "rank1", "rank5", "rank10"))])
        return out

    def win_rate(self, first: str, second: str, kind: str | None = None) -> float:
        a = [s.map for s in self.scores(first, kind)]
        b = [s.map for s in self.scores(second, kind)]
        return float(np.mean([x > y for x, y in zip(a, b)]))

    def table(self) -> str:
        return format_table(self.rows())

    def csv(self) -> str:
        return format_csv(self.rows())


def run_ablation(
    preset: str,
    dataset: Dataset | Sequence[Dataset],
    base: TrainConfig,
    seeds: Sequence[int] = (0,),
    backbone: BackboneConfig | None = None,
    metric: str = "euclidean",
    threads: int = 1,
    only: Sequence[str] | None = None,
) -> AblationReport:
    """Train and evaluate each configuration of `preset` once per seed.

    `dataset` may be one dataset shared by all seeds or one per seed. Rows
    of the report average the preset's descriptor kind over seeds. With
    ``threads > 1`` runs execute concurrently; each run is self-contained,
    so the report does not depend on the thread count. `only` restricts
    the run to the named rows of the preset.
    """
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    kind, variants = PRESETS[preset]
    if only is not None:
        unknown = set(only) - {label for label, _ in variants}
        if unknown:
            raise ConfigurationError(f"preset {preset!r} has no rows {sorted(unknown)}")
        variants = [(label, overrides) for label, overrides in variants if label in only]
    datasets = list(dataset) if isinstance(dataset, (list, tuple)) else [dataset] * len(seeds)
    if len(datasets) != len(seeds):
        raise ConfigurationError("need one dataset per seed")
    if threads < 1:
        raise ConfigurationError("threads must be >= 1")
    report = AblationReport(preset, kind, [label for label, _ in variants])

    def one(job: tuple[int, Dataset, str, dict]) -> Run:
        seed, data, label, overrides = job
        images, records = data.select("train")
        config = dataclasses.replace(base, seed=seed, **overrides)
        result = train(images, [r.identity for r in records], config, backbone)
        return Run(label, seed, config, result, evaluate_params(result.params, data, metric))

    jobs = [(seed, data, label, overrides) for seed, data in zip(seeds, datasets) for label, overrides in variants]
    if threads == 1:
        report.runs = [one(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            report.runs = list(pool.map(one, jobs))
    return report
