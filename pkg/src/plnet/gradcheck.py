"""Central finite-difference checks for every differentiable operation.

Each case draws a random float64 instance, computes analytic gradients with
:func:`plnet.tensor.backward`, and compares them to central differences of
the same scalar function. Instances whose inputs sit within a small margin
of a kink (ReLU at zero, near-ties inside max windows) are redrawn, since
central differences are meaningless across a kink.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .partgen import PartBox, bin_edges, generate_parts, roi_pool
from .tensor import Node

EPS = 1e-5
KINK_MARGIN = 1e-3
DENOMINATOR_FLOOR = 1e-6


def numeric_gradient(f: Callable[[], float], array: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of `f` with respect to `array`, perturbed in place."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max norms."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), DENOMINATOR_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(build: Callable[[dict[str, Node]], Node], inputs: dict[str, np.ndarray]) -> float:
    """Worst relative error over all `inputs` of the scalar graph `build`."""
    nodes = {k: Node(v, True) for k, v in inputs.items()}
    T.backward(build(nodes))
    worst = 0.0
    for name, array in inputs.items():
        work = {k: v.copy() for k, v in inputs.items()}

        def f():
            return build({k: Node(v) for k, v in work.items()}).item()

        numeric = numeric_gradient(f, work[name])
        worst = max(worst, relative_error(nodes[name].grad, numeric))
    return worst


def _weighted_sum(out: Node, weights: np.ndarray) -> Node:
    return T.total(T.mul(out, Node(weights)))


def _spaced(rng: np.random.Generator, shape) -> np.ndarray:
    """Random values whose pairwise gaps are at least 0.01 (no near-ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - 0.005 * n + rng.uniform(0, 1e-3, n)).reshape(shape)


def _min_window_gap(x: np.ndarray, window: int, stride: int) -> float:
    win = sliding_window_view(x, (window, window), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    flat = np.sort(win.reshape(*win.shape[:-2], -1), axis=-1)
    top, second = flat[..., -1], flat[..., -2]
    gap = np.where(top > 0, top - second, np.inf)  # all-zero windows are flat, not kinks
    return float(gap.min())


def _min_roi_gap(x: np.ndarray, box: PartBox) -> float:
    gaps = []
    for r0, r1 in bin_edges(box.top, box.height, 4):
        for c0, c1 in bin_edges(box.left, box.width, 4):
            region = np.sort(x[:, r0:r1, c0:c1].reshape(x.shape[0], -1), axis=1)
            if region.shape[1] > 1:
                gaps.append(np.where(region[:, -1] > 0, region[:, -1] - region[:, -2], np.inf).min())
    return float(min(gaps, default=np.inf))


# -- cases ---------------------------------------------------------------------

def case_conv2d(rng):
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2)) if k == 3 else 0
    if k == 1:
        stride = 1
    x, kern, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
    ho = (5 + 2 * pad - k) // stride + 1
    w = rng.normal(size=(3, ho, ho))
    return lambda n: _weighted_sum(T.conv2d(n["x"], n["k"], n["b"], stride, pad), w), {"x": x, "k": kern, "b": b}


def case_conv2d_batch(rng):
    x, kern, b = rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    w = rng.normal(size=(2, 2, 4, 4))
    return lambda n: _weighted_sum(T.conv2d(n["x"], n["k"], n["b"], 1, 1), w), {"x": x, "k": kern, "b": b}


def case_relu(rng):
    x = rng.normal(size=(3, 4, 4))
    x = np.where(np.abs(x) < 1e-4, 1e-4 * np.sign(x + 1e-12) + x, x)
    w = rng.normal(size=x.shape)
    return lambda n: _weighted_sum(T.relu(n["x"]), w), {"x": x}


def case_max_pool2d(rng):
    window, stride = 2, int(rng.integers(1, 3))
    x = _spaced(rng, (2, 6, 6))
    ho = (6 - window) // stride + 1
    w = rng.normal(size=(2, ho, ho))
    return lambda n: _weighted_sum(T.max_pool2d(n["x"], window, stride), w), {"x": x}


def case_softmax_cross_entropy(rng):
    logits, label = rng.normal(size=5) * 3, int(rng.integers(0, 5))
    return lambda n: T.softmax_cross_entropy(n["y"], label), {"y": logits}


def case_plumbing(rng):
    """spatial_mean, concat, take, add, add_all, mul and scale in one graph."""
    a, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    w, w_row = rng.normal(size=4), rng.normal(size=(3, 3))

    def build(n):
        joined = T.concat([T.add(n["a"], T.scale(n["b"], 0.5)), T.mul(n["a"], n["b"])], axis=0)
        row = T.take(joined, 3)
        return T.add_all([_weighted_sum(T.spatial_mean(joined), w), _weighted_sum(row, w_row), T.total(n["a"])])

    return build, {"a": a, "b": b}


def case_roi_pool(rng):
    x = _spaced(rng, (2, 6, 5))
    top, bottom = sorted(rng.integers(0, 6, size=2))
    left, right = sorted(rng.integers(0, 5, size=2))
    box = PartBox(0, int(top), int(bottom), int(left), int(right))
    w = rng.normal(size=(2, 4, 4))
    return lambda n: _weighted_sum(roi_pool(n["x"], box), w), {"x": x}


E2E_CLASSES = 3
E2E_PARTS = 2


def _e2e_forward(n: dict[str, Node], boxes=None):
    """conv-relu-pool-conv-relu backbone, GAP global head and two RoI part heads.

    Without `boxes`, parts are generated from the feature maps and the
    smallest distance to a kink is returned alongside the loss.
    """
    probe = boxes is None
    margins = []
    pre1 = T.conv2d(n["image"], n["k1"], n["b1"], 1, 1)
    h1 = T.relu(pre1)
    p1 = T.max_pool2d(h1, 2, 2)
    pre2 = T.conv2d(p1, n["k2"], n["b2"], 1, 1)
    x = T.relu(pre2)
    if probe:
        boxes = generate_parts(x.value, E2E_PARTS)
        margins = [np.abs(pre1.value).min(), _min_window_gap(h1.value, 2, 2), np.abs(pre2.value).min()]
        margins += [_min_roi_gap(x.value, box) for box in boxes]
    lg = T.softmax_cross_entropy(T.spatial_mean(T.conv2d(x, n["gk"], n["gb"])), 1)
    parts = [
        T.softmax_cross_entropy(T.spatial_mean(T.conv2d(roi_pool(x, box), n[f"pk{j}"], n[f"pb{j}"])), 1)
        for j, box in enumerate(boxes)
    ]
    loss = T.add(lg, T.scale(T.add_all(parts), 1.0 / len(parts)))
    return loss, boxes, min(margins, default=np.inf)


def case_end_to_end(rng):
    inputs = {
        "image": rng.uniform(0, 1, size=(3, 6, 6)),
        "k1": rng.normal(size=(3, 3, 3, 3)) * 0.5,
        "b1": rng.normal(size=3) * 0.1,
        "k2": rng.normal(size=(4, 3, 3, 3)) * 0.5,
        "b2": rng.normal(size=4) * 0.1,
        "gk": rng.normal(size=(E2E_CLASSES, 4, 1, 1)),
        "gb": rng.normal(size=E2E_CLASSES) * 0.1,
    }
    for j in range(E2E_PARTS):
        inputs[f"pk{j}"] = rng.normal(size=(E2E_CLASSES, 4, 1, 1))
        inputs[f"pb{j}"] = rng.normal(size=E2E_CLASSES) * 0.1
    _, boxes, margin = _e2e_forward({k: Node(v) for k, v in inputs.items()})
    if margin < KINK_MARGIN:
        return None
    return (lambda n: _e2e_forward(n, boxes)[0]), inputs


CASES = {
    "conv2d": case_conv2d,
    "conv2d_batch": case_conv2d_batch,
    "relu": case_relu,
    "max_pool2d": case_max_pool2d,
    "softmax_cross_entropy": case_softmax_cross_entropy,
    "plumbing": case_plumbing,
    "roi_pool": case_roi_pool,
    "end_to_end": case_end_to_end,
}


@dataclass
class CaseReport:
    name: str
    instances: int
    max_error: float
    seconds: float


def run_case(name: str, rng: np.random.Generator, instances: int = 100) -> CaseReport:
    make = CASES[name]
    start = time.perf_counter()
    worst, done = 0.0, 0
    while done < instances:
        drawn = make(rng)
        if drawn is None:
            continue
        build, inputs = drawn
        worst = max(worst, check(build, inputs))
        done += 1
    return CaseReport(name, instances, worst, time.perf_counter() - start)


def run_suite(seed: int = 0, instances: int = 100) -> list[CaseReport]:
    rng = np.random.default_rng(seed)
    return [run_case(name, rng, instances) for name in CASES]
