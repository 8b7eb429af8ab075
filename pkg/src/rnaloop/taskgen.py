"""Procedural desk-scale tasks with exact ground truth.

Scenes are stacks of rectangles and disks over a constant background.
Depth ordering follows the painter's algorithm: shapes are rendered far
to near, so the nearest shape owns every pixel it covers. Rendered
intensity is shaded albedo, which makes depth approximately (but not
exactly) invertible from the image; depth is normalized to [0,1] with
background fixed at 1.0 (far).

Classification images are jittered noisy renderings of K fixed prototype
patterns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import autodiff as ad
from . import serialize
from .errors import ConfigurationError, TrainingError
from .nets import Model

_STREAM_SCENE = 101
_STREAM_LABELS = 102
_STREAM_TRAIN = 103

SEG_COMBOS = [
    ("rectangle", "plain"),
    ("disk", "plain"),
    ("rectangle", "striped"),
    ("disk", "striped"),
]


@dataclass(frozen=True)
class SceneWorldConfig:
    grid: int = 32
    shapes_per_scene: tuple[int, int] = (1, 4)
    kinds: tuple[str, ...] = ("rectangle", "disk")
    textures: tuple[str, ...] = ("plain",)
    half_size_range: tuple[float, float] = (3.0, 9.0)
    albedo_range: tuple[float, float] = (0.45, 0.95)
    depth_range: tuple[float, float] = (0.05, 0.90)
    background_albedo: float = 0.35
    background_depth: float | None = 1.0
    shade: float = 0.6
    stripe_factor: float = 0.55
    stripe_period: int = 2

    def with_overrides(self, **kwargs) -> "SceneWorldConfig":
        return replace(self, **kwargs)


@dataclass
class Shape:
    kind: str
    texture: str
    cx: float
    cy: float
    hw: float
    hh: float
    depth: float
    albedo: float
    seg_class: int = 0


@dataclass
class Dataset:
    task_kind: str
    inputs: np.ndarray  # [N,C,H,W], values in [0,1]
    targets: np.ndarray  # dense [N,1,H,W] in [0,1], labels [N,H,W], or classes [N]
    seed: int
    split: str = "train"
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


def sample_scene(config: SceneWorldConfig, rng: np.random.Generator) -> list[Shape]:
    lo, hi = config.shapes_per_scene
    count = int(rng.integers(lo, hi + 1))
    shapes = []
    for _ in range(count):
        kind = config.kinds[int(rng.integers(len(config.kinds)))]
        texture = config.textures[int(rng.integers(len(config.textures)))]
        shapes.append(
            Shape(
                kind=kind,
                texture=texture,
                cx=float(rng.uniform(0, config.grid - 1)),
                cy=float(rng.uniform(0, config.grid - 1)),
                hw=float(rng.uniform(*config.half_size_range)),
                hh=float(rng.uniform(*config.half_size_range)),
                depth=float(rng.uniform(*config.depth_range)),
                albedo=float(rng.uniform(*config.albedo_range)),
                seg_class=SEG_COMBOS.index((kind, texture)) + 1
                if (kind, texture) in SEG_COMBOS
                else 0,
            )
        )
    return shapes


def _coverage(shape: Shape, grid: int) -> np.ndarray:
    ys, xs = np.mgrid[0:grid, 0:grid]
    if shape.kind == "rectangle":
        return (np.abs(xs - shape.cx) <= shape.hw) & (np.abs(ys - shape.cy) <= shape.hh)
    if shape.kind == "disk":
        return (xs - shape.cx) ** 2 + (ys - shape.cy) ** 2 <= shape.hw**2
    raise ConfigurationError(f"unknown shape kind {shape.kind!r}")


def _shape_intensity(config: SceneWorldConfig, shape: Shape, grid: int) -> np.ndarray:
    base = shape.albedo * (1.0 - config.shade * shape.depth)
    img = np.full((grid, grid), base)
    if shape.texture == "striped":
        _, xs = np.mgrid[0:grid, 0:grid]
        stripe = (xs // config.stripe_period) % 2 == 1
        img[stripe] *= config.stripe_factor
    return img


def render_scene(
    config: SceneWorldConfig, shapes: list[Shape]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rasterize a scene: (intensity image, depth map, class map)."""
    g = config.grid
    if config.background_depth is None:
        raise ConfigurationError("scene has no background depth rule")
    depth = np.full((g, g), float(config.background_depth))
    image = np.full((g, g), config.background_albedo * (1.0 - config.shade * config.background_depth))
    classes = np.zeros((g, g), dtype=np.int64)
    for shape in sorted(shapes, key=lambda s: -s.depth):  # far first, near wins
        cover = _coverage(shape, g)
        depth[cover] = shape.depth
        image[cover] = _shape_intensity(config, shape, g)[cover]
        classes[cover] = shape.seg_class
    return np.clip(image, 0.0, 1.0), depth, classes


def gen_dense_regression(config: SceneWorldConfig, n: int, seed: int) -> Dataset:
    """Depth-from-intensity scenes; target is the normalized depth map."""
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if config.shapes_per_scene[0] == 0 and config.background_depth is None:
        raise ConfigurationError("empty scenes possible but no background depth defined")
    rng = _rng(seed, _STREAM_SCENE)
    inputs = np.empty((n, 1, config.grid, config.grid))
    targets = np.empty((n, 1, config.grid, config.grid))
    for i in range(n):
        img, depth, _ = render_scene(config, sample_scene(config, rng))
        inputs[i, 0] = img
        targets[i, 0] = depth
    return Dataset("dense_regression", inputs, targets, seed)


def gen_dense_segmentation(config: SceneWorldConfig, n: int, K: int, seed: int) -> Dataset:
    """Shape kind+texture decides the class; background is class 0."""
    if K < 2:
        raise ConfigurationError("segmentation needs K >= 2")
    combos = [c for c in SEG_COMBOS if c[0] in config.kinds and c[1] in config.textures]
    if K - 1 > len(combos):
        raise ConfigurationError(
            f"K={K} exceeds available kind-texture combinations ({len(combos)} + background)"
        )
    rng = _rng(seed, _STREAM_SCENE)
    inputs = np.empty((n, 1, config.grid, config.grid))
    targets = np.empty((n, config.grid, config.grid), dtype=np.int64)
    for i in range(n):
        shapes = sample_scene(config, rng)
        shapes = [s for s in shapes if 1 <= s.seg_class <= K - 1]
        img, _, classes = render_scene(config, shapes)
        inputs[i, 0] = img
        targets[i] = classes
    return Dataset("dense_segmentation", inputs, targets, seed, extra={"num_classes": K})


def make_prototypes(K: int, proto_seed: int, grid: int = 16) -> np.ndarray:
    """K smooth random patterns in [0.1, 0.9], upsampled from a 4x4 field."""
    rng = _rng(proto_seed, _STREAM_SCENE)
    protos = np.empty((K, grid, grid))
    cell = grid // 4
    for k in range(K):
        coarse = rng.random((4, 4))
        field_ = np.kron(coarse, np.ones((cell, cell)))
        lo, hi = field_.min(), field_.max()
        protos[k] = 0.1 + 0.8 * (field_ - lo) / max(hi - lo, 1e-9)
    return protos


def gen_classification(
    K: int,
    n: int,
    proto_seed: int,
    seed: int,
    grid: int = 16,
    jitter: int = 2,
    noise_sigma: float = 0.05,
) -> Dataset:
    """Jittered noisy renderings of K prototype patterns, labels balanced."""
    if K < 2:
        raise ConfigurationError("classification needs K >= 2")
    protos = make_prototypes(K, proto_seed, grid)
    labels = np.tile(np.arange(K), n // K + 1)[:n]
    rng = _rng(seed, _STREAM_LABELS)
    rng.shuffle(labels)
    inputs = np.empty((n, 1, grid, grid))
    for i, y in enumerate(labels):
        img = protos[y]
        if jitter > 0:
            img = np.roll(
                img,
                (int(rng.integers(-jitter, jitter + 1)), int(rng.integers(-jitter, jitter + 1))),
                axis=(0, 1),
            )
        if noise_sigma > 0:
            img = img + rng.normal(0.0, noise_sigma, size=img.shape)
        inputs[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(
        "classification",
        inputs,
        labels.astype(np.int64),
        seed,
        extra={"num_classes": K, "prototypes": protos, "proto_seed": proto_seed},
    )


# ---------------------------------------------------------------------------
# supervised training of the main network
# ---------------------------------------------------------------------------


def task_loss(task_kind: str, pred: ad.Tensor, targets) -> ad.Tensor:
    if task_kind == "dense_regression":
        return ad.mean_l1(pred, targets)
    if task_kind == "dense_segmentation":
        full = np.ones(targets.shape)
        return ad.masked_cross_entropy(pred, targets, full)
    if task_kind == "classification":
        return ad.softmax_cross_entropy(pred, targets)
    raise ConfigurationError(f"unknown task kind {task_kind!r}")


def train_main(
    model: Model,
    dataset: Dataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 8,
) -> tuple[Model, list[float]]:
    """Minibatch SGD on the task loss; returns the model and per-epoch means."""
    if dataset.task_kind != model.spec.task_kind:
        raise ConfigurationError(
            f"dataset task {dataset.task_kind!r} != model task {model.spec.task_kind!r}"
        )
    rng = _rng(seed, _STREAM_TRAIN)
    n = len(dataset)
    curve: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = dataset.inputs[idx]
            yb = dataset.targets[idx]
            with ad.Tape() as tape:
                lifted = model.params.lift(tape)
                pred = model.forward(xb, lifted=lifted)
                loss = task_loss(dataset.task_kind, pred, yb)
                ad.backward(loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"training diverged at epoch {epoch} (lr={lr}): loss={value}"
                )
            losses.append(value)
            ad.sgd_step(model.params, model.params.grads_from(tape, lifted), lr)
        curve.append(float(np.mean(losses)))
    return model, curve


def eval_task_error(model: Model, dataset: Dataset, batch_size: int = 32) -> float:
    """Mean task metric over a dataset (L1 / top-1 error / pixel CE error)."""
    from .harness import metrics

    errs = []
    for start in range(0, len(dataset), batch_size):
        xb = dataset.inputs[start : start + batch_size]
        yb = dataset.targets[start : start + batch_size]
        pred = model.forward(xb).array
        errs.append(metrics(pred, yb, dataset.task_kind))
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_dataset(path, dataset: Dataset, meta: dict | None = None) -> None:
    info = {
        "task_kind": dataset.task_kind,
        "seed": dataset.seed,
        "split": dataset.split,
        "scalars": {k: v for k, v in dataset.extra.items() if not isinstance(v, np.ndarray)},
    }
    info.update(meta or {})
    arrays = {"inputs": dataset.inputs, "targets": dataset.targets}
    for k, v in dataset.extra.items():
        if isinstance(v, np.ndarray):
            arrays[f"extra.{k}"] = v
    serialize.save(path, "dataset", info, arrays)


def load_dataset(path) -> tuple[Dataset, dict]:
    _, meta, arrays = serialize.load(path, expect_kind="dataset")
    extra = dict(meta.get("scalars", {}))
    for k, v in arrays.items():
        if k.startswith("extra."):
            extra[k[len("extra.") :]] = v
    ds = Dataset(
        meta["task_kind"],
        arrays["inputs"],
        arrays["targets"],
        meta["seed"],
        meta.get("split", "train"),
        extra,
    )
    return ds, meta
