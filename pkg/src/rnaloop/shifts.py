"""Synthetic test-time distribution shifts (corruption kind x severity).

Severity indexes fixed, documented parameter tables; every table is
strictly monotone in effect strength. Shifts apply to inputs only and
never touch targets or signals derived from targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .taskgen import Dataset, SceneWorldConfig, gen_dense_regression, gen_dense_segmentation

KINDS = ("identity", "gaussian_noise", "blur", "pixelate", "contrast")

SEVERITY_TABLES: dict[str, list[float]] = {
    # additive noise standard deviation
    "gaussian_noise": [0.04, 0.08, 0.13, 0.19, 0.26],
    # gaussian blur sigma; kernel radius is ceil(3*sigma)
    "blur": [0.6, 0.9, 1.3, 1.8, 2.5],
    # block edge length for local averaging
    "pixelate": [2, 3, 4, 6, 8],
    # contrast retention factor (smaller = stronger shift)
    "contrast": [0.75, 0.60, 0.45, 0.33, 0.22],
}


@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    severity: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown shift kind {self.kind!r}")
        if self.kind != "identity" and not (1 <= self.severity <= 5):
            raise ConfigurationError(f"severity {self.severity} outside 1..5")


def severity_tables() -> dict[str, list[float]]:
    """The committed severity parameter tables (copy; JSON-serializable)."""
    return {k: list(v) for k, v in SEVERITY_TABLES.items()}


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pads = [(0, 0)] * x.ndim
    pads[axis] = (r, r)
    xp = np.pad(x, pads, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(xp, len(kernel), axis=axis)
    return np.tensordot(win, kernel, axes=([-1], [0]))


def _pixelate(x: np.ndarray, block: int) -> np.ndarray:
    h, w = x.shape[-2:]
    hi = np.arange(0, h, block)
    wi = np.arange(0, w, block)
    sums = np.add.reduceat(np.add.reduceat(x, hi, axis=-2), wi, axis=-1)
    hlen = np.minimum(hi + block, h) - hi
    wlen = np.minimum(wi + block, w) - wi
    means = sums / (hlen[:, None] * wlen[None, :])
    return means.repeat(hlen, axis=-2).repeat(wlen, axis=-1)


def apply_shift(x: np.ndarray, spec: ShiftSpec) -> np.ndarray:
    """Corrupt an input in [0,1]; output is clipped back to [0,1].

    Identity returns a bit-exact copy. Randomized kinds are deterministic
    under spec.seed.
    """
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "identity":
        return x.copy()
    level = SEVERITY_TABLES[spec.kind][spec.severity - 1]
    if spec.kind == "gaussian_noise":
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7001, spec.severity]))
        out = x + rng.normal(0.0, level, size=x.shape)
    elif spec.kind == "blur":
        kernel = _gaussian_kernel(level)
        out = _blur_axis(_blur_axis(x, kernel, x.ndim - 2), kernel, x.ndim - 1)
    elif spec.kind == "pixelate":
        out = _pixelate(x, int(level))
    elif spec.kind == "contrast":
        mean = x.mean(axis=(-2, -1), keepdims=True)
        out = mean + (x - mean) * level
    else:
        raise ConfigurationError(f"unknown shift kind {spec.kind!r}")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# cross-distribution (generator A -> generator B) evaluation pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    task_kind: str
    scene: SceneWorldConfig
    num_classes: int | None = None


def shifted_world(base: SceneWorldConfig) -> SceneWorldConfig:
    """A systematically different scene distribution (cross-dataset stand-in)."""
    return base.with_overrides(
        half_size_range=(6.0, 13.0),
        albedo_range=(0.30, 0.75),
        shapes_per_scene=(2, 6),
    )


def cross_distribution(
    config_a: DataConfig,
    config_b: DataConfig,
    n_train: int,
    n_test: int,
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Train split from generator A, evaluation split from generator B."""
    if config_a.task_kind != config_b.task_kind:
        raise ConfigurationError(
            f"task kinds differ: {config_a.task_kind!r} vs {config_b.task_kind!r}"
        )
    if config_a.task_kind == "dense_regression":
        train = gen_dense_regression(config_a.scene, n_train, seed)
        test = gen_dense_regression(config_b.scene, n_test, seed + 1)
    elif config_a.task_kind == "dense_segmentation":
        train = gen_dense_segmentation(config_a.scene, n_train, config_a.num_classes, seed)
        test = gen_dense_segmentation(config_b.scene, n_test, config_b.num_classes, seed + 1)
    else:
        raise ConfigurationError(
            f"cross-distribution pairs are defined for dense tasks, not {config_a.task_kind!r}"
        )
    test.split = "test"
    return train, test
