"""Test-time adaptation signals: sparse ground truth, simulated noisy
sparse measurements, click annotations, coarse labels, and kNN retrieval.

Signals derive from targets (or the clean training set, for retrieval)
plus declared noise models; never from the corrupted input. Each carries
a validity mask and provenance metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError, DimensionError
from .nets import Model

_STREAM_SIGNAL = 201


@dataclass
class AdaptationSignal:
    kind: str  # masked_gt | noisy_sparse | clicks | coarse | knn_coarse
    values: np.ndarray  # dense value map, label map, or a distribution vector
    mask: np.ndarray | None = None  # [H,W] binary validity mask for spatial kinds
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SignalConfig:
    """Declared signal parameters; ranges are used for training-time
    augmentation so the controller tolerates signal noise."""

    kind: str = "masked_gt"
    fraction: float = 0.005
    noise_sigma: float = 0.0
    outlier_rate: float = 0.0
    clicks_per_class: int = 5
    num_coarse: int = 5
    knn_k: int = 20
    augment_sigma_range: tuple[float, float] = (0.0, 0.05)
    augment_outlier_range: tuple[float, float] = (0.0, 0.10)
    augment_fraction_range: tuple[float, float] | None = None


def _squeeze_map(target) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 3 and t.shape[0] == 1:
        t = t[0]
    if t.ndim != 2:
        raise DimensionError(f"expected a [H,W] or [1,H,W] target, got {t.shape}")
    return t


def masked_gt(target, fraction: float, seed: int) -> AdaptationSignal:
    """Uniformly random pixel subset of the ground truth (control signal)."""
    if not (0 < fraction <= 1):
        raise ConfigurationError(f"fraction {fraction} outside (0, 1]")
    t = _squeeze_map(target)
    h, w = t.shape
    count = max(1, int(round(fraction * h * w)))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _STREAM_SIGNAL]))
    flat = rng.choice(h * w, size=count, replace=False)
    mask = np.zeros((h, w))
    mask.reshape(-1)[flat] = 1.0
    values = np.where(mask > 0, t, 0.0)
    return AdaptationSignal("masked_gt", values, mask, {"fraction": fraction})


def noisy_sparse(
    target,
    fraction: float,
    noise_sigma: float,
    outlier_rate: float,
    seed: int,
) -> AdaptationSignal:
    """Sparse values perturbed by Gaussian noise plus uniform outliers.

    Simulates sparse-reconstruction measurements: valid values are not
    clipped, and a fraction of them are replaced by uniform draws.
    """
    if not (0 <= outlier_rate <= 1) or noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be >= 0 and outlier_rate in [0,1]")
    sig = masked_gt(target, fraction, seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _STREAM_SIGNAL, 2]))
    values = sig.values.copy()
    on = sig.mask > 0
    if noise_sigma > 0:
        values[on] += rng.normal(0.0, noise_sigma, size=int(on.sum()))
    if outlier_rate > 0:
        hit = rng.random(int(on.sum())) < outlier_rate
        uni = rng.uniform(0.0, 1.0, size=int(on.sum()))
        vals_on = values[on]
        vals_on[hit] = uni[hit]
        values[on] = vals_on
    return AdaptationSignal(
        "noisy_sparse",
        values,
        sig.mask,
        {"fraction": fraction, "noise_sigma": noise_sigma, "outlier_rate": outlier_rate},
    )


def click_annotations(target_classes, clicks_per_class: int, seed: int) -> AdaptationSignal:
    """Per-class random pixel labels (simulated annotation clicks)."""
    if not (1 <= clicks_per_class <= 25):
        raise ConfigurationError(f"clicks_per_class {clicks_per_class} outside [1, 25]")
    t = np.asarray(target_classes, dtype=np.int64)
    if t.ndim != 2:
        raise DimensionError(f"expected a [H,W] class map, got {t.shape}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _STREAM_SIGNAL, 3]))
    mask = np.zeros(t.shape)
    for cls in np.unique(t):
        ys, xs = np.nonzero(t == cls)
        take = min(clicks_per_class, len(ys))
        pick = rng.choice(len(ys), size=take, replace=False)
        mask[ys[pick], xs[pick]] = 1.0
    values = np.where(mask > 0, t, 0).astype(np.int64)
    return AdaptationSignal("clicks", values, mask, {"clicks_per_class": clicks_per_class})


# ---------------------------------------------------------------------------
# coarse labels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoarseGrouping:
    group_of_fine: tuple[int, ...]  # fine class -> coarse class, surjective
    num_coarse: int

    def __post_init__(self):
        seen = set(self.group_of_fine)
        if seen != set(range(self.num_coarse)):
            raise ConfigurationError("grouping must be surjective onto coarse classes")

    @property
    def num_fine(self) -> int:
        return len(self.group_of_fine)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.group_of_fine, dtype=np.int64)


def make_coarse_grouping(
    K: int,
    C: int,
    proto_features: np.ndarray | None = None,
    mode: str = "contiguous",
    seed: int = 0,
) -> CoarseGrouping:
    """Deterministic fine-to-coarse class grouping.

    contiguous: consecutive classes share a group (sizes differ by <= 1
    when C does not divide K). feature_cluster: k-means over prototype
    features, a stand-in for a semantic hierarchy.
    """
    if not (2 <= C < K) and C != K:
        raise ConfigurationError(f"need 2 <= C <= K, got C={C}, K={K}")
    if C == K:
        return CoarseGrouping(tuple(range(K)), K)
    if mode == "contiguous":
        gmap = np.empty(K, dtype=np.int64)
        for c, block in enumerate(np.array_split(np.arange(K), C)):
            gmap[block] = c
        return CoarseGrouping(tuple(int(v) for v in gmap), C)
    if mode == "feature_cluster":
        if proto_features is None:
            raise ConfigurationError("feature_cluster mode needs prototype features")
        from scipy.cluster.vq import kmeans2

        feats = proto_features.reshape(K, -1)
        for attempt in range(10):
            rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
            _, labels = kmeans2(feats, C, minit="++", seed=rng)
            if len(set(labels.tolist())) == C:
                return CoarseGrouping(tuple(int(v) for v in labels), C)
        raise ConfigurationError("k-means produced an empty coarse class repeatedly")
    raise ConfigurationError(f"unknown grouping mode {mode!r}")


def coarse_label(y_fine: int, grouping: CoarseGrouping) -> AdaptationSignal:
    """One-hot coarse label of a fine class."""
    if not (0 <= y_fine < grouping.num_fine):
        raise IndexError(f"fine class {y_fine} outside [0,{grouping.num_fine})")
    onehot = np.zeros(grouping.num_coarse)
    onehot[grouping.group_of_fine[y_fine]] = 1.0
    return AdaptationSignal("coarse", onehot, None, {"num_coarse": grouping.num_coarse})


# ---------------------------------------------------------------------------
# kNN retrieval over clean-training-set embeddings
# ---------------------------------------------------------------------------


class EmbeddingIndex:
    """Cosine-similarity index over penultimate-layer embeddings."""

    def __init__(self, model: Model, embeddings: np.ndarray, labels: np.ndarray):
        if embeddings.shape[0] == 0:
            raise ContractError("embedding index is empty")
        self.model = model
        norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
        self.embeddings = embeddings / np.maximum(norms, 1e-12)
        self.labels = labels.astype(np.int64)

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def classifier_embedding(model: Model, images: np.ndarray) -> np.ndarray:
    """Penultimate activation (input of the final linear layer)."""
    flat_idx = next(
        i for i, layer in enumerate(model.spec.layers) if layer["kind"] == "flatten"
    )
    x = images if images.ndim == 4 else images[None]
    _, acts = model.forward(x, return_acts=True)
    emb = acts[flat_idx].array
    return emb if images.ndim == 4 else emb[0]


def build_embedding_index(model: Model, dataset) -> EmbeddingIndex:
    embs = []
    for start in range(0, len(dataset), 64):
        embs.append(classifier_embedding(model, dataset.inputs[start : start + 64]))
    return EmbeddingIndex(model, np.concatenate(embs, axis=0), dataset.targets)


def knn_coarse(
    test_image: np.ndarray,
    index: EmbeddingIndex,
    k: int = 20,
    grouping: CoarseGrouping | None = None,
) -> AdaptationSignal:
    """Normalized label histogram of the k nearest training items."""
    if len(index) < k:
        raise ContractError(f"index holds {len(index)} items, need k={k}")
    emb = classifier_embedding(index.model, test_image)
    emb = emb / max(np.linalg.norm(emb), 1e-12)
    sims = index.embeddings @ emb
    top = np.argsort(-sims, kind="stable")[:k]
    labels = index.labels[top]
    if grouping is not None:
        labels = grouping.as_array()[labels]
        size = grouping.num_coarse
    else:
        size = int(index.labels.max()) + 1
    hist = np.bincount(labels, minlength=size).astype(np.float64)
    return AdaptationSignal("knn_coarse", hist / hist.sum(), None, {"k": k})


# ---------------------------------------------------------------------------
# error-feedback encoding for the controller
# ---------------------------------------------------------------------------


def _encode_one(pred: np.ndarray, signal: AdaptationSignal) -> np.ndarray:
    if signal.kind in ("masked_gt", "noisy_sparse"):
        if pred.ndim != 3 or pred.shape[0] != 1:
            raise DimensionError(f"dense feedback expects [1,H,W] prediction, got {pred.shape}")
        return np.stack([pred[0], signal.values, signal.mask])
    if signal.kind == "clicks":
        if pred.ndim != 3:
            raise DimensionError(f"click feedback expects [K,H,W] logits, got {pred.shape}")
        k = pred.shape[0]
        probs = ad.softmax(pred, axis=0)
        onehot = np.zeros_like(pred)
        ys, xs = np.nonzero(signal.mask > 0)
        onehot[signal.values[ys, xs], ys, xs] = 1.0
        return np.concatenate([probs, onehot, signal.mask[None]], axis=0)
    if signal.kind in ("coarse", "knn_coarse"):
        if pred.ndim != 1:
            raise DimensionError(f"vector feedback expects [K] logits, got {pred.shape}")
        return np.concatenate([ad.softmax(pred), signal.values])
    raise ConfigurationError(f"no feedback encoding for signal kind {signal.kind!r}")


def encode_feedback(prediction, signal) -> np.ndarray:
    """Concatenate prediction and signal into the controller input.

    Single sample: (prediction, AdaptationSignal) -> encoded array.
    Batch: ([N,...] predictions, list of N signals) -> stacked encoding.
    """
    pred = prediction.array if isinstance(prediction, ad.Tensor) else np.asarray(prediction)
    if isinstance(signal, AdaptationSignal):
        return _encode_one(pred, signal)
    if len(signal) != pred.shape[0]:
        raise DimensionError(f"{pred.shape[0]} predictions vs {len(signal)} signals")
    return np.stack([_encode_one(pred[i], s) for i, s in enumerate(signal)])
