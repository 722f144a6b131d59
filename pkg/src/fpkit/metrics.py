"""Model distance and similarity metrics used as ownership evidence.

Distances (larger means more different): ``lod``, ``lad``, ``zest_distance``.
Similarities (larger means more alike): ``ddv_similarity``, ``matching_rate``.
``rob_and_robd`` compares accuracies on an adversarial set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import torch

from .errors import MetricInapplicableError
from .nnkit import LabeledSet, LayeredModel, evaluate_accuracy, predict_logits
from .probes import FingerprintSet

DISTANCE = "distance-larger-means-different"
SIMILARITY = "similarity-larger-means-same"

Probes = Union[FingerprintSet, LabeledSet, torch.Tensor]


@dataclass
class DistanceReport:
    metric_name: str
    value: float
    per_sample: list = field(default_factory=list)
    direction: str = DISTANCE
    n_probes: int = 0

    @property
    def is_distance(self) -> bool:
        return self.direction == DISTANCE

    def row(self, std: Optional[float] = None) -> dict:
        if std is None:
            std = float(np.std(self.per_sample, ddof=1)) if len(self.per_sample) > 1 else 0.0
        return {"metric": self.metric_name, "value": self.value, "std": std,
                "direction": self.direction, "n_probes": self.n_probes}


@dataclass
class ActivationProfile:
    layer: Optional[int] = None
    threshold: float = 0.0


def probe_inputs(probes: Probes) -> torch.Tensor:
    if isinstance(probes, FingerprintSet):
        return probes.samples
    if isinstance(probes, LabeledSet):
        return probes.x
    return probes


def _require_same_arch(victim: LayeredModel, suspect: LayeredModel, metric: str) -> None:
    if not victim.same_architecture(suspect):
        raise MetricInapplicableError(
            f"{metric} needs identical architectures ({victim.arch_id} vs {suspect.arch_id})")


@torch.no_grad()
def layer_output(model: LayeredModel, x: torch.Tensor, l: Optional[int] = None,
                 batch_size: int = 1024) -> np.ndarray:
    """Flattened output of the prefix at split ``l``, as float64."""
    model.eval()
    out = [model.prefix(x[i : i + batch_size], l) for i in range(0, len(x), batch_size)]
    return torch.cat(out).flatten(1).double().numpy()


def softmax_outputs(model: LayeredModel, x: torch.Tensor) -> np.ndarray:
    return torch.softmax(predict_logits(model, x).double(), dim=1).numpy()


def _nonempty(x: torch.Tensor, metric: str) -> None:
    if len(x) == 0:
        raise ValueError(f"{metric} needs at least one probe")


def lod(victim: LayeredModel, suspect: LayeredModel, probes: Probes, l: Optional[int] = None,
        p: float = 2) -> DistanceReport:
    """Mean L_p distance between the two models' layer-``l`` outputs."""
    _require_same_arch(victim, suspect, "LOD")
    x = probe_inputs(probes)
    _nonempty(x, "LOD")
    diff = layer_output(victim, x, l) - layer_output(suspect, x, l)
    per = np.linalg.norm(diff, ord=p, axis=1)
    return DistanceReport("lod", float(per.mean()), per.tolist(), DISTANCE, len(x))


def lad(victim: LayeredModel, suspect: LayeredModel, probes: Probes,
        profile: Optional[ActivationProfile] = None) -> DistanceReport:
    """Fraction of (neuron, probe) cells whose activation state differs."""
    profile = profile or ActivationProfile()
    _require_same_arch(victim, suspect, "LAD")
    x = probe_inputs(probes)
    _nonempty(x, "LAD")
    act_v = layer_output(victim, x, profile.layer) > profile.threshold
    act_s = layer_output(suspect, x, profile.layer) > profile.threshold
    per = (act_v != act_s).mean(axis=1)
    return DistanceReport("lad", float(per.mean()), per.tolist(), DISTANCE, len(x))


# ------------------------------------------------------------------------ ZEST


@dataclass
class LinearSurrogate:
    """Per-reference-sample ridge fits of softmax outputs on segment masks."""

    weights: np.ndarray  # (n_ref, segments, classes)
    intercepts: np.ndarray  # (n_ref, classes)
    grid: tuple = (4, 4)
    n_masks: int = 100
    ridge: float = 1e-3
    seed: int = 0

    def stacked(self) -> np.ndarray:
        return self.weights.reshape(len(self.weights), -1)


def segment_map(height: int, width: int, grid=(4, 4)) -> np.ndarray:
    rows = np.concatenate([np.full(len(a), i) for i, a in enumerate(np.array_split(np.arange(height), grid[0]))])
    cols = np.concatenate([np.full(len(a), i) for i, a in enumerate(np.array_split(np.arange(width), grid[1]))])
    return rows[:, None] * grid[1] + cols[None, :]


def zest_masks(n_ref: int, n_masks: int = 100, segments: int = 16, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=(n_ref, n_masks, segments)).astype(np.float64)


def ridge_fit(features: np.ndarray, targets: np.ndarray, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    """Ridge regression with an unpenalized intercept. Returns (weights, intercept)."""
    fx, ty = features.mean(axis=0), targets.mean(axis=0)
    xc, yc = features - fx, targets - ty
    gram = xc.T @ xc + ridge * np.eye(features.shape[1])
    w = np.linalg.solve(gram, xc.T @ yc)
    return w, ty - fx @ w


def fit_linear_surrogate(model: LayeredModel, reference: Probes, grid=(4, 4), n_masks: int = 100,
                         ridge: float = 1e-3, seed: int = 0, fill=None) -> LinearSurrogate:
    """LIME-style local linear fits around each reference input.

    Masked-out segments take ``fill`` (default: per-channel mean of the
    reference inputs). The masks depend only on ``seed`` so two models fitted
    with the same seed see identical perturbations.
    """
    x = probe_inputs(reference).double()
    n, c, h, w = x.shape
    seg = torch.from_numpy(segment_map(h, w, grid))
    segments = grid[0] * grid[1]
    masks = zest_masks(n, n_masks, segments, seed)
    if fill is None:
        fill = x.mean(dim=(0, 2, 3))
    fill = torch.as_tensor(fill, dtype=torch.float64).reshape(-1, 1, 1).expand(c, h, w)
    pixel_keep = torch.from_numpy(masks)[:, :, seg]  # (n, M, h, w)
    perturbed = x[:, None] * pixel_keep[:, :, None] + fill * (1 - pixel_keep[:, :, None])
    probs = softmax_outputs(model, perturbed.reshape(n * n_masks, c, h, w).float())
    probs = probs.reshape(n, n_masks, -1)
    weights, intercepts = zip(*(ridge_fit(masks[i], probs[i], ridge) for i in range(n)))
    return LinearSurrogate(np.stack(weights), np.stack(intercepts), tuple(grid), n_masks, ridge, seed)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(np.dot(a, b) / (na * nb))


def surrogate_distance(sv: LinearSurrogate, ss: LinearSurrogate, mode: str = "l2") -> DistanceReport:
    a, b = sv.stacked(), ss.stacked()
    if mode == "l2":
        per = np.linalg.norm(a - b, axis=1)
        value = float(np.linalg.norm(a - b))
    elif mode == "cosine":
        per = np.array([1.0 - _cosine(a[i], b[i]) for i in range(len(a))])
        value = 1.0 - _cosine(a.ravel(), b.ravel())
    else:
        raise ValueError(f"mode must be 'l2' or 'cosine', not {mode!r}")
    return DistanceReport(f"zest_{mode}", value, per.tolist(), DISTANCE, len(a))


def zest_distance(victim: LayeredModel, suspect: LayeredModel, reference: Probes, mode: str = "l2",
                  **fit_kwargs) -> DistanceReport:
    sv = fit_linear_surrogate(victim, reference, **fit_kwargs)
    ss = fit_linear_surrogate(suspect, reference, **fit_kwargs)
    return surrogate_distance(sv, ss, mode.lower())


# -------------------------------------------------------------- black-box metrics


def decision_distance_vector(outputs: np.ndarray) -> np.ndarray:
    """Pairwise L2 distances ``||o_i - o_j||`` for ``i < j`` in row-major order."""
    i, j = np.triu_indices(len(outputs), k=1)
    return np.linalg.norm(outputs[i] - outputs[j], axis=1)


def ddv_similarity(victim: LayeredModel, suspect: LayeredModel, probes: Probes) -> DistanceReport:
    x = probe_inputs(probes)
    if len(x) < 2:
        raise ValueError("DDV needs at least two probes")
    dv = decision_distance_vector(softmax_outputs(victim, x))
    ds = decision_distance_vector(softmax_outputs(suspect, x))
    return DistanceReport("ddv", _cosine(dv, ds), [], SIMILARITY, len(x))


def matching_rate(victim: LayeredModel, suspect: LayeredModel, probes: Probes) -> DistanceReport:
    x = probe_inputs(probes)
    _nonempty(x, "MR")
    match = predict_logits(victim, x).argmax(1) == predict_logits(suspect, x).argmax(1)
    per = match.double().numpy()
    return DistanceReport("mr", float(per.mean()), per.tolist(), SIMILARITY, len(x))


def rob_and_robd(victim: LayeredModel, suspect: LayeredModel, adv: LabeledSet) -> tuple[float, float, float]:
    """Accuracy of each model on ``adv`` and the absolute gap between them."""
    if len(adv) == 0:
        raise ValueError("adversarial set is empty")
    rob_v = evaluate_accuracy(victim, adv)
    rob_s = evaluate_accuracy(suspect, adv)
    return rob_v, rob_s, abs(rob_v - rob_s)
