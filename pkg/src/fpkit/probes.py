"""Probe generation: FGSM/PGD sets, boundary fingerprints, reference and substitute draws."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AttackError, CheckpointError
from .nnkit import DatasetBundle, LabeledSet, LayeredModel, predict_logits, read_f32, read_meta, write_f32, write_meta

logger = logging.getLogger(__name__)

KINDS = ("boundary", "random-probe", "adversarial")


@dataclass
class AdvConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size > self.epsilon and self.epsilon > 0:
            raise ValueError("step_size must not exceed epsilon")


@dataclass
class FingerprintSet:
    samples: torch.Tensor
    victim_labels: torch.Tensor
    kind: str = "boundary"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.samples) != len(self.victim_labels):
            raise ValueError("samples and victim_labels differ in length")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")

    @property
    def n_fp(self) -> int:
        return len(self.samples)

    def __len__(self):
        return self.n_fp

    def as_labeled(self) -> LabeledSet:
        return LabeledSet(self.samples, self.victim_labels)

    def concat(self, other: "FingerprintSet") -> "FingerprintSet":
        return FingerprintSet(torch.cat([self.samples, other.samples]),
                              torch.cat([self.victim_labels, other.victim_labels]),
                              self.kind, {**other.meta, **self.meta})

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        write_f32(path / "samples.bin", self.samples.numpy())
        self.victim_labels.numpy().astype("<i4").tofile(path / "labels.bin")
        write_meta(path / "meta", {
            "kind": self.kind,
            "n_fp": self.n_fp,
            "sample_shape": tuple(self.samples.shape[1:]),
            "generator": json.dumps(self.meta, sort_keys=True),
        })
        return path

    @classmethod
    def load(cls, path) -> "FingerprintSet":
        path = Path(path)
        meta = read_meta(path / "meta")
        try:
            n = int(meta["n_fp"])
            shape = tuple(int(s) for s in meta["sample_shape"].split(",") if s)
            generator = json.loads(meta.get("generator", "{}"))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"bad fingerprint metadata in {path}: {exc}") from exc
        samples = read_f32(path / "samples.bin", (n, *shape))
        labels = np.fromfile(path / "labels.bin", dtype="<i4")
        if labels.size != n:
            raise CheckpointError(f"{path}/labels.bin holds {labels.size} labels, expected {n}")
        return cls(torch.from_numpy(samples), torch.from_numpy(labels.astype(np.int64)), meta["kind"], generator)


# --------------------------------------------------------------- gradient attacks


def _input_grad(model: LayeredModel, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    loss = F.cross_entropy(model(x), y, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise AttackError("non-finite input gradient")
    return grad


def fgsm(model: LayeredModel, samples: LabeledSet, cfg: AdvConfig) -> LabeledSet:
    if len(samples) == 0:
        raise ValueError("fgsm needs at least one sample")
    model.eval()
    grad = _input_grad(model, samples.x, samples.y)
    x_adv = torch.clamp(samples.x + cfg.epsilon * grad.sign(), 0.0, 1.0)
    return LabeledSet(x_adv.detach(), samples.y.clone())


def _pgd_step(model, x0, x_adv, y, step_size, epsilon):
    grad = _input_grad(model, x_adv, y)
    x_next = x_adv + step_size * grad.sign()
    x_next = torch.minimum(torch.maximum(x_next, x0 - epsilon), x0 + epsilon)
    return torch.clamp(x_next, 0.0, 1.0).detach()


def pgd(model: LayeredModel, samples: LabeledSet, cfg: AdvConfig) -> LabeledSet:
    """L-inf PGD from the clean point (no random start)."""
    if len(samples) == 0:
        raise ValueError("pgd needs at least one sample")
    model.eval()
    x_adv = samples.x.clone()
    for _ in range(cfg.steps):
        x_adv = _pgd_step(model, samples.x, x_adv, samples.y, cfg.step_size, cfg.epsilon)
    return LabeledSet(x_adv, samples.y.clone())


# ------------------------------------------------------------ boundary fingerprints


def logit_gap(logits: torch.Tensor) -> torch.Tensor:
    top2 = logits.topk(2, dim=1).values
    return top2[:, 0] - top2[:, 1]


@torch.no_grad()
def _labels(model, x):
    return predict_logits(model, x).argmax(dim=1)


def boundary_fingerprints(victim: LayeredModel, seeds: Union[LabeledSet, torch.Tensor], n: int,
                          cfg: AdvConfig = None, gap_bound: float = 0.5,
                          bisect_steps: int = 10, side: str = "post") -> FingerprintSet:
    """Points just inside the victim's decision boundary.

    Each seed is pushed by untargeted PGD (against the victim's own label)
    until the label flips; the segment between the last pre-flip and the
    first post-flip iterate is then bisected ``bisect_steps`` times. ``side``
    picks which end is kept: ``"post"`` (the flipped, adversarial label) or
    ``"pre"`` (the original label). Points whose top-1/top-2 logit gap is
    below ``gap_bound`` and whose label is stable over 3 forwards qualify.
    """
    cfg = cfg or AdvConfig(epsilon=0.3, step_size=0.01, steps=100)
    x0 = seeds.x if isinstance(seeds, LabeledSet) else seeds
    if len(x0) == 0:
        raise ValueError("boundary search needs at least one seed")
    victim.eval()
    y0 = _labels(victim, x0)
    before = x0.clone()
    after = torch.full_like(x0, float("nan"))
    flipped = torch.zeros(len(x0), dtype=torch.bool)
    x_adv = x0.clone()
    for _ in range(cfg.steps):
        active = ~flipped
        if not active.any():
            break
        step = _pgd_step(victim, x0[active], x_adv[active], y0[active], cfg.step_size, cfg.epsilon)
        lab = _labels(victim, step)
        idx = active.nonzero().squeeze(1)
        flip_now = lab != y0[active]
        before[idx[~flip_now]] = step[~flip_now]
        after[idx[flip_now]] = step[flip_now]
        flipped[idx[flip_now]] = True
        x_adv[idx] = step

    idx = flipped.nonzero().squeeze(1)
    lo, hi, yl = before[idx], after[idx], y0[idx]
    for _ in range(bisect_steps):
        mid = 0.5 * (lo + hi)
        same = _labels(victim, mid) == yl
        shape = (-1,) + (1,) * (lo.ndim - 1)
        lo = torch.where(same.view(shape), mid, lo)
        hi = torch.where(same.view(shape), hi, mid)
    if side not in ("pre", "post"):
        raise ValueError("side must be 'pre' or 'post'")
    pts = (lo if side == "pre" else hi).clamp(0.0, 1.0)

    logits = predict_logits(victim, pts)
    stable = torch.ones(len(pts), dtype=torch.bool)
    for _ in range(3):
        stable &= predict_logits(victim, pts).argmax(dim=1) == logits.argmax(dim=1)
    on_side = logits.argmax(dim=1) == yl if side == "pre" else logits.argmax(dim=1) != yl
    ok = (logit_gap(logits) < gap_bound) & stable & on_side
    chosen = ok.nonzero().squeeze(1)[:n]
    shortfall = n - len(chosen)
    if shortfall:
        logger.warning("boundary search found %d of %d requested fingerprints", len(chosen), n)
    meta = {"eps": cfg.epsilon, "step": cfg.step_size, "steps": cfg.steps, "seed": cfg.seed,
            "gap_bound": gap_bound, "bisect_steps": bisect_steps, "side": side, "shortfall": shortfall}
    return FingerprintSet(pts[chosen].contiguous(), logits[chosen].argmax(dim=1), "boundary", meta)


def random_probes(victim: LayeredModel, pool: LabeledSet, n: int, seed: int) -> FingerprintSet:
    rng = np.random.default_rng(seed)
    idx = torch.from_numpy(rng.choice(len(pool), size=min(n, len(pool)), replace=False))
    x = pool.x[idx]
    return FingerprintSet(x, _labels(victim, x), "random-probe", {"seed": seed})


# --------------------------------------------------------------- sample selection


def zest_reference_set(data: Union[DatasetBundle, LabeledSet], n: int = 32, seed: int = 0,
                       num_classes: int = None) -> LabeledSet:
    from .data import stratified_indices

    test = data.test if isinstance(data, DatasetBundle) else data
    k = num_classes or (data.class_count if isinstance(data, DatasetBundle) else int(test.y.max()) + 1)
    if len(test) == 0:
        raise ValueError("reference set needs a non-empty test split")
    if n > len(test):
        raise ValueError(f"requested {n} reference samples from {len(test)} test samples")
    idx = stratified_indices(test.y.numpy(), n, k, np.random.default_rng(seed))
    return test.subset(idx)


def select_substitute(pool: LabeledSet, size: Union[int, float], seed: int = 0,
                      num_classes: int = None) -> LabeledSet:
    """Class-balanced draw; ``size`` is a count (int) or a fraction of ``pool`` (float)."""
    from .data import stratified_indices

    if len(pool) == 0:
        raise ValueError("substitute pool is empty")
    if isinstance(size, float):
        if not 0 < size <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        size = int(round(size * len(pool)))
    if size > len(pool):
        raise ValueError(f"requested {size} substitute samples from a pool of {len(pool)}")
    k = num_classes or int(pool.y.max()) + 1
    return pool.subset(stratified_indices(pool.y.numpy(), size, k, np.random.default_rng(seed)))
