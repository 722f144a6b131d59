"""Positive-model baselines: partial fine-tuning, magnitude pruning, distillation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import ConfigurationError
from .nnkit import LabeledSet, LayeredModel, build_model, clone_model, sgd_fit

KINDS = ("finetune", "prune", "distill")


@dataclass
class BaselineSpec:
    kind: str = "finetune"
    fraction: float = 0.5
    finetune_iters: int = 300
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    temperature: float = 2.0
    feature_weight: float = 1.0
    split_layer: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"baseline kind must be one of {KINDS}")
        if not 0 < self.fraction <= 1:
            raise ConfigurationError("fraction must lie in (0, 1]")
        if self.kind == "prune" and not 100 <= self.finetune_iters <= 500:
            raise ConfigurationError("pruning fine-tunes for 100 to 500 iterations")

    @property
    def label(self) -> str:
        if self.kind == "finetune":
            return f"FT({self.fraction:g})"
        if self.kind == "prune":
            return f"WP({self.fraction:g})"
        return "Distill"


def _ce(model, x, y):
    return F.cross_entropy(model(x), y)


def _tag(model: LayeredModel, spec: BaselineSpec) -> LayeredModel:
    model.info = {**model.info, "role": "baseline", "baseline": spec.label,
                  "fraction": spec.fraction, "finetune_iters": spec.finetune_iters, "seed": spec.seed}
    return model


def finetune_last_fraction(victim: LayeredModel, data: LabeledSet, spec: BaselineSpec) -> LayeredModel:
    """Fine-tune the last ``fraction`` of parameterized layers, freezing the rest."""
    model = clone_model(victim)
    layers = model.param_layers()
    frozen = math.floor((1 - spec.fraction) * len(layers))
    if frozen >= len(layers):
        raise ConfigurationError(f"fraction {spec.fraction} leaves no trainable layer")
    for layer in layers[:frozen]:
        layer.requires_grad_(False)
    trainable = [p for layer in layers[frozen:] for p in layer.parameters()]
    sgd_fit(model, data, _ce, spec.finetune_iters, lr=spec.lr, momentum=spec.momentum,
            batch_size=spec.batch_size, seed=spec.seed, params=trainable)
    model.requires_grad_(True)
    return _tag(model, spec)


def prunable_weights(model: LayeredModel) -> list[torch.Tensor]:
    return [layer.weight for layer in model.param_layers()]


def magnitude_masks(weights: list[torch.Tensor], fraction: float) -> list[torch.Tensor]:
    """Global masks zeroing exactly ``ceil(fraction * |w|)`` smallest-magnitude weights."""
    flat = torch.cat([w.detach().abs().reshape(-1) for w in weights])
    k = math.ceil(fraction * flat.numel())
    keep = torch.ones_like(flat, dtype=torch.bool)
    if k:
        keep[torch.argsort(flat, stable=True)[:k]] = False
    return [m.view_as(w) for m, w in zip(keep.split([w.numel() for w in weights]), weights)]


@torch.no_grad()
def apply_masks(weights: list[torch.Tensor], masks: list[torch.Tensor]) -> None:
    for w, m in zip(weights, masks):
        w.mul_(m)


def weight_prune(victim: LayeredModel, data: LabeledSet, spec: BaselineSpec) -> LayeredModel:
    if not 0 < spec.fraction < 1:
        raise ConfigurationError("pruning fraction must lie in (0, 1)")
    model = clone_model(victim)
    weights = prunable_weights(model)
    masks = magnitude_masks(weights, spec.fraction)
    apply_masks(weights, masks)
    sgd_fit(model, data, _ce, spec.finetune_iters, lr=spec.lr, momentum=spec.momentum,
            batch_size=spec.batch_size, seed=spec.seed, after_step=lambda m: apply_masks(weights, masks))
    return _tag(model, spec)


def distill(victim: LayeredModel, data: LabeledSet, spec: BaselineSpec) -> LayeredModel:
    """Train a freshly initialized student on softened victim outputs plus split-layer features."""
    if len(data) == 0:
        raise ValueError("distillation needs data")
    student = build_model(victim.arch_id, spec.seed, num_classes=victim.num_classes,
                          input_shape=victim.input_shape)
    l = victim.check_split(spec.split_layer)
    t = spec.temperature
    victim.eval()

    def loss_fn(model, x, _y):
        with torch.no_grad():
            v_lat = victim.prefix(x, l)
            v_out = victim.suffix(v_lat, l)
        s_lat = model.prefix(x, l)
        s_out = model.suffix(s_lat, l)
        kl = F.kl_div(F.log_softmax(s_out / t, dim=1), F.log_softmax(v_out / t, dim=1),
                      log_target=True, reduction="batchmean") * t * t
        feat = (s_lat - v_lat).flatten(1).norm(dim=1).mean()
        return kl + spec.feature_weight * feat

    sgd_fit(student, data, loss_fn, spec.finetune_iters, lr=spec.lr, momentum=spec.momentum,
            batch_size=spec.batch_size, seed=spec.seed)
    return _tag(student, spec)


def make_baseline(victim: LayeredModel, data: LabeledSet, spec: BaselineSpec) -> LayeredModel:
    return {"finetune": finetune_last_fraction, "prune": weight_prune, "distill": distill}[spec.kind](victim, data, spec)
