"""Layered network core: architectures, split forward, training, checkpoints.

A model is a stack of *units*. Each unit is one parameterized layer
together with the activation / pooling that follows it, so the split index
``l`` counts post-activation units. Splitting at ``l`` (``2 <= l <= L``)
puts the first ``l - 1`` units in the prefix and the rest in the suffix;
``l = L`` therefore exposes the penultimate representation.
"""

from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ConfigurationError, SchemaError, TrainingError

logger = logging.getLogger(__name__)

ROLES = ("victim", "negative", "surrogate", "baseline")


# --------------------------------------------------------------------------- data


@dataclass
class LabeledSet:
    """Inputs in [0, 1] with integer labels."""

    x: torch.Tensor
    y: torch.Tensor

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "LabeledSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return LabeledSet(self.x[idx], self.y[idx])

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.y.numpy(), minlength=num_classes)


@dataclass
class DatasetBundle:
    train: LabeledSet
    test: LabeledSet
    substitute: LabeledSet
    class_count: int
    adversarial: Optional[LabeledSet] = None
    name: str = "unnamed"

    def __post_init__(self):
        for part in ("train", "test", "substitute", "adversarial"):
            s = getattr(self, part)
            if s is None or len(s) == 0:
                continue
            if int(s.y.min()) < 0 or int(s.y.max()) >= self.class_count:
                raise ValueError(f"{part} labels outside [0, {self.class_count})")

    @property
    def input_shape(self) -> tuple:
        return tuple(self.train.x.shape[1:])


@dataclass
class TrainConfig:
    epochs: int = 3
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")


# ------------------------------------------------------------------ architectures


def _smallmlp(input_shape, num_classes):
    d = int(np.prod(input_shape))
    return [
        {"kind": "dense", "in": d, "out": 128, "activation": "relu", "flatten": True},
        {"kind": "dense", "in": 128, "out": 64, "activation": "relu"},
        {"kind": "dense", "in": 64, "out": num_classes},
    ]


def _smallcnn(input_shape, num_classes):
    c, h, w = input_shape
    units = []
    for out in (16, 32, 32):
        units.append({"kind": "conv", "in": c, "out": out, "kernel": 3, "activation": "relu", "pool": 2})
        c, h, w = out, h // 2, w // 2
    units.append({"kind": "dense", "in": c * h * w, "out": 64, "activation": "relu", "flatten": True})
    units.append({"kind": "dense", "in": 64, "out": num_classes})
    return units


# name -> (descriptor builder, default split index)
ARCHITECTURES: dict[str, tuple[Callable, int]] = {
    "smallmlp": (_smallmlp, 3),
    "smallcnn": (_smallcnn, 4),
}


def _make_unit(desc: dict) -> nn.Sequential:
    mods: list[nn.Module] = []
    if desc.get("flatten"):
        mods.append(nn.Flatten())
    if desc["kind"] == "conv":
        k = desc["kernel"]
        mods.append(nn.Conv2d(desc["in"], desc["out"], k, padding=k // 2))
    elif desc["kind"] == "dense":
        mods.append(nn.Linear(desc["in"], desc["out"]))
    else:
        raise ConfigurationError(f"unknown layer kind {desc['kind']!r}")
    if desc.get("activation") == "relu":
        mods.append(nn.ReLU())
    if desc.get("pool"):
        mods.append(nn.MaxPool2d(desc["pool"]))
    return nn.Sequential(*mods)


class LayeredModel(nn.Module):
    def __init__(self, arch_id: str, layers: list[dict], num_classes: int, input_shape: Sequence[int]):
        super().__init__()
        self.arch_id = arch_id
        self.layers = layers
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.units = nn.ModuleList(_make_unit(d) for d in layers)
        self.default_split = ARCHITECTURES[arch_id][1] if arch_id in ARCHITECTURES else len(layers)
        self.info: dict = {}

    @property
    def num_layers(self) -> int:
        return len(self.units)

    def check_split(self, l: int) -> int:
        if l is None:
            l = self.default_split
        if not 2 <= l <= self.num_layers:
            raise IndexError(f"split index {l} outside [2, {self.num_layers}]")
        return l

    def prefix(self, x: torch.Tensor, l: Optional[int] = None) -> torch.Tensor:
        l = self.check_split(l)
        for unit in self.units[: l - 1]:
            x = unit(x)
        return x

    def suffix(self, z: torch.Tensor, l: Optional[int] = None) -> torch.Tensor:
        l = self.check_split(l)
        for unit in self.units[l - 1 :]:
            z = unit(z)
        return z

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for unit in self.units:
            x = unit(x)
        return x

    def param_layers(self) -> list[nn.Module]:
        return [m for unit in self.units for m in unit if isinstance(m, (nn.Conv2d, nn.Linear))]

    def same_architecture(self, other: "LayeredModel") -> bool:
        return (
            self.arch_id == other.arch_id
            and self.layers == other.layers
            and self.input_shape == other.input_shape
            and self.num_classes == other.num_classes
        )


def build_model(arch_spec: Union[str, dict], seed: int, num_classes: int = 10,
                input_shape: Sequence[int] = (1, 28, 28)) -> LayeredModel:
    """Build a registered architecture with a seed-determined initialization.

    ``arch_spec`` is either an architecture name or a mapping with keys
    ``arch`` and optionally ``num_classes`` / ``input_shape``.
    """
    if isinstance(arch_spec, dict):
        num_classes = arch_spec.get("num_classes", num_classes)
        input_shape = arch_spec.get("input_shape", input_shape)
        arch_spec = arch_spec.get("arch") or arch_spec.get("arch_id")
    if arch_spec not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {arch_spec!r}; known: {sorted(ARCHITECTURES)}")
    layers = ARCHITECTURES[arch_spec][0](tuple(input_shape), num_classes)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = LayeredModel(arch_spec, layers, num_classes, input_shape)
    model.info["seed"] = seed
    return model.eval()


def clone_model(model: LayeredModel) -> LayeredModel:
    return copy.deepcopy(model)


def split_forward(model: LayeredModel, l: Optional[int], x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    latent = model.prefix(x, l)
    return latent, model.suffix(latent, l)


def flat_params(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


# ----------------------------------------------------------------------- training


def iterate_minibatches(n: int, batch_size: int, generator: torch.Generator) -> Iterator[torch.Tensor]:
    """Endless stream of shuffled index batches; reshuffles at every pass."""
    while True:
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]


def sgd_fit(model: LayeredModel, samples: LabeledSet, loss_fn: Callable, steps: int, *,
            lr: float = 0.01, momentum: float = 0.9, batch_size: int = 64, seed: int = 0,
            params=None, after_step: Optional[Callable] = None,
            history: Optional[list] = None) -> LayeredModel:
    """Run ``steps`` momentum-SGD updates of ``loss_fn(model, x, y)`` in place."""
    if len(samples) == 0:
        raise ValueError("cannot train on an empty sample set")
    params = list(model.parameters() if params is None else params)
    opt = torch.optim.SGD(params, lr=lr, momentum=momentum)
    gen = torch.Generator().manual_seed(seed)
    batches = iterate_minibatches(len(samples), batch_size, gen)
    model.train()
    for step in range(steps):
        idx = next(batches)
        loss = loss_fn(model, samples.x[idx], samples.y[idx])
        if not torch.isfinite(loss):
            model.eval()
            raise TrainingError("non-finite training loss", iteration=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if after_step is not None:
            after_step(model)
        if history is not None:
            history.append(float(loss.detach()))
    model.eval()
    return model


def _ce_loss(model, x, y):
    return F.cross_entropy(model(x), y)


def train(model: LayeredModel, data: Union[DatasetBundle, LabeledSet], cfg: TrainConfig,
          history: Optional[list] = None) -> LayeredModel:
    """Train ``model`` in place with cross-entropy and momentum SGD; returns it."""
    samples = data.train if isinstance(data, DatasetBundle) else data
    if len(samples) == 0:
        raise ValueError("training set is empty")
    steps = cfg.epochs * math.ceil(len(samples) / cfg.batch_size)
    if cfg.max_steps is not None:
        steps = min(steps, cfg.max_steps)
    return sgd_fit(model, samples, _ce_loss, steps, lr=cfg.learning_rate, momentum=cfg.momentum,
                   batch_size=cfg.batch_size, seed=cfg.seed, history=history)


@torch.no_grad()
def predict_logits(model: nn.Module, x: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    model.eval()
    return torch.cat([model(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def evaluate_accuracy(model: LayeredModel, samples: LabeledSet) -> float:
    if len(samples) == 0:
        raise ValueError("cannot evaluate accuracy on an empty set")
    pred = predict_logits(model, samples.x).argmax(dim=1)
    return float((pred == samples.y).double().mean())


# ---------------------------------------------------------------------- checkpoint


def write_meta(path: Path, meta: dict) -> None:
    lines = []
    for key, value in meta.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        text = str(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"metadata entry {key!r} cannot be stored as a key=value line")
        lines.append(f"{key}={text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_meta(path: Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read metadata {path}: {exc}") from exc
    meta = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed metadata line {line!r} in {path}")
        key, value = line.split("=", 1)
        meta[key] = value
    return meta


def write_f32(path: Path, array) -> None:
    np.ascontiguousarray(np.asarray(array), dtype="<f4").tofile(path)


def read_f32(path: Path, shape: Sequence[int]) -> np.ndarray:
    count = int(np.prod(shape)) if len(shape) else 1
    try:
        raw = np.fromfile(path, dtype="<f4")
    except OSError as exc:
        raise CheckpointError(f"cannot read tensor file {path}: {exc}") from exc
    if raw.size != count:
        raise CheckpointError(f"{path}: expected {count} floats, found {raw.size}")
    return raw.reshape(shape).astype(np.float32)


def _shape_str(text: str) -> tuple:
    return tuple(int(s) for s in text.split(",")) if text else ()


@dataclass
class Checkpoint:
    arch_id: str
    params: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: LayeredModel, **meta) -> "Checkpoint":
        role = meta.get("role", model.info.get("role"))
        if role is not None and role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        merged = {**model.info, **meta}
        merged.update(arch_id=model.arch_id, num_classes=model.num_classes, input_shape=model.input_shape)
        params = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
        return cls(model.arch_id, params, merged)

    def save(self, path) -> Path:
        path = Path(path)
        (path / "tensors").mkdir(parents=True, exist_ok=True)
        meta = dict(self.meta)
        for name, arr in self.params.items():
            meta[f"shape.{name}"] = ",".join(str(s) for s in arr.shape)
            write_f32(path / "tensors" / f"{name}.bin", arr)
        write_meta(path / "meta", meta)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not (path / "meta").is_file():
            raise CheckpointError(f"no checkpoint at {path}")
        raw = read_meta(path / "meta")
        shapes = {k[len("shape."):]: _shape_str(v) for k, v in raw.items() if k.startswith("shape.")}
        meta = {k: v for k, v in raw.items() if not k.startswith("shape.")}
        if "arch_id" not in meta:
            raise CheckpointError(f"{path}/meta lacks arch_id")
        params = {name: read_f32(path / "tensors" / f"{name}.bin", shape) for name, shape in shapes.items()}
        return cls(meta["arch_id"], params, meta)

    def to_model(self) -> LayeredModel:
        try:
            num_classes = int(self.meta.get("num_classes", 10))
            input_shape = _shape_str(self.meta.get("input_shape", "1,28,28"))
            model = build_model(self.arch_id, 0, num_classes=num_classes, input_shape=input_shape)
        except ConfigurationError as exc:
            raise SchemaError(str(exc)) from exc
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        found = {k: tuple(v.shape) for k, v in self.params.items()}
        if expected != found:
            raise SchemaError(f"checkpoint tensors {found} do not match {self.arch_id} layout {expected}")
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.params.items()})
        model.info = {k: v for k, v in self.meta.items() if k not in ("arch_id", "num_classes", "input_shape")}
        return model.eval()


def save_checkpoint(model: LayeredModel, path, **meta) -> Path:
    return Checkpoint.from_model(model, **meta).save(path)


def load_checkpoint(path) -> LayeredModel:
    return Checkpoint.load(path).to_model()


def is_checkpoint(path) -> bool:
    return os.path.isfile(os.path.join(path, "meta"))
