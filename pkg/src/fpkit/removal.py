"""Fingerprint removal by min-max bilevel optimization.

The inner (max) problem builds perturbed targets from the victim:

* a latent target ``z1`` at the split layer, pushed away from the victim's
  own latent by feature shuffling and a log-distance barrier while the
  surrogate's suffix must still map it to the victim label;
* a logit target ``z2`` interpolated towards the batch member whose victim
  logits are farthest away, keeping the victim's top-1 class.

The outer (min) problem takes one momentum-SGD step on the surrogate with
``alpha*CE + (1-alpha)*KL(surrogate || z2) + beta*||latent - z1||``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, RemovalError
from .nnkit import (LabeledSet, LayeredModel, clone_model, evaluate_accuracy, is_checkpoint,
                    iterate_minibatches, load_checkpoint, save_checkpoint)

logger = logging.getLogger(__name__)

LAMBDA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))
TRACE_FIELDS = ("iter", "l_ce", "l_kl", "l_feat", "total", "fidelity")


@dataclass
class RemovalConfig:
    alpha: float = 0.2
    beta: float = 2.0
    eta: float = 20.0
    lr: float = 0.01
    momentum: float = 0.9
    iterations: int = 1000
    batch_size: int = 128
    split_layer: Optional[int] = None
    shuffle_ratio: float = 0.1
    inner_steps: int = 10
    latent_init: str = "victim"
    lambda_grid: Sequence[float] = LAMBDA_GRID
    seed: int = 0
    fidelity_every: int = 50
    checkpoint_every: int = 100

    def __post_init__(self):
        self.lambda_grid = tuple(float(v) for v in self.lambda_grid)
        if not 0 <= self.alpha <= 1:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if self.eta < 0 or not self.lr > 0:
            raise ConfigurationError("eta must be >= 0 and lr > 0")
        if self.iterations < 0 or self.batch_size < 2 or self.inner_steps < 1:
            raise ConfigurationError("need iterations >= 0, batch_size >= 2, inner_steps >= 1")
        if self.latent_init not in ("surrogate", "victim"):
            raise ConfigurationError("latent_init must be 'surrogate' or 'victim'")
        if not 0 <= self.shuffle_ratio <= 1:
            raise ConfigurationError("shuffle_ratio must lie in [0, 1]")
        grid = np.asarray(self.lambda_grid)
        if len(grid) == 0 or np.any(np.diff(grid) <= 0) or grid[-1] != 1.0 or grid[0] <= 0:
            raise ConfigurationError("lambda_grid must be strictly increasing in (0, 1] and end at 1.0")


@dataclass
class LatentTarget:
    z1: torch.Tensor
    source: torch.Tensor
    label: torch.Tensor
    fallback: torch.Tensor = None

    @property
    def delta(self) -> torch.Tensor:
        return self.z1 - self.source


@dataclass
class LogitTarget:
    z2: torch.Tensor
    lam: torch.Tensor
    partner: torch.Tensor
    source: torch.Tensor = None

    @property
    def delta(self) -> torch.Tensor:
        return self.z2 - self.source


# ------------------------------------------------------------------- latent level


def feature_shuffle(z: torch.Tensor, ratio: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Permute a random ``ceil(ratio * C)`` subset of channels, independently per sample.

    Channels are dimension 1 (feature maps for conv latents, units for dense ones).
    """
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must lie in [0, 1]")
    b, c = z.shape[0], z.shape[1]
    k = math.ceil(ratio * c)
    if k < 2:
        return z.clone()
    chosen = torch.rand(b, c, generator=generator).argsort(dim=1)[:, :k]
    order = torch.rand(b, k, generator=generator).argsort(dim=1)
    index = torch.arange(c).repeat(b, 1)
    index.scatter_(1, chosen, torch.gather(chosen, 1, order))
    index = index.view(b, c, *([1] * (z.ndim - 2))).expand_as(z)
    return torch.gather(z, 1, index)


def reverse_loss(surrogate: LayeredModel, z1: torch.Tensor, source: torch.Tensor, label: torch.Tensor,
                 l: Optional[int] = None) -> torch.Tensor:
    """Sum over the batch of ``CE(F_S^{l+}(z1), y) - log ||z1 - z1'||``.

    The norm is floored at 1e-12 so a zero perturbation yields a finite loss
    with zero barrier gradient.
    """
    ce = F.cross_entropy(surrogate.suffix(z1, l), label, reduction="sum")
    dist = (z1 - source).flatten(1).norm(dim=1).clamp_min(1e-12)
    return ce - torch.log(dist).sum()


def reverse_latent(victim: LayeredModel, surrogate: LayeredModel, x: torch.Tensor, cfg: RemovalConfig,
                   generator: Optional[torch.Generator] = None, iteration: int = 0) -> LatentTarget:
    """Inner maximization at the split layer.

    Samples whose final ``z1`` no longer maps to the victim label through the
    surrogate suffix fall back to the victim's own latent.
    """
    l = victim.check_split(cfg.split_layer)
    with torch.no_grad():
        source = victim.prefix(x, l)
        label = victim.suffix(source, l).argmax(dim=1)
        z1 = source.clone() if cfg.latent_init == "victim" else surrogate.prefix(x, l)
    for _ in range(cfg.inner_steps):
        z1 = feature_shuffle(z1, cfg.shuffle_ratio, generator).requires_grad_(True)
        loss = reverse_loss(surrogate, z1, source, label, l)
        if not torch.isfinite(loss):
            raise RemovalError("non-finite latent reverse loss", iteration=iteration)
        (grad,) = torch.autograd.grad(loss, z1)
        z1 = (z1 - cfg.eta * grad).detach()
    with torch.no_grad():
        ok = surrogate.suffix(z1, l).argmax(dim=1) == label
    fallback = ~ok
    if fallback.any():
        keep = ok.view(-1, *([1] * (z1.ndim - 1)))
        z1 = torch.where(keep, z1, source)
    return LatentTarget(z1.detach(), source, label, fallback)


# -------------------------------------------------------------------- logit level


def farthest_partners(logits: torch.Tensor) -> torch.Tensor:
    """Index of the batch member with the largest logit distance to each row.

    Ties go to the lowest index; a row with no positive distance keeps itself.
    """
    dist = (logits[:, None, :] - logits[None, :, :]).norm(dim=2)
    best, idx = dist.max(dim=1)
    self_idx = torch.arange(len(logits))
    return torch.where(best > 0, idx, self_idx)


def ilbs_from_logits(logits: torch.Tensor, lambda_grid: Sequence[float] = LAMBDA_GRID) -> LogitTarget:
    """Least-like boundary interpolation on a batch of victim logits.

    For each row the smallest grid weight ``lam`` whose interpolation
    ``lam*z_i + (1-lam)*z_j`` keeps row ``i``'s top-1 class is chosen.
    """
    if len(logits) < 2:
        raise ValueError("ILBS needs a batch of at least two samples")
    logits = logits.detach()
    partner = farthest_partners(logits)
    other = logits[partner]
    label = logits.argmax(dim=1)
    lam = torch.ones(len(logits), dtype=logits.dtype)
    z2 = logits.clone()
    done = torch.zeros(len(logits), dtype=torch.bool)
    for value in lambda_grid:
        cand = value * logits + (1 - value) * other
        ok = (cand.argmax(dim=1) == label) & ~done
        z2[ok] = cand[ok]
        lam[ok] = value
        done |= ok
        if done.all():
            break
    return LogitTarget(z2, lam, partner, logits)


@torch.no_grad()
def ilbs(victim: LayeredModel, batch, lambda_grid: Sequence[float] = LAMBDA_GRID) -> LogitTarget:
    x = batch.x if isinstance(batch, LabeledSet) else batch
    victim.eval()
    return ilbs_from_logits(victim(x), lambda_grid)


# ------------------------------------------------------------------------- loss


def removal_loss(surrogate_out: torch.Tensor, z2: LogitTarget, surrogate_latent: torch.Tensor,
                 z1: LatentTarget, cfg: RemovalConfig) -> tuple[torch.Tensor, dict]:
    """Combined upper-level loss; targets enter as constants."""
    label = z1.label
    ce = F.cross_entropy(surrogate_out, label)
    log_p = F.log_softmax(surrogate_out, dim=1)
    log_q = F.log_softmax(z2.z2.detach(), dim=1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()
    feat = (surrogate_latent - z1.z1.detach()).flatten(1).norm(dim=1).mean()
    total = cfg.alpha * ce + (1 - cfg.alpha) * kl + cfg.beta * feat
    return total, {"l_ce": ce, "l_kl": kl, "l_feat": feat, "total": total}


# ------------------------------------------------------------------------- loop


@dataclass
class RemovalTrace:
    rows: list = field(default_factory=list)

    def fidelity_curve(self) -> list[tuple[int, float]]:
        return [(r["iter"], r["fidelity"]) for r in self.rows if r.get("fidelity") is not None]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, extrasaction="ignore")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: ("" if r.get(k) is None else r[k]) for k in TRACE_FIELDS})

    @classmethod
    def from_csv(cls, path) -> "RemovalTrace":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append({k: (int(v) if k == "iter" else (None if v == "" else float(v))) for k, v in r.items()})
        return cls(rows)


def _latest_checkpoint(run_dir: Path) -> Optional[tuple[int, Path]]:
    found = []
    for p in run_dir.glob("ckpt_*"):
        if (p / "state.pt").is_file() and is_checkpoint(p):
            try:
                found.append((int(p.name.split("_", 1)[1]), p))
            except ValueError:
                continue
    return max(found) if found else None


def run_removal(victim: LayeredModel, substitute: LabeledSet, cfg: RemovalConfig,
                eval_set: Optional[LabeledSet] = None, run_dir=None) -> tuple[LayeredModel, RemovalTrace]:
    """Derive a surrogate from ``victim`` using only ``substitute`` inputs.

    The substitute labels are never used; supervision comes from the
    victim's predictions. With ``run_dir`` set, the trace and a resumable
    checkpoint are written every ``cfg.checkpoint_every`` iterations and an
    interrupted run picks up from the latest one.
    """
    if len(substitute) == 0:
        raise ValueError("substitute set is empty")
    l = victim.check_split(cfg.split_layer)
    victim.eval()
    surrogate = clone_model(victim)
    surrogate.info = {**victim.info, "role": "surrogate", "removal": str(asdict(cfg))}
    opt = torch.optim.SGD(surrogate.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    batch_gen = torch.Generator().manual_seed(cfg.seed)
    shuffle_gen = torch.Generator().manual_seed(cfg.seed + 1)
    trace = RemovalTrace()
    start = 0
    run_dir = Path(run_dir) if run_dir is not None else None

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        latest = _latest_checkpoint(run_dir)
        if latest is not None:
            start, path = latest
            surrogate.load_state_dict(load_checkpoint(path).state_dict())
            state = torch.load(path / "state.pt", weights_only=False)
            opt.load_state_dict(state["optimizer"])
            shuffle_gen.set_state(state["shuffle_gen"])
            trace = RemovalTrace(state["trace"])
            logger.info("resuming removal from iteration %d", start)

    def fidelity():
        return evaluate_accuracy(surrogate, eval_set) if eval_set is not None else None

    if start == 0:
        trace.rows.append({"iter": 0, "fidelity": fidelity()})
    batches = iterate_minibatches(len(substitute), cfg.batch_size, batch_gen)

    def draw():
        idx = next(batches)
        return idx if len(idx) >= 2 else next(batches)

    # a resumed run replays the batch stream up to its checkpoint
    for _ in range(start):
        draw()

    for it in range(start + 1, cfg.iterations + 1):
        x = substitute.x[draw()]
        surrogate.eval()
        z1 = reverse_latent(victim, surrogate, x, cfg, shuffle_gen, iteration=it)
        with torch.no_grad():
            z2 = ilbs_from_logits(victim.suffix(z1.source, l), cfg.lambda_grid)
        surrogate.train()
        latent = surrogate.prefix(x, l)
        out = surrogate.suffix(latent, l)
        loss, parts = removal_loss(out, z2, latent, z1, cfg)
        if not torch.isfinite(loss):
            raise RemovalError("non-finite removal loss", iteration=it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        surrogate.eval()
        row = {"iter": it, **{k: float(v.detach()) for k, v in parts.items()},
               "fallbacks": int(z1.fallback.sum())}
        row["fidelity"] = fidelity() if it % cfg.fidelity_every == 0 or it == cfg.iterations else None
        trace.rows.append(row)
        if run_dir is not None and (it % cfg.checkpoint_every == 0 or it == cfg.iterations):
            ck = run_dir / f"ckpt_{it}"
            save_checkpoint(surrogate, ck, role="surrogate", iteration=it)
            torch.save({"optimizer": opt.state_dict(), "shuffle_gen": shuffle_gen.get_state(), "trace": trace.rows}, ck / "state.pt")
            trace.to_csv(run_dir / "trace.csv")
    surrogate.eval()
    return surrogate, trace
