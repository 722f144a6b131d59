import numpy as np
import pytest
import torch

from fpkit.errors import CheckpointError
from fpkit.nnkit import LabeledSet, build_model, predict_logits
from fpkit.probes import (AdvConfig, FingerprintSet, boundary_fingerprints, fgsm, logit_gap, pgd, random_probes,
                          select_substitute, zest_reference_set)


@pytest.fixture(scope="module")
def model():
    return build_model("smallcnn", 0)


@pytest.fixture(scope="module")
def batch():
    gen = torch.Generator().manual_seed(1)
    return LabeledSet(torch.rand(16, 1, 28, 28, generator=gen), torch.arange(16) % 10)


def test_epsilon_zero_is_identity(model, batch):
    out = pgd(model, batch, AdvConfig(epsilon=0.0, step_size=0.0, steps=3))
    assert torch.equal(out.x, batch.x)
    assert torch.equal(fgsm(model, batch, AdvConfig(epsilon=0.0, step_size=0.0)).x, batch.x)


def test_pgd_stays_in_ball_and_box(model, batch):
    cfg = AdvConfig(epsilon=0.1, step_size=0.04, steps=7)
    out = pgd(model, batch, cfg).x
    assert (out - batch.x).abs().max() <= cfg.epsilon + 1e-6
    assert out.min() >= 0 and out.max() <= 1


def test_pgd_single_full_step_equals_fgsm(model, batch):
    eps = 8 / 255
    a = pgd(model, batch, AdvConfig(epsilon=eps, step_size=eps, steps=1)).x
    b = fgsm(model, batch, AdvConfig(epsilon=eps, step_size=eps)).x
    assert torch.equal(a, b)


def test_pgd_increases_loss(trained_victim, mnist):
    clean = mnist.test.subset(range(200))
    adv = pgd(trained_victim, clean, AdvConfig(epsilon=0.2, step_size=0.02, steps=10))
    assert (predict_logits(trained_victim, adv.x).argmax(1) == adv.y).float().mean() < \
           (predict_logits(trained_victim, clean.x).argmax(1) == clean.y).float().mean()


@pytest.mark.parametrize("bad", [dict(epsilon=-0.1), dict(steps=0), dict(epsilon=0.1, step_size=0.2)])
def test_adv_config_validation(bad):
    with pytest.raises(ValueError):
        AdvConfig(**bad)


def test_empty_inputs(model):
    empty = LabeledSet(torch.empty(0, 1, 28, 28), torch.empty(0, dtype=torch.long))
    for fn in (fgsm, pgd):
        with pytest.raises(ValueError):
            fn(model, empty, AdvConfig())
    with pytest.raises(ValueError):
        boundary_fingerprints(model, empty, 5)


def test_boundary_fingerprints_sit_near_boundary(trained_victim, mnist):
    seeds = mnist.test.subset(range(60))
    fp = boundary_fingerprints(trained_victim, seeds, 40)
    assert fp.kind == "boundary" and 0 < fp.n_fp <= 40
    gaps = logit_gap(predict_logits(trained_victim, fp.samples))
    assert (gaps < 0.5).all()
    assert gaps.median() < 0.1
    assert torch.equal(predict_logits(trained_victim, fp.samples).argmax(1), fp.victim_labels)
    assert fp.meta["shortfall"] == 40 - fp.n_fp


def test_boundary_side_pre_keeps_original_label(trained_victim, mnist):
    seeds = mnist.test.subset(range(30))
    fp = boundary_fingerprints(trained_victim, seeds, 30, side="pre")
    original = predict_logits(trained_victim, seeds.x).argmax(1)
    assert set(fp.victim_labels.tolist()) <= set(original.tolist())
    with pytest.raises(ValueError):
        boundary_fingerprints(trained_victim, seeds, 3, side="middle")


def test_boundary_is_deterministic(trained_victim, mnist):
    seeds = mnist.test.subset(range(20))
    a = boundary_fingerprints(trained_victim, seeds, 10)
    b = boundary_fingerprints(trained_victim, seeds, 10)
    assert torch.equal(a.samples, b.samples)


def test_fingerprint_round_trip(tmp_path, model, batch):
    fp = random_probes(model, batch, 8, seed=3)
    fp.save(tmp_path / "fp")
    back = FingerprintSet.load(tmp_path / "fp")
    assert torch.equal(back.samples, fp.samples)
    assert torch.equal(back.victim_labels, fp.victim_labels)
    assert back.kind == "random-probe" and back.meta == {"seed": 3}


def test_fingerprint_truncated_labels(tmp_path, model, batch):
    random_probes(model, batch, 8, seed=3).save(tmp_path / "fp")
    (tmp_path / "fp" / "labels.bin").write_bytes(b"\0" * 8)
    with pytest.raises(CheckpointError):
        FingerprintSet.load(tmp_path / "fp")


def test_fingerprint_rejects_bad_kind():
    with pytest.raises(ValueError):
        FingerprintSet(torch.zeros(1, 2), torch.zeros(1, dtype=torch.long), "watermark")


def test_random_probes_deterministic(model, batch):
    assert torch.equal(random_probes(model, batch, 5, 9).samples, random_probes(model, batch, 5, 9).samples)


def test_reference_set_is_stratified(mnist):
    ref = zest_reference_set(mnist, 32, seed=0)
    counts = np.bincount(ref.y.numpy(), minlength=10)
    assert counts.sum() == 32 and counts.max() - counts.min() <= 1
    assert torch.equal(ref.x, zest_reference_set(mnist, 32, seed=0).x)


def test_reference_set_too_large(mnist):
    with pytest.raises(ValueError):
        zest_reference_set(mnist.test.subset(range(10)), 32, num_classes=10)


def test_substitute_selection(mnist):
    sub = select_substitute(mnist.train, 0.05, seed=1, num_classes=10)
    assert len(sub) == round(0.05 * len(mnist.train))
    counts = np.bincount(sub.y.numpy(), minlength=10)
    assert counts.max() - counts.min() <= 1
    with pytest.raises(ValueError):
        select_substitute(mnist.train, 1.5)
    with pytest.raises(ValueError):
        select_substitute(mnist.train, len(mnist.train) + 1)
