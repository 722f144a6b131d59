"""Metric tests. Brute-force oracles below are plain-Python loops over the defining formulas."""

import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from fpkit.errors import MetricInapplicableError
from fpkit.metrics import (SIMILARITY, ActivationProfile, ddv_similarity, fit_linear_surrogate, lad, lod,
                           matching_rate, rob_and_robd, segment_map, zest_distance)
from fpkit.nnkit import LabeledSet, LayeredModel, build_model


class FixedOutputs(LayeredModel):
    """Model whose split-layer output and logits are looked up per probe index.

    Probes are tensors of shape (n, 1) holding the probe index.
    """

    def __init__(self, latents, logits):
        super().__init__("smallmlp", [{"kind": "dense", "in": 1, "out": 1}] * 3, len(logits[0]), (1,))
        self.table_latent = torch.as_tensor(latents, dtype=torch.float64)
        self.table_logits = torch.as_tensor(logits, dtype=torch.float64)

    def prefix(self, x, l=None):
        return self.table_latent[x[:, 0].long()]

    def suffix(self, z, l=None):
        raise NotImplementedError

    def forward(self, x):
        return self.table_logits[x[:, 0].long()]


def index_probes(n):
    return torch.arange(n, dtype=torch.float32)[:, None]


# ---------------------------------------------------------------- brute-force oracles


def oracle_lod(lat_v, lat_s, p=2):
    total = 0.0
    for a, b in zip(lat_v, lat_s):
        total += sum(abs(x - y) ** p for x, y in zip(a, b)) ** (1 / p)
    return total / len(lat_v)


def oracle_lad(lat_v, lat_s, threshold=0.0):
    n_fp, n_l = len(lat_v), len(lat_v[0])
    count = 0
    for j in range(n_l):
        for i in range(n_fp):
            count += abs(int(lat_v[i][j] > threshold) - int(lat_s[i][j] > threshold))
    return count / (n_l * n_fp)


def oracle_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    return [v / sum(e) for v in e]


def oracle_ddv(logits_v, logits_s):
    def ddv(logits):
        probs = [oracle_softmax(r) for r in logits]
        return [math.sqrt(sum((a - b) ** 2 for a, b in zip(probs[i], probs[j])))
                for i in range(len(probs)) for j in range(i + 1, len(probs))]

    a, b = ddv(logits_v), ddv(logits_s)
    na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(y * y for y in b))
    if na < 1e-9 or nb < 1e-9:
        return None
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def oracle_mr(logits_v, logits_s):
    def argmax(r):
        return max(range(len(r)), key=lambda k: r[k])

    return sum(argmax(a) == argmax(b) for a, b in zip(logits_v, logits_s)) / len(logits_v)


small_tables = st.integers(min_value=2, max_value=8).flatmap(
    lambda n: st.tuples(
        st.lists(st.lists(st.floats(-3, 3), min_size=5, max_size=5), min_size=n, max_size=n),
        st.lists(st.lists(st.floats(-3, 3), min_size=5, max_size=5), min_size=n, max_size=n),
        st.lists(st.lists(st.floats(-4, 4), min_size=4, max_size=4), min_size=n, max_size=n),
        st.lists(st.lists(st.floats(-4, 4), min_size=4, max_size=4), min_size=n, max_size=n),
    ))


@settings(max_examples=60, deadline=None)
@given(small_tables)
def test_metrics_match_brute_force(tables):
    lat_v, lat_s, log_v, log_s = tables
    v, s = FixedOutputs(lat_v, log_v), FixedOutputs(lat_s, log_s)
    probes = index_probes(len(lat_v))
    assert lod(v, s, probes).value == pytest.approx(oracle_lod(lat_v, lat_s), abs=1e-6)
    assert lod(v, s, probes, p=1).value == pytest.approx(oracle_lod(lat_v, lat_s, p=1), abs=1e-6)
    assert lad(v, s, probes).value == pytest.approx(oracle_lad(lat_v, lat_s), abs=1e-6)
    assert matching_rate(v, s, probes).value == pytest.approx(oracle_mr(log_v, log_s), abs=1e-6)
    ddv_expected = oracle_ddv(log_v, log_s)
    if ddv_expected is not None:
        assert ddv_similarity(v, s, probes).value == pytest.approx(ddv_expected, abs=1e-6)


def test_lod_unit_vectors():
    v = FixedOutputs([[1.0, 0.0]], [[1.0, 0.0]])
    s = FixedOutputs([[0.0, 1.0]], [[1.0, 0.0]])
    assert lod(v, s, index_probes(1)).value == pytest.approx(math.sqrt(2), abs=1e-12)


def test_lad_single_disagreement():
    # 2 neurons x 2 probes, exactly one differing cell
    v = FixedOutputs([[1.0, 1.0], [1.0, -1.0]], [[0, 1], [0, 1]])
    s = FixedOutputs([[1.0, 1.0], [1.0, 1.0]], [[0, 1], [0, 1]])
    assert lad(v, s, index_probes(2)).value == 0.25


def test_lad_all_flipped():
    v = FixedOutputs([[1.0, 2.0], [3.0, 4.0]], [[0, 1], [0, 1]])
    s = FixedOutputs([[-1.0, -2.0], [-3.0, -4.0]], [[0, 1], [0, 1]])
    assert lad(v, s, index_probes(2)).value == 1.0


def test_ddv_three_probes_by_hand():
    log_v = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0]]
    log_s = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.5], [0.5, 0.0, 1.0]]
    got = ddv_similarity(FixedOutputs([[0]] * 3, log_v), FixedOutputs([[0]] * 3, log_s), index_probes(3))
    assert got.value == pytest.approx(oracle_ddv(log_v, log_s), abs=1e-12)
    assert got.direction == SIMILARITY


def test_ddv_needs_two_probes():
    m = FixedOutputs([[0.0]], [[1.0, 0.0]])
    with pytest.raises(ValueError):
        ddv_similarity(m, m, index_probes(1))


def test_mr_cyclic_label_shift():
    logits = torch.eye(4) * 5
    shifted = torch.roll(logits, 1, dims=1)
    v, s = FixedOutputs([[0]] * 4, logits), FixedOutputs([[0]] * 4, shifted)
    assert matching_rate(v, s, index_probes(4)).value == 0.0


def test_mr_empty():
    m = FixedOutputs([[0.0]], [[1.0, 0.0]])
    with pytest.raises(ValueError):
        matching_rate(m, m, torch.empty(0, 1))


# ------------------------------------------------------------------- real models


@pytest.fixture(scope="module")
def pair():
    return build_model("smallcnn", 1), build_model("smallcnn", 2)


@pytest.fixture(scope="module")
def probes():
    return torch.rand(12, 1, 28, 28, generator=torch.Generator().manual_seed(3))


def all_metrics(a, b, probes):
    return {
        "lod": lod(a, b, probes).value,
        "lad": lad(a, b, probes).value,
        "zest_l2": zest_distance(a, b, probes[:4], "l2", n_masks=30).value,
        "zest_cosine": zest_distance(a, b, probes[:4], "cosine", n_masks=30).value,
        "ddv": ddv_similarity(a, b, probes).value,
        "mr": matching_rate(a, b, probes).value,
    }


def test_identity_axioms(pair, probes):
    got = all_metrics(pair[0], pair[0], probes)
    for name in ("lod", "lad", "zest_l2", "zest_cosine"):
        assert abs(got[name]) <= 1e-9, name
    for name in ("ddv", "mr"):
        assert abs(got[name] - 1) <= 1e-9, name


def test_symmetry(pair, probes):
    ab = all_metrics(pair[0], pair[1], probes)
    ba = all_metrics(pair[1], pair[0], probes)
    for name in ab:
        assert ab[name] == pytest.approx(ba[name], abs=1e-12), name


def test_ranges(pair, probes):
    got = all_metrics(pair[0], pair[1], probes)
    assert 0 <= got["mr"] <= 1 and 0 <= got["lad"] <= 1
    assert -1 <= got["ddv"] <= 1


def test_white_box_requires_same_architecture(probes):
    with pytest.raises(MetricInapplicableError):
        lod(build_model("smallcnn", 0), build_model("smallmlp", 0), probes)
    with pytest.raises(MetricInapplicableError):
        lad(build_model("smallcnn", 0), build_model("smallmlp", 0), probes)


def test_lad_profile_layer(pair, probes):
    assert lad(pair[0], pair[1], probes, ActivationProfile(layer=2)).n_probes == 12


def test_zest_is_black_box_across_architectures(probes):
    d = zest_distance(build_model("smallcnn", 0), build_model("smallmlp", 0), probes[:3], n_masks=20)
    assert d.value > 0


def test_zest_surrogate_is_reproducible(pair, probes):
    a = fit_linear_surrogate(pair[0], probes[:3], n_masks=40, seed=9)
    b = fit_linear_surrogate(pair[0], probes[:3], n_masks=40, seed=9)
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.intercepts, b.intercepts)
    assert a.stacked().shape == (3, 16 * 10)


class Constant(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float32)

    def forward(self, x):
        return self.logits.expand(len(x), -1)


def test_zest_constant_models_differ_only_in_intercept(probes):
    c1, c2 = Constant([1.0, 0.0, 0.0]), Constant([0.0, 2.0, 0.0])
    s1 = fit_linear_surrogate(c1, probes[:2], n_masks=50)
    s2 = fit_linear_surrogate(c2, probes[:2], n_masks=50)
    assert np.abs(s1.weights).max() < 1e-12 and np.abs(s2.weights).max() < 1e-12
    assert not np.allclose(s1.intercepts, s2.intercepts)
    assert zest_distance(c1, c2, probes[:2], n_masks=50).value < 1e-12


def test_ridge_fit_matches_closed_form():
    from fpkit.metrics import ridge_fit

    rng = np.random.default_rng(0)
    x = rng.integers(0, 2, (50, 4)).astype(float)
    y = x @ np.array([[1.0], [-2.0], [0.5], [0.0]]) + 0.3
    w, b = ridge_fit(x, y, 0.0)
    assert np.allclose(w[:, 0], [1.0, -2.0, 0.5, 0.0], atol=1e-9)
    assert b[0] == pytest.approx(0.3, abs=1e-9)


def test_segment_map_is_4x4_grid():
    seg = segment_map(28, 28)
    assert seg.shape == (28, 28)
    assert sorted(np.unique(seg)) == list(range(16))
    assert np.all(np.bincount(seg.ravel()) == 49)


def test_rob_identity_and_range(pair, probes):
    adv = LabeledSet(probes, torch.arange(12) % 10)
    rob_v, rob_s, robd = rob_and_robd(pair[0], pair[0], adv)
    assert robd == 0 and 0 <= rob_v <= 1
    rob_v, rob_s, robd = rob_and_robd(pair[0], pair[1], adv)
    assert robd == abs(rob_v - rob_s) and 0 <= rob_s <= 1


def test_rob_empty(pair):
    with pytest.raises(ValueError):
        rob_and_robd(pair[0], pair[1], LabeledSet(torch.empty(0, 1, 28, 28), torch.empty(0, dtype=torch.long)))


def test_report_row():
    v = FixedOutputs([[1.0], [3.0]], [[0, 1], [0, 1]])
    s = FixedOutputs([[0.0], [0.0]], [[0, 1], [0, 1]])
    row = lod(v, s, index_probes(2)).row()
    assert set(row) == {"metric", "value", "std", "direction", "n_probes"}
    assert row["value"] == 2.0 and row["std"] == pytest.approx(np.std([1.0, 3.0], ddof=1))
