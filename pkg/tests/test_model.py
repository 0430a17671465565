import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xprotonet.exceptions import ConfigError, ProjectionError, PruningError
from xprotonet.model import (
    bbox_pooled_feature,
    PrototypeNet,
    build_model,
    cosine_similarity,
    pool_feature,
    predict_class_score,
    project_prototypes,
    prune_prototypes,
    set_deterministic,
    zero_norm_mask,
)

from .conftest import tiny_config


def loop_pool(F, M):
    D, H, W = F.shape
    out = np.zeros(D)
    for u in range(H * W):
        i, j = divmod(u, W)
        for d in range(D):
            out[d] += M[i, j] * F[d, i, j]
    return out


# -- pool_feature


def test_pool_zero_map_gives_zero_vector(rng):
    F = torch.from_numpy(rng.normal(size=(5, 3, 3)))
    assert torch.equal(pool_feature(F, torch.zeros(3, 3, dtype=torch.float64)), torch.zeros(5, dtype=torch.float64))


def test_pool_one_hot_selects_cell(rng):
    F = torch.from_numpy(rng.normal(size=(5, 3, 3)))
    M = torch.zeros(3, 3, dtype=torch.float64)
    M[1, 2] = 1
    assert torch.equal(pool_feature(F, M), F[:, 1, 2])


def test_pool_constant_vector_half_map():
    v = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
    F = v.view(3, 1, 1).expand(3, 2, 2)
    out = pool_feature(F, torch.full((2, 2), 0.5, dtype=torch.float64))
    torch.testing.assert_close(out, 2 * v, rtol=0, atol=1e-12)


def test_pool_matches_double_loop(rng):
    for _ in range(100):
        F = rng.normal(size=(8, 4, 4))
        M = rng.uniform(size=(4, 4))
        got = pool_feature(torch.from_numpy(F), torch.from_numpy(M)).numpy()
        np.testing.assert_allclose(got, loop_pool(F, M), rtol=0, atol=1e-10)


def test_pool_grid_mismatch():
    with pytest.raises(ConfigError):
        pool_feature(torch.zeros(2, 3, 3), torch.zeros(2, 2))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (3, 3), elements=st.floats(0, 0.5)),
       arrays(np.float64, (3, 3), elements=st.floats(0, 0.5)))
def test_pool_linearity(F, M1, M2):
    F, M1, M2 = map(torch.from_numpy, (F, M1, M2))
    torch.testing.assert_close(pool_feature(F, M1 + M2), pool_feature(F, M1) + pool_feature(F, M2),
                               rtol=0, atol=1e-6)


# -- bbox pooling


def test_bbox_pool_whole_grid_equals_pool(rng):
    F = torch.from_numpy(rng.normal(size=(6, 4, 4)))
    M = torch.from_numpy(rng.uniform(size=(4, 4)))
    assert torch.equal(bbox_pooled_feature(F, M, torch.ones(4, 4, dtype=torch.bool)), pool_feature(F, M))


def test_bbox_pool_single_cell(rng):
    F = torch.from_numpy(rng.normal(size=(6, 4, 4)))
    M = torch.from_numpy(rng.uniform(size=(4, 4)))
    M[2, 1] = 1.0
    mask = torch.zeros(4, 4, dtype=torch.bool)
    mask[2, 1] = True
    assert torch.equal(bbox_pooled_feature(F, M, mask), F[:, 2, 1])


def test_bbox_pool_matches_masked_loop(rng):
    for _ in range(100):
        F = rng.normal(size=(8, 4, 4))
        M = rng.uniform(size=(4, 4))
        mask = rng.uniform(size=(4, 4)) < 0.5
        mask[rng.integers(4), rng.integers(4)] = True
        got = bbox_pooled_feature(torch.from_numpy(F), torch.from_numpy(M), torch.from_numpy(mask)).numpy()
        np.testing.assert_allclose(got, loop_pool(F, M * mask), rtol=0, atol=1e-10)


def test_bbox_pool_empty_mask_rejected():
    with pytest.raises(ConfigError):
        bbox_pooled_feature(torch.zeros(2, 2, 2), torch.ones(2, 2), torch.zeros(2, 2, dtype=torch.bool))


# -- cosine similarity


@pytest.mark.parametrize("f,p,expected", [
    ((1.0, 0.0), (2.0, 0.0), 1.0),
    ((1.0, 0.0), (0.0, 3.0), 0.0),
    ((1.0, 1.0), (1.0, 0.0), 1 / math.sqrt(2)),
])
def test_cosine_examples(f, p, expected):
    got = cosine_similarity(torch.tensor(f, dtype=torch.float64), torch.tensor(p, dtype=torch.float64))
    assert abs(float(got) - expected) <= 1e-8


def test_cosine_zero_norm_is_zero_and_flagged():
    f = torch.zeros(3, dtype=torch.float64)
    assert float(cosine_similarity(f, torch.ones(3, dtype=torch.float64))) == 0.0
    assert bool(zero_norm_mask(f))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-10, 10)),
       arrays(np.float64, 6, elements=st.floats(-10, 10)),
       st.floats(1e-3, 1e3))
def test_cosine_scale_invariance_and_range(f, p, alpha):
    f, p = torch.from_numpy(f), torch.from_numpy(p)
    if f.norm() < 1e-3 or p.norm() < 1e-3:
        return
    s = cosine_similarity(f, p)
    assert -1 - 1e-12 <= float(s) <= 1 + 1e-12
    assert abs(float(cosine_similarity(alpha * f, p)) - float(s)) <= 1e-6


# -- class score


@pytest.mark.parametrize("s,w,expected", [
    ((0, 0, 0), (1, 1, 1), 0.5),
    ((1, 1, 1), (1, 1, 1), 0.95257413),
    ((1, 0.5), (2, 1), 0.92414182),
])
def test_class_score_examples(s, w, expected):
    got = predict_class_score(torch.tensor(s, dtype=torch.float64), torch.tensor(w, dtype=torch.float64))
    # independent evaluation of the logistic function
    assert abs(float(got) - 1 / (1 + math.exp(-sum(a * b for a, b in zip(s, w))))) <= 1e-12
    assert abs(float(got) - expected) <= 1e-8


def test_class_score_requires_active_prototype():
    with pytest.raises(PruningError):
        predict_class_score(torch.ones(2), torch.ones(2), torch.zeros(2, dtype=torch.bool))


# -- network pieces


def test_feature_map_shape_and_determinism(tiny_model):
    x = torch.randn(3, 1, 16, 16)
    F1 = tiny_model.extract_feature_map(x)
    F2 = tiny_model.extract_feature_map(x)
    assert F1.shape == (3, 8, 4, 4)
    assert torch.equal(F1, F2)


def test_input_shape_mismatch(tiny_model):
    with pytest.raises(ConfigError):
        tiny_model(torch.zeros(1, 1, 12, 16))


def test_zero_network_zero_image_gives_zero_features():
    m = build_model(tiny_config())
    with torch.no_grad():
        for p in m.backbone.parameters():
            p.zero_()
        for layer in m.feature_module:
            if hasattr(layer, "bias"):
                layer.bias.zero_()
    F = m.extract_feature_map(torch.zeros(2, 1, 16, 16))
    assert torch.equal(F, torch.zeros_like(F))


def test_occurrence_maps_in_unit_interval(tiny_model):
    out = tiny_model(torch.randn(4, 1, 16, 16) * 10)
    assert out.occurrence_maps.min() >= 0 and out.occurrence_maps.max() <= 1


def test_occurrence_saturates_with_large_bias():
    m = build_model(tiny_config()).double()
    last = m.occurrence_module[0][2]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.fill_(50.0)
    maps = m(torch.randn(2, 1, 16, 16, dtype=torch.float64)).occurrence_maps
    assert float(maps.detach().min()) >= 1 - 1e-9


def test_occurrence_zero_preactivation_is_half():
    m = build_model(tiny_config())
    last = m.occurrence_module[0][2]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
    maps = m(torch.randn(2, 1, 16, 16)).occurrence_maps
    assert torch.equal(maps, torch.full_like(maps, 0.5))


def test_forward_internal_consistency(tiny_model64):
    m = tiny_model64
    out = m(torch.randn(5, 1, 16, 16, dtype=torch.float64))
    probs = predict_class_score(out.similarities, m.head.detach(), m.active)
    torch.testing.assert_close(probs, out.probabilities, rtol=0, atol=1e-6)
    assert out.similarities.abs().max() <= 1
    assert ((out.probabilities > 0) & (out.probabilities < 1)).all()
    for b in range(5):
        for c in range(2):
            for k in range(2):
                ext = pool_feature(out.feature_map[b], out.occurrence_maps[b, c, k])
                torch.testing.assert_close(out.pooled_features[b, c, k], ext, rtol=0, atol=1e-6)


# -- projection


def _labels(n, c=2):
    y = np.zeros((n, c), dtype=int)
    y[:, :] = 1
    return y


def test_projection_makes_prototypes_equal_provenance(tiny_model):
    x = torch.randn(6, 1, 16, 16)
    bank = project_prototypes(tiny_model, x, _labels(6), [f"im{i}" for i in range(6)])
    for (c, k), rec in bank.provenance.items():
        np.testing.assert_array_equal(bank.vectors[c, k], rec.pooled)
        sim = cosine_similarity(torch.from_numpy(bank.vectors[c, k]), torch.from_numpy(rec.pooled))
        assert abs(float(sim) - 1) <= 1e-6


def test_projection_singleton_candidate(tiny_model):
    x = torch.randn(1, 1, 16, 16)
    project_prototypes(tiny_model, x, _labels(1))
    pooled = tiny_model(x).pooled_features[0]
    assert torch.equal(tiny_model.prototypes.detach(), pooled.detach())


class TablePooling(PrototypeNet):
    """Stub whose pooled vectors are looked up by the image's first pixel."""

    def __init__(self, table):
        super().__init__(tiny_config(num_classes=1, prototypes_per_class=1, feature_dim=table.shape[-1]))
        self.table = table  # (N, C, K, D)
        self.feature_module = torch.nn.Identity()

    def backbone_features(self, x):
        return x

    def prototype_features(self, feature_map, backbone_out, bbox_masks=None):
        pooled = self.table[feature_map[:, 0, 0, 0].long()]
        return pooled, None, cosine_similarity(pooled, self.prototypes.unsqueeze(0))

    def footprint_maps(self, feature_map, backbone_out):
        return torch.ones(len(feature_map), 1, 1, 4, 4)


def test_projection_chooses_most_similar_candidate():
    a = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
    b = torch.tensor([0.0, 2.0, 0.0], dtype=torch.float64)
    net = TablePooling(torch.stack([a, b]).view(2, 1, 1, 3)).double()
    with torch.no_grad():
        net.prototypes[0, 0] = torch.tensor([0.3, 0.8, math.sqrt(1 - 0.73)], dtype=torch.float64)
    sims = [float(cosine_similarity(v, net.prototypes[0, 0].detach())) for v in (a, b)]
    assert sims == pytest.approx([0.3, 0.8], abs=1e-12)
    best = max(range(2), key=lambda i: sims[i])  # brute-force argmax
    x = torch.arange(2, dtype=torch.float64).view(2, 1, 1, 1).expand(2, 1, 16, 16)
    project_prototypes(net, x, np.ones((2, 1)), ["low", "high"])
    assert torch.equal(net.prototypes[0, 0].detach(), (a, b)[best])
    assert net.provenance[(0, 0)].image_id == "high"


def test_projection_idempotent(tiny_model):
    x = torch.randn(8, 1, 16, 16)
    y = np.random.default_rng(0).integers(0, 2, size=(8, 2))
    y[0] = 1
    b1 = project_prototypes(tiny_model, x, y)
    b2 = project_prototypes(tiny_model, x, y)
    np.testing.assert_array_equal(b1.vectors, b2.vectors)


def test_projection_only_uses_positives(tiny_model):
    x = torch.randn(4, 1, 16, 16)
    y = np.array([[1, 0], [0, 1], [1, 0], [0, 1]])
    bank = project_prototypes(tiny_model, x, y, ["a", "b", "c", "d"])
    for (c, k), rec in bank.provenance.items():
        assert rec.image_id in ({"a", "c"} if c == 0 else {"b", "d"})


def test_projection_missing_class_warns_and_keeps(tiny_model):
    before = tiny_model.prototypes.detach().clone()
    with pytest.warns(UserWarning):
        project_prototypes(tiny_model, torch.randn(2, 1, 16, 16), np.array([[1, 0], [1, 0]]))
    assert torch.equal(tiny_model.prototypes[1].detach(), before[1])


def test_projection_empty_candidates(tiny_model):
    with pytest.raises(ProjectionError):
        project_prototypes(tiny_model, torch.zeros(0, 1, 16, 16), np.zeros((0, 2)))


# -- pruning


def test_prune_rule_and_boundary():
    m = build_model(tiny_config(prototypes_per_class=3))
    with torch.no_grad():
        m.head.copy_(torch.tensor([[1.2, -0.3, 0.5], [0.0, 1.0, -1e-9]]))
    prune_prototypes(m)
    assert m.active.tolist() == [[True, False, True], [True, True, False]]
    assert (m.head[m.active] >= 0).all()


def test_prune_all_negative_names_class():
    m = build_model(tiny_config(), class_names=["Mass", "Nodule"])
    with torch.no_grad():
        m.head[1] = -1.0
    with pytest.raises(PruningError, match="Nodule"):
        prune_prototypes(m)
    assert m.active.all()


def test_prune_all_positive_leaves_scores_identical(tiny_model64):
    x = torch.randn(4, 1, 16, 16, dtype=torch.float64)
    before = tiny_model64(x).probabilities.detach()
    prune_prototypes(tiny_model64)
    after = tiny_model64(x).probabilities.detach()
    torch.testing.assert_close(after, before, rtol=0, atol=1e-9)


def test_deterministic_mode_bit_identical():
    set_deterministic(7)
    try:
        m1 = build_model(tiny_config(seed=7))
        m2 = build_model(tiny_config(seed=7))
        x = torch.randn(2, 1, 16, 16)
        assert torch.equal(m1(x).probabilities, m2(x).probabilities)
    finally:
        torch.use_deterministic_algorithms(False)
