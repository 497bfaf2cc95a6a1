import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from asmaml.backbone import BackboneConfig, init_backbone_params
from asmaml.baselines import (
    discrete_labels,
    finetune_accuracy,
    graphlet_distribution,
    graphlet_kernel,
    graphlet_kernel_matrix,
    kernel_episode_accuracy,
    kernel_prototype_distances,
    normalized_gram,
    pretrain_backbone,
    proto_accuracy,
    prototypical_predict_embedding,
    prototypical_predict_kernel,
    sp_features,
    sp_kernel,
    sp_kernel_matrix,
    wl_kernel,
    wl_kernel_matrix,
)
from asmaml.graphs import Dataset, Episode
from asmaml.synthetic import make_family_dataset
from conftest import make_graph, random_graph
from oracles import bfs_lengths, triple_histogram

TRIANGLE = make_graph(3, [(0, 1), (1, 2), (0, 2)])
PATH3 = make_graph(3, [(0, 1), (1, 2)])


def labelled(g, labels):
    return make_graph(g.node_count, g.edges, g.features, labels=np.asarray(labels))


def test_wl_triangle_vs_path():
    # uniform labels, h=1 features: triangle {init:3, A:3}; path {init:3, A:1, B:2}
    k = wl_kernel(labelled(TRIANGLE, [0, 0, 0]), labelled(PATH3, [0, 0, 0]), iterations=1)
    assert k == pytest.approx(12 / math.sqrt(18 * 14), abs=1e-15)


def test_wl_zero_iterations_is_label_histogram():
    a = labelled(PATH3, [0, 0, 1])
    b = labelled(TRIANGLE, [1, 1, 1])
    assert wl_kernel(a, b, iterations=0) == pytest.approx(3 / math.sqrt(5 * 9), abs=1e-15)


def test_sp_triangle_vs_path():
    assert sp_features(PATH3) == {1: 2, 2: 1}
    assert sp_features(TRIANGLE) == {1: 3}
    assert sp_kernel(TRIANGLE, PATH3) == pytest.approx(6 / math.sqrt(9 * 5), abs=1e-15)


def test_sp_caps_long_paths():
    long_path = make_graph(14, [(i, i + 1) for i in range(13)])
    feats = sp_features(long_path, max_length=10)
    assert max(feats) == 10
    assert feats[10] == sum(14 - d for d in range(10, 14))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_sp_matches_bfs_oracle(n, seed):
    g = random_graph(np.random.default_rng(seed), n, p=0.3)
    assert dict(sp_features(g, max_length=100)) == bfs_lengths(n, g.edges.tolist())


def test_empty_histogram_conventions():
    one = make_graph(1, [])
    assert sp_kernel(one, one) == 1.0
    assert sp_kernel(one, PATH3) == 0.0
    assert normalized_gram(np.array([[0, 0], [0, 4]])).tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_graphlet_examples():
    empty3 = make_graph(3, [])
    rng = np.random.default_rng(0)
    assert graphlet_distribution(TRIANGLE, 10, rng).tolist() == [0, 0, 0, 1]
    assert graphlet_kernel(TRIANGLE, TRIANGLE) == 1.0
    assert graphlet_kernel(TRIANGLE, empty3) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 12), st.integers(0, 10_000))
def test_graphlet_exact_matches_enumeration(n, seed):
    g = random_graph(np.random.default_rng(seed), n)
    hist = triple_histogram(n, g.edges.tolist())
    got = graphlet_distribution(g, 10, np.random.default_rng(0))
    assert np.allclose(got, hist / hist.sum(), atol=1e-15)


def test_graphlet_sampling_close_to_exact():
    rng = np.random.default_rng(5)
    for _ in range(5):
        g = random_graph(rng, 8, p=0.5)
        exact = graphlet_distribution(g, 0, rng)
        sampled = graphlet_distribution(g, 10_000, rng, exact_limit=0)
        assert 0.5 * np.abs(exact - sampled).sum() < 0.05


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_kernel_matrix_properties(seed):
    rng = np.random.default_rng(seed)
    graphs = [random_graph(rng, int(rng.integers(1, 8))) for _ in range(6)]
    for gram in (wl_kernel_matrix(graphs), sp_kernel_matrix(graphs), graphlet_kernel_matrix(graphs)):
        assert np.array_equal(gram, gram.T)
        assert np.abs(np.diag(gram) - 1.0).max() <= 1e-12
        assert gram.min() >= 0.0 and gram.max() <= 1.0 + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_wl_sp_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    g = labelled(random_graph(rng, n), rng.integers(0, 3, n))
    h = labelled(random_graph(rng, n), rng.integers(0, 3, n))
    perm = rng.permutation(n)
    gp = g.permuted(perm)
    gp = labelled(gp, np.asarray(g.node_labels)[np.argsort(perm)])
    assert wl_kernel(gp, h) == wl_kernel(g, h)
    assert sp_kernel(gp, h) == sp_kernel(g, h)


def test_discrete_labels_fall_back_to_degree():
    assert discrete_labels([PATH3, TRIANGLE])[0].tolist() == [1, 2, 1]
    mixed = [labelled(PATH3, [4, 5, 6]), TRIANGLE]
    assert discrete_labels(mixed)[1].tolist() == [2, 2, 2]
    assert discrete_labels([labelled(PATH3, [4, 5, 6])])[0].tolist() == [4, 5, 6]


# --- prototypical classifier ------------------------------------------------


def test_kernel_distances_hand_computed():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 3))
    gram = x @ x.T  # linear kernel, so distances are Euclidean
    s, q = x[:4], x[4:]
    y = [0, 0, 1, 1]
    dist = kernel_prototype_distances(np.diag(gram)[4:], gram[4:, :4], gram[:4, :4], y, 2)
    protos = np.stack([s[:2].mean(0), s[2:].mean(0)])
    expected = ((q[:, None] - protos[None]) ** 2).sum(-1)
    assert np.allclose(dist, expected, atol=1e-12)
    pred = prototypical_predict_embedding(s, y, q, 2)
    assert pred.labels.tolist() == prototypical_predict_kernel(
        np.diag(gram)[4:], gram[4:, :4], gram[:4, :4], y, 2).labels.tolist()


def test_identical_query_predicts_its_class():
    k_ss = np.eye(3)
    k_qs = np.array([[1.0, 0.0, 0.0]])
    assert prototypical_predict_kernel([1.0], k_qs, k_ss, [0, 1, 2], 3).labels.tolist() == [0]


def test_one_shot_is_nearest_neighbour():
    rng = np.random.default_rng(0)
    s = rng.standard_normal((4, 5))
    q = rng.standard_normal((10, 5))
    pred = prototypical_predict_embedding(s, [0, 1, 2, 3], q, 4)
    nn = np.argmin(((q[:, None] - s[None]) ** 2).sum(-1), axis=1)
    assert pred.labels.tolist() == nn.tolist()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_embedding_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((6, 3))
    q = rng.standard_normal((5, 3))
    y = [0, 0, 1, 1, 2, 2]
    a = prototypical_predict_embedding(s, y, q, 3).labels
    b = prototypical_predict_embedding(scale * s, y, scale * q, 3).labels
    assert a.tolist() == b.tolist()


def test_kernel_episode_accuracy_on_easy_pair():
    # cliques vs paths: WL separates them perfectly
    ds = make_family_dataset(per_family=10, seed=0, families=("clique", "path"))
    support = tuple((g, g.class_id) for g in ds.graphs[:3] + ds.graphs[10:13])
    query = tuple((g, g.class_id) for g in ds.graphs[3:6] + ds.graphs[13:16])
    ep = Episode(2, 3, 3, support, query, (0, 1))
    assert kernel_episode_accuracy("wl", ep) == 1.0
    assert kernel_episode_accuracy("sp", ep) == 1.0


# --- supervised backbone baselines ------------------------------------------


def separable_episode():
    ds = make_family_dataset(per_family=12, seed=1, families=("star", "clique"))
    support = tuple((g, g.class_id) for g in ds.graphs[:5] + ds.graphs[12:17])
    query = tuple((g, g.class_id) for g in ds.graphs[5:12] + ds.graphs[17:24])
    return Episode(2, 5, 7, support, query, (0, 1))


def test_finetune_learns_separable_head():
    cfg = BackboneConfig(layer_count=2, hidden_dim=16, conv_activation="relu")
    params = init_backbone_params(6, 2, cfg, seed=0)
    assert finetune_accuracy(params, separable_episode(), cfg, steps=300, lr=0.5) == 1.0


def test_zero_finetune_steps_is_chance():
    cfg = BackboneConfig(layer_count=1, hidden_dim=8)
    ep = separable_episode()
    accs = [finetune_accuracy(init_backbone_params(6, 2, cfg, s), ep, cfg, steps=0, seed=s) for s in range(40)]
    assert 0.3 < np.mean(accs) < 0.7


def test_finetune_leaves_backbone_untouched():
    cfg = BackboneConfig(layer_count=1, hidden_dim=8)
    params = init_backbone_params(6, 2, cfg, seed=0)
    before = {k: v.clone() for k, v in params.items()}
    finetune_accuracy(params, separable_episode(), cfg, steps=5)
    assert all(torch.equal(before[k], params[k]) for k in params)


def test_proto_accuracy_uses_embeddings():
    from asmaml.backbone import embed_graph

    cfg = BackboneConfig(layer_count=2, hidden_dim=16, conv_activation="relu")
    params = init_backbone_params(6, 2, cfg, seed=0)
    ep = separable_episode()

    def z(graphs):
        return np.stack([embed_graph(g, params, cfg)[0].detach().numpy() for g in graphs])

    pred = prototypical_predict_embedding(z(ep.support_graphs), ep.support_labels, z(ep.query_graphs), 2,
                                          ep.query_labels)
    assert proto_accuracy(params, ep, cfg) == pred.accuracy


def test_pretrain_reduces_loss():
    ds = make_family_dataset(per_family=10, seed=0, families=("cycle", "star", "clique"))
    cfg = BackboneConfig(layer_count=2, hidden_dim=8, conv_activation="relu")
    p = pretrain_backbone(ds, cfg, steps=60, lr=0.1, batch_size=15, seed=0)
    assert p["cls.out.weight"].shape == (16, 3)
    from asmaml.backbone import GraphBatch, as_labels, episode_forward

    batch = GraphBatch.from_graphs(list(ds.graphs))
    labels = as_labels([g.class_id for g in ds.graphs])
    init = init_backbone_params(6, 3, cfg, 0)
    assert episode_forward(batch, labels, p, cfg).loss < episode_forward(batch, labels, init, cfg).loss
    assert isinstance(ds, Dataset)
