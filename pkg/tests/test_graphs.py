import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asmaml.errors import DataError, FormatError, IngestionError, SamplingError
from asmaml.graphs import (
    Dataset,
    SplitSpec,
    carve_validation,
    load_tu_dataset,
    sample_episode,
    split_by_class,
    write_tu_dataset,
)
from asmaml.synthetic import make_family_dataset
from conftest import make_graph, random_graph

TU_ROOT = os.environ.get("ASMAML_DATA_ROOT", "")


def test_toy_directory(toy_tu_dir):
    ds = load_tu_dataset(toy_tu_dir)
    assert [g.node_count for g in ds.graphs] == [2, 1]
    assert ds.graphs[0].edges.tolist() == [[0, 1]]
    assert ds.graphs[1].edge_count == 0
    # no attributes or labels: one constant column
    assert ds.feature_dim == 1
    assert ds.graphs[0].features.tolist() == [[1.0], [1.0]]
    # raw labels 5 and -1 remap densely in sorted order
    assert [g.class_id for g in ds.graphs] == [1, 0]


def test_node_labels_become_one_hot(toy_tu_dir):
    (toy_tu_dir / "TOY_node_labels.txt").write_text("7\n3\n7\n")
    ds = load_tu_dataset(toy_tu_dir)
    assert ds.feature_source == "labels"
    assert ds.graphs[0].features.tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert ds.graphs[1].node_labels.tolist() == [1]


def test_attributes_take_precedence(toy_tu_dir):
    (toy_tu_dir / "TOY_node_attributes.txt").write_text("0.5, 1.5\n-2, 3\n4, 4\n")
    (toy_tu_dir / "TOY_node_labels.txt").write_text("0\n1\n0\n")
    ds = load_tu_dataset(toy_tu_dir)
    assert ds.feature_dim == 2
    assert ds.graphs[0].features.tolist() == [[0.5, 1.5], [-2.0, 3.0]]
    assert ds.graphs[0].node_labels.tolist() == [0, 1]


def test_duplicate_edges_collapse(tmp_path):
    d = tmp_path / "D"
    d.mkdir()
    (d / "D_A.txt").write_text("1, 2\n2, 1\n1, 2\n2, 3\n")
    (d / "D_graph_indicator.txt").write_text("1\n1\n1\n")
    (d / "D_graph_labels.txt").write_text("0\n")
    g = load_tu_dataset(d).graphs[0]
    assert g.edges.tolist() == [[0, 1], [1, 2]]


def test_missing_file_is_named(toy_tu_dir):
    (toy_tu_dir / "TOY_graph_labels.txt").unlink()
    with pytest.raises(IngestionError, match="TOY_graph_labels.txt"):
        load_tu_dataset(toy_tu_dir)


def test_out_of_range_node_reports_line(toy_tu_dir):
    (toy_tu_dir / "TOY_A.txt").write_text("1, 2\n2, 9\n")
    with pytest.raises(FormatError, match="line 2"):
        load_tu_dataset(toy_tu_dir)


def test_cross_graph_edge_rejected(toy_tu_dir):
    (toy_tu_dir / "TOY_A.txt").write_text("1, 3\n")
    with pytest.raises(FormatError, match="different graphs"):
        load_tu_dataset(toy_tu_dir)


def test_graphdata_invariants():
    with pytest.raises(FormatError):
        make_graph(2, [(0, 2)])
    with pytest.raises(FormatError):
        make_graph(2, [(1, 1)])
    with pytest.raises(FormatError):
        make_graph(2, [], np.ones((3, 1)))
    with pytest.raises(FormatError):
        make_graph(1, [], [[np.nan]])
    g = make_graph(3, [(2, 0), (0, 2)])
    assert g.edges.tolist() == [[0, 2]]
    with pytest.raises(ValueError):
        g.features[0, 0] = 5.0


def _isomorphic_datasets(a: Dataset, b: Dataset) -> bool:
    if len(a) != len(b):
        return False
    for g, h in zip(a.graphs, b.graphs):
        if g.node_count != h.node_count or g.edges.tolist() != h.edges.tolist():
            return False
        if not np.array_equal(g.features, h.features):
            return False
    la = [g.class_id for g in a.graphs]
    lb = [g.class_id for g in b.graphs]
    # labels equal up to the dense relabelling done at load time
    return len(set(zip(la, lb))) == len(set(la)) == len(set(lb))


def test_round_trip_toy(toy_tu_dir, tmp_path):
    ds = load_tu_dataset(toy_tu_dir)
    out = write_tu_dataset(ds, tmp_path / "out", "TOY")
    assert _isomorphic_datasets(ds, load_tu_dataset(out))


def test_round_trip_labels_and_attributes(toy_tu_dir, tmp_path):
    (toy_tu_dir / "TOY_node_labels.txt").write_text("7\n3\n7\n")
    ds = load_tu_dataset(toy_tu_dir)
    back = load_tu_dataset(write_tu_dataset(ds, tmp_path / "o1", "TOY"))
    assert _isomorphic_datasets(ds, back)
    syn = make_family_dataset(per_family=5, seed=1)
    back = load_tu_dataset(write_tu_dataset(syn, tmp_path / "o2", "SYN"))
    assert _isomorphic_datasets(syn, back)


def test_split_examples(four_class_dataset):
    ds = four_class_dataset
    tr, va, te = split_by_class(ds, SplitSpec({0, 1}, {2}, {3}))
    assert (tr.classes, va.classes, te.classes) == ([0, 1], [2], [3])
    tr, va, te = split_by_class(ds, SplitSpec({0, 1, 2, 3}, set(), set()))
    assert len(tr) == len(ds) and len(va) == 0 and len(te) == 0
    with pytest.raises(DataError):
        split_by_class(ds, SplitSpec({0, 9}, set(), set()))
    with pytest.raises(DataError):
        SplitSpec({0, 1}, {1}, set())


def test_random_split_counts():
    spec = SplitSpec.random(range(96), (60, 16, 20), seed=4)
    assert (len(spec.train_classes), len(spec.val_classes), len(spec.test_classes)) == (60, 16, 20)
    assert spec == SplitSpec.random(range(96), (60, 16, 20), seed=4)


def test_split_text_round_trip():
    spec = SplitSpec({3, 1}, {2}, {0, 4})
    assert SplitSpec.parse(spec.format()) == spec
    assert SplitSpec.parse("train: 1, 2 # comment\n\ntest: 3\n") == SplitSpec({1, 2}, set(), {3})
    with pytest.raises(DataError):
        SplitSpec.parse("bogus: 1\n")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=0, max_size=4, unique=True), st.integers(0, 1000))
def test_split_is_partition(train_classes, seed):
    rng = np.random.default_rng(seed)
    graphs = [random_graph(rng, 3, class_id=c, graph_id=i) for i, c in enumerate(rng.integers(0, 4, 20))]
    ds = Dataset(tuple(graphs), 3)
    rest = [c for c in ds.classes if c not in train_classes]
    spec = SplitSpec(set(train_classes) & set(ds.classes), set(rest[:1]), set(rest[1:]))
    parts = split_by_class(ds, spec)
    ids = [g.graph_id for p in parts for g in p.graphs]
    assert sorted(ids) == list(range(20))


def test_carve_validation_keeps_classes(four_class_dataset):
    tr, va = carve_validation(four_class_dataset, 0.25, np.random.default_rng(0))
    assert tr.classes == va.classes == [0, 1, 2, 3]
    assert all(len(v) == 2 for v in va.class_index.values())
    assert {g.graph_id for g in tr.graphs}.isdisjoint({g.graph_id for g in va.graphs})


def test_episode_sizes():
    ds = make_family_dataset(per_family=30, seed=0)
    ep = sample_episode(ds, 5, 10, 15, np.random.default_rng(0))
    assert len(ep.support) == 50 and len(ep.query) == 75
    assert sorted(ep.support_labels) == sorted(list(range(5)) * 10)


def test_one_way_one_shot(four_class_dataset):
    ep = sample_episode(four_class_dataset, 1, 1, 1, np.random.default_rng(1))
    assert len(ep.support) == len(ep.query) == 1
    assert ep.support[0][0].class_id == ep.query[0][0].class_id == ep.class_map[0]


def test_episode_determinism(four_class_dataset):
    a = sample_episode(four_class_dataset, 2, 2, 3, np.random.default_rng(42))
    b = sample_episode(four_class_dataset, 2, 2, 3, np.random.default_rng(42))
    assert [g.graph_id for g, _ in a.support + a.query] == [g.graph_id for g, _ in b.support + b.query]
    assert a.class_map == b.class_map


def test_sampling_errors(four_class_dataset):
    rng = np.random.default_rng(0)
    with pytest.raises(SamplingError):
        sample_episode(four_class_dataset, 5, 1, 1, rng)
    with pytest.raises(SamplingError):
        sample_episode(four_class_dataset, 2, 5, 5, rng)


def test_scarce_class_excluded(caplog):
    rng = np.random.default_rng(0)
    graphs = [random_graph(rng, 3, class_id=c, graph_id=i) for i, c in enumerate([0] * 6 + [1] * 6 + [2] * 2)]
    ds = Dataset(tuple(graphs), 3, "scarce")
    with caplog.at_level("WARNING"):
        for _ in range(10):
            ep = sample_episode(ds, 2, 2, 2, rng)
            assert set(ep.class_map) == {0, 1}
    assert "excluded" in caplog.text


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_episode_invariants(way, shot, query, seed):
    ds = make_family_dataset(per_family=8, seed=2)
    ep = sample_episode(ds, way, shot, query, np.random.default_rng(seed))
    assert len(ep.support) == way * shot
    assert np.bincount(ep.support_labels, minlength=way).tolist() == [shot] * way
    assert set(ep.support_labels) == set(ep.query_labels)
    s_ids = {g.graph_id for g in ep.support_graphs}
    q_ids = {g.graph_id for g in ep.query_graphs}
    assert not s_ids & q_ids
    for g, y in ep.support + ep.query:
        assert g.class_id == ep.class_map[y]


# published dataset statistics; needs the real TU files under $ASMAML_DATA_ROOT.
@pytest.mark.skipif(not TU_ROOT, reason="ASMAML_DATA_ROOT not set")
@pytest.mark.parametrize(
    "name,count,avg_nodes,avg_edges",
    [("COIL-DEL", 3900, 21.54, 54.24), ("Letter-high", 2250, 4.67, 4.50)],
)
def test_published_dataset_statistics(name, count, avg_nodes, avg_edges):
    path = Path(TU_ROOT) / name
    if not path.exists():
        pytest.skip(f"{path} missing")
    stats = load_tu_dataset(path, name).stats()
    assert stats["graphs"] == count
    assert stats["avg_nodes"] == pytest.approx(avg_nodes, abs=0.01)
    assert stats["avg_edges"] == pytest.approx(avg_edges, abs=0.01)
