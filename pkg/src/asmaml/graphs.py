"""Graph data model, TU-format ingestion, class-disjoint splits and episode sampling."""

from __future__ import annotations

import functools
import logging
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, IngestionError, SamplingError

log = logging.getLogger(__name__)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GraphData:
    """One labeled, undirected graph.

    ``edges`` holds each undirected edge once as a row ``(u, v)`` with
    ``u < v``; rows are sorted. ``node_labels`` keeps the discrete TU node
    labels when the source had them (the kernels use them).
    """

    node_count: int
    edges: np.ndarray
    features: np.ndarray
    class_id: int
    graph_id: int = -1
    node_labels: np.ndarray | None = None

    def __post_init__(self):
        n = int(self.node_count)
        if n < 1:
            raise FormatError(f"graph {self.graph_id}: node_count must be positive, got {n}")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise FormatError(f"graph {self.graph_id}: edge endpoint outside [0, {n})")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise FormatError(f"graph {self.graph_id}: self-loops are not stored")
            edges = np.unique(np.sort(edges, axis=1), axis=0)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise FormatError(
                f"graph {self.graph_id}: features must have {n} rows, got shape {feats.shape}"
            )
        if not np.all(np.isfinite(feats)):
            raise FormatError(f"graph {self.graph_id}: non-finite node features")
        object.__setattr__(self, "node_count", n)
        object.__setattr__(self, "edges", _frozen(edges))
        object.__setattr__(self, "features", _frozen(feats.copy()))
        object.__setattr__(self, "class_id", int(self.class_id))
        if self.node_labels is not None:
            labels = np.asarray(self.node_labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != n:
                raise FormatError(f"graph {self.graph_id}: node_labels length != node_count")
            object.__setattr__(self, "node_labels", _frozen(labels.copy()))

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency without self-loops."""
        a = np.zeros((self.node_count, self.node_count))
        if self.edge_count:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.node_count)]
        for u, v in self.edges:
            nbrs[u].append(int(v))
            nbrs[v].append(int(u))
        return nbrs

    def permuted(self, perm: Sequence[int]) -> GraphData:
        """Relabel nodes so that old node ``i`` becomes ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.argsort(perm)
        labels = None if self.node_labels is None else self.node_labels[inv]
        return GraphData(
            self.node_count,
            perm[self.edges] if self.edge_count else self.edges,
            self.features[inv],
            self.class_id,
            self.graph_id,
            labels,
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    graphs: tuple[GraphData, ...]
    feature_dim: int
    name: str = ""
    # how features were derived: "attributes", "labels" or "constant"
    feature_source: str = "attributes"
    class_index: dict[int, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        graphs = tuple(self.graphs)
        object.__setattr__(self, "graphs", graphs)
        index: dict[int, list[int]] = {}
        for pos, g in enumerate(graphs):
            if g.feature_dim != self.feature_dim:
                raise FormatError(
                    f"graph {g.graph_id} has feature dim {g.feature_dim}, dataset expects {self.feature_dim}"
                )
            index.setdefault(g.class_id, []).append(pos)
        object.__setattr__(self, "class_index", {c: tuple(v) for c, v in sorted(index.items())})

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def classes(self) -> list[int]:
        return list(self.class_index)

    def subset(self, positions: Iterable[int]) -> Dataset:
        return Dataset(
            tuple(self.graphs[p] for p in positions),
            self.feature_dim,
            self.name,
            self.feature_source,
        )

    def stats(self) -> dict[str, float]:
        n = len(self.graphs)
        return {
            "graphs": n,
            "classes": len(self.class_index),
            "avg_nodes": sum(g.node_count for g in self.graphs) / max(n, 1),
            "avg_edges": sum(g.edge_count for g in self.graphs) / max(n, 1),
        }


@dataclass(frozen=True)
class SplitSpec:
    train_classes: frozenset[int]
    val_classes: frozenset[int]
    test_classes: frozenset[int]

    def __post_init__(self):
        for name in ("train_classes", "val_classes", "test_classes"):
            object.__setattr__(self, name, frozenset(int(c) for c in getattr(self, name)))
        a, b, c = self.train_classes, self.val_classes, self.test_classes
        if a & b or a & c or b & c:
            raise DataError(f"split partitions overlap: {sorted((a & b) | (a & c) | (b & c))}")

    @classmethod
    def random(cls, classes: Iterable[int], counts: tuple[int, int, int], seed: int) -> SplitSpec:
        """Seeded random class split with the given (train, val, test) class counts."""
        classes = sorted(classes)
        if sum(counts) > len(classes):
            raise DataError(f"split counts {counts} exceed the {len(classes)} available classes")
        order = np.random.default_rng(seed).permutation(classes)
        n0, n1, n2 = counts
        return cls(
            frozenset(order[:n0].tolist()),
            frozenset(order[n0:n0 + n1].tolist()),
            frozenset(order[n0 + n1:n0 + n1 + n2].tolist()),
        )

    @classmethod
    def parse(cls, text: str) -> SplitSpec:
        """Parse ``train: 0 1 2`` / ``val: ...`` / ``test: ...`` lines."""
        parts: dict[str, list[int]] = {"train": [], "val": [], "test": []}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, rest = line.partition(":")
            key = key.strip()
            if not sep or key not in parts:
                raise DataError(f"split spec line {lineno}: expected 'train|val|test: ids', got {raw!r}")
            try:
                parts[key].extend(int(tok) for tok in rest.replace(",", " ").split())
            except ValueError as exc:
                raise DataError(f"split spec line {lineno}: {exc}") from None
        return cls(frozenset(parts["train"]), frozenset(parts["val"]), frozenset(parts["test"]))

    def format(self) -> str:
        return "".join(
            f"{name}: {' '.join(map(str, sorted(ids)))}\n"
            for name, ids in (("train", self.train_classes), ("val", self.val_classes), ("test", self.test_classes))
        )


@dataclass(frozen=True, eq=False)
class Episode:
    way: int
    shot: int
    query_per_class: int
    support: tuple[tuple[GraphData, int], ...]
    query: tuple[tuple[GraphData, int], ...]
    class_map: tuple[int, ...]

    @property
    def support_graphs(self) -> list[GraphData]:
        return [g for g, _ in self.support]

    @property
    def support_labels(self) -> list[int]:
        return [y for _, y in self.support]

    @property
    def query_graphs(self) -> list[GraphData]:
        return [g for g, _ in self.query]

    @property
    def query_labels(self) -> list[int]:
        return [y for _, y in self.query]


# ---------------------------------------------------------------------------
# TU format


def _find_name(root: Path) -> str:
    hits = sorted(p.name[: -len("_A.txt")] for p in root.glob("*_A.txt"))
    if not hits:
        raise IngestionError(f"no '<name>_A.txt' file found in {root}")
    if len(hits) > 1 and root.name in hits:
        return root.name
    if len(hits) > 1:
        raise IngestionError(f"ambiguous dataset name in {root}: {hits}")
    return hits[0]


def _read_table(path: Path, dtype, *, required: bool = True, ncols: int | None = None):
    if not path.exists():
        if required:
            raise IngestionError(f"missing dataset file: {path.name}")
        return None
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                row = [dtype(tok) for tok in line.replace(",", " ").split()]
            except ValueError:
                raise FormatError(f"{path.name} line {lineno}: cannot parse {line!r}") from None
            if ncols is not None and len(row) != ncols:
                raise FormatError(f"{path.name} line {lineno}: expected {ncols} columns, got {len(row)}")
            if rows and len(row) != len(rows[0]):
                raise FormatError(f"{path.name} line {lineno}: inconsistent column count")
            rows.append(row)
    return rows


def load_tu_dataset(root_path: str | os.PathLike, name: str | None = None) -> Dataset:
    """Load a dataset in the TU Dortmund plain-text format.

    Node features are the node attributes when present, otherwise one-hot
    node labels, otherwise a single constant column. Class ids are remapped
    to ``0..C-1`` in sorted order of the raw labels.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"dataset directory not found: {root}")
    name = name or _find_name(root)
    edges_raw = _read_table(root / f"{name}_A.txt", int, ncols=2)
    indicator = _read_table(root / f"{name}_graph_indicator.txt", int, ncols=1)
    graph_labels = _read_table(root / f"{name}_graph_labels.txt", int, ncols=1)
    attrs = _read_table(root / f"{name}_node_attributes.txt", float, required=False)
    node_labels = _read_table(root / f"{name}_node_labels.txt", int, required=False, ncols=1)

    node_graph = np.array([r[0] for r in indicator], dtype=np.int64)
    n_nodes = node_graph.shape[0]
    g_labels = np.array([r[0] for r in graph_labels], dtype=np.int64)
    n_graphs = g_labels.shape[0]
    if n_nodes == 0:
        raise FormatError(f"{name}_graph_indicator.txt is empty")
    bad = np.flatnonzero((node_graph < 1) | (node_graph > n_graphs))
    if bad.size:
        raise FormatError(
            f"{name}_graph_indicator.txt line {bad[0] + 1}: graph id {node_graph[bad[0]]} outside 1..{n_graphs}"
        )
    if np.any(np.diff(node_graph) < 0):
        raise FormatError(f"{name}_graph_indicator.txt: node ids must be grouped by graph in ascending order")
    node_graph -= 1
    counts = np.bincount(node_graph, minlength=n_graphs)
    if np.any(counts == 0):
        raise FormatError(f"graph {int(np.flatnonzero(counts == 0)[0]) + 1} has no nodes")
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])

    edges = np.array(edges_raw, dtype=np.int64).reshape(-1, 2)
    bad = np.flatnonzero((edges < 1).any(axis=1) | (edges > n_nodes).any(axis=1))
    if bad.size:
        raise FormatError(f"{name}_A.txt line {bad[0] + 1}: node id outside 1..{n_nodes}")
    edges -= 1
    eg = node_graph[edges]
    bad = np.flatnonzero(eg[:, 0] != eg[:, 1])
    if bad.size:
        raise FormatError(f"{name}_A.txt line {bad[0] + 1}: edge joins nodes of different graphs")
    loops = edges[:, 0] == edges[:, 1]
    if loops.any():
        log.warning("%s: dropping %d self-loop entries", name, int(loops.sum()))
        edges, eg = edges[~loops], eg[~loops]

    if attrs is not None:
        feats = np.array(attrs, dtype=np.float64).reshape(n_nodes, -1) if len(attrs) == n_nodes else None
        if feats is None:
            raise FormatError(f"{name}_node_attributes.txt has {len(attrs)} rows, expected {n_nodes}")
        source = "attributes"
    labels = None
    if node_labels is not None:
        if len(node_labels) != n_nodes:
            raise FormatError(f"{name}_node_labels.txt has {len(node_labels)} rows, expected {n_nodes}")
        raw = np.array([r[0] for r in node_labels], dtype=np.int64)
        _, labels = np.unique(raw, return_inverse=True)
        if attrs is None:
            feats = np.eye(int(labels.max()) + 1)[labels]
            source = "labels"
    if attrs is None and node_labels is None:
        feats = np.ones((n_nodes, 1))
        source = "constant"

    _, class_ids = np.unique(g_labels, return_inverse=True)
    order = np.argsort(eg[:, 0], kind="stable")
    edges, eg = edges[order], eg[order]
    bounds = np.searchsorted(eg[:, 0], np.arange(n_graphs + 1))
    graphs = []
    for gi in range(n_graphs):
        lo, hi = offsets[gi], offsets[gi] + counts[gi]
        local = edges[bounds[gi]:bounds[gi + 1]] - lo
        graphs.append(
            GraphData(
                int(counts[gi]),
                local,
                feats[lo:hi],
                int(class_ids[gi]),
                gi,
                None if labels is None else labels[lo:hi],
            )
        )
    return Dataset(tuple(graphs), feats.shape[1], name, source)


def write_tu_dataset(dataset: Dataset, root_path: str | os.PathLike, name: str | None = None) -> Path:
    """Write ``dataset`` in TU format; each undirected edge is written in both directions."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    name = name or dataset.name or "DATA"
    a_lines, ind_lines, lab_lines, attr_lines, nl_lines = [], [], [], [], []
    offset = 0
    for gi, g in enumerate(dataset.graphs, 1):
        for u, v in g.edges:
            a_lines.append(f"{u + offset + 1}, {v + offset + 1}\n")
            a_lines.append(f"{v + offset + 1}, {u + offset + 1}\n")
        ind_lines.extend(f"{gi}\n" for _ in range(g.node_count))
        lab_lines.append(f"{g.class_id}\n")
        if dataset.feature_source == "attributes":
            attr_lines.extend(", ".join(repr(float(x)) for x in row) + "\n" for row in g.features)
        if g.node_labels is not None:
            nl_lines.extend(f"{int(x)}\n" for x in g.node_labels)
        elif dataset.feature_source == "labels":
            nl_lines.extend(f"{int(x)}\n" for x in np.argmax(g.features, axis=1))
        offset += g.node_count
    files = {"A": a_lines, "graph_indicator": ind_lines, "graph_labels": lab_lines}
    if attr_lines:
        files["node_attributes"] = attr_lines
    if nl_lines:
        files["node_labels"] = nl_lines
    for suffix, lines in files.items():
        with open(root / f"{name}_{suffix}.txt", "w") as fh:
            fh.writelines(lines)
    return root


# ---------------------------------------------------------------------------
# splits


def split_by_class(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    known = set(dataset.class_index)
    unknown = (spec.train_classes | spec.val_classes | spec.test_classes) - known
    if unknown:
        raise DataError(f"split spec names classes not in dataset: {sorted(unknown)}")
    out = []
    for classes in (spec.train_classes, spec.val_classes, spec.test_classes):
        positions = sorted(p for c in classes for p in dataset.class_index[c])
        out.append(dataset.subset(positions))
    return tuple(out)


def carve_validation(dataset: Dataset, fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Hold out ``fraction`` of each class's graphs as a validation set over the same classes."""
    keep, held = [], []
    for c, positions in dataset.class_index.items():
        positions = list(positions)
        k = int(round(fraction * len(positions)))
        chosen = set(rng.choice(len(positions), size=k, replace=False).tolist()) if k else set()
        for i, p in enumerate(positions):
            (held if i in chosen else keep).append(p)
    return dataset.subset(sorted(keep)), dataset.subset(sorted(held))


# ---------------------------------------------------------------------------
# episodes


@functools.lru_cache(maxsize=256)
def _eligible_classes(dataset: Dataset, need: int) -> tuple[int, ...]:
    ok = tuple(c for c, pos in dataset.class_index.items() if len(pos) >= need)
    dropped = sorted(set(dataset.class_index) - set(ok))
    if dropped:
        log.warning(
            "%s: classes %s have fewer than %d graphs and are excluded from episode sampling",
            dataset.name or "dataset", dropped, need,
        )
    return ok


def sample_episode(
    dataset: Dataset, way: int, shot: int, query_per_class: int, rng: np.random.Generator
) -> Episode:
    """Sample one N-way-K-shot episode; episode labels follow sampled-class order."""
    if way < 1 or shot < 1 or query_per_class < 0:
        raise SamplingError(f"invalid episode shape way={way} shot={shot} query={query_per_class}")
    need = shot + query_per_class
    classes = _eligible_classes(dataset, need)
    if len(classes) < way:
        raise SamplingError(
            f"need {way} classes with >= {need} graphs each, dataset has {len(classes)}"
        )
    chosen = rng.choice(len(classes), size=way, replace=False)
    support, query, class_map = [], [], []
    for label, ci in enumerate(chosen):
        c = classes[ci]
        bucket = dataset.class_index[c]
        picks = rng.choice(len(bucket), size=need, replace=False)
        graphs = [dataset.graphs[bucket[p]] for p in picks]
        support.extend((g, label) for g in graphs[:shot])
        query.extend((g, label) for g in graphs[shot:])
        class_map.append(c)
    return Episode(way, shot, query_per_class, tuple(support), tuple(query), tuple(class_map))

