import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from asmaml.graphs import Dataset, GraphData  # noqa: E402

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    def record(criterion: str, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {criterion}" + (f"  [{detail}]" if detail else ""))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_graph(n, edges, features=None, class_id=0, graph_id=-1, labels=None):
    feats = np.ones((n, 1)) if features is None else np.asarray(features, dtype=float)
    return GraphData(n, np.array(edges, dtype=np.int64).reshape(-1, 2), feats, class_id, graph_id, labels)


def random_graph(rng, n, p=0.4, d=3, class_id=0, graph_id=-1):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return make_graph(n, edges, rng.standard_normal((n, d)), class_id, graph_id)


@pytest.fixture
def toy_tu_dir(tmp_path):
    """Graph 1: nodes {1, 2} joined by an edge; graph 2: the single node 3."""
    d = tmp_path / "TOY"
    d.mkdir()
    (d / "TOY_A.txt").write_text("1, 2\n2, 1\n")
    (d / "TOY_graph_indicator.txt").write_text("1\n1\n2\n")
    (d / "TOY_graph_labels.txt").write_text("5\n-1\n")
    return d


@pytest.fixture
def four_class_dataset():
    rng = np.random.default_rng(3)
    graphs = [random_graph(rng, int(rng.integers(2, 7)), class_id=c, graph_id=i)
              for i, c in enumerate([c for c in range(4) for _ in range(8)])]
    return Dataset(tuple(graphs), 3, "four")
