"""Quick oracle and gradient self-checks behind ``asmaml check``."""

from __future__ import annotations

import numpy as np
import torch

from .ani import ani_graph
from .autodiff import finite_diff_check, grad_through_updates
from .backbone import BackboneConfig, GraphBatch, as_labels, episode_forward, init_backbone_params
from .controller import StepBounds, next_step_count
from .synthetic import make_family_dataset


def dense_ani(adj: np.ndarray, h: np.ndarray) -> float:
    n = adj.shape[0]
    deg = adj.sum(axis=1)
    dinv_a = np.zeros_like(adj)
    for i in range(n):
        if deg[i] > 0:
            dinv_a[i] = adj[i] / deg[i]
    return float(np.abs((np.eye(n) - dinv_a) @ h).sum(axis=1).mean())


def _random_graph(rng, n):
    a = np.triu((rng.random((n, n)) < 0.4).astype(float), 1)
    return a + a.T


def check_ani(trials: int = 200, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        a = _random_graph(rng, n)
        h = rng.standard_normal((n, int(rng.integers(1, 5))))
        worst = max(worst, abs(ani_graph(a, h) - dense_ani(a, h)))
    return worst


def check_episode_gradient(seed: int = 0) -> float:
    ds = make_family_dataset(per_family=2, seed=seed)
    graphs = [ds.graphs[i] for i in (0, 1, 2, 3, 4, 5)]
    labels = as_labels([0, 0, 1, 1, 2, 2])
    cfg = BackboneConfig(layer_count=2, hidden_dim=8)
    params = init_backbone_params(ds.feature_dim, 3, cfg, seed)
    batch = GraphBatch.from_graphs(graphs)
    return finite_diff_check(lambda p: episode_forward(batch, labels, p, cfg, with_ani=False).loss,
                             params, step=1e-5, sample=100, seed=seed)


def check_meta_gradient(theta: float = 1.3, lr: float = 0.2) -> float:
    loss = lambda p: 0.5 * (p["w"] ** 2).sum()  # noqa: E731
    g = grad_through_updates(loss, loss, {"w": torch.tensor([theta], dtype=torch.float64)}, 1, lr)
    exact = (1 - lr) ** 2 * theta
    return abs(float(g["w"][0]) - exact) / abs(exact)


def check_step_rule(samples: int = 10_000, seed: int = 0) -> bool:
    p = np.sort(np.random.default_rng(seed).uniform(1e-9, 1.0 - 1e-9, samples))
    t = np.array([next_step_count(float(x), StepBounds()) for x in p])
    return bool(t.min() >= 4 and t.max() <= 15 and np.all(np.diff(t) <= 0))


def run_checks() -> bool:
    results = [
        ("ANI vs dense oracle (abs err < 1e-9)", check_ani() < 1e-9),
        ("episode loss gradient vs finite differences (rel err < 1e-4)", check_episode_gradient() < 1e-4),
        ("second-order meta-gradient vs closed form (rel err < 1e-9)", check_meta_gradient() < 1e-9),
        ("step rule bounds and monotonicity", check_step_rule()),
    ]
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return all(ok for _, ok in results)
