"""MAML inner-loop adaptation and outer-loop meta-update for the backbone."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import torch

from . import autodiff
from .autodiff import ParamSet
from .backbone import BackboneConfig, GraphBatch, as_labels, episode_forward
from .errors import NumericError
from .graphs import Episode


@dataclass
class MetaConfig:
    inner_lr: float = 1e-4
    outer_lr: float = 1e-3
    weight_decay: float = 1e-5
    order: str = "second"
    # episodes averaged per outer update
    meta_batch: int = 1

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.order not in ("second", "first"):
            raise ValueError("order must be 'second' or 'first'")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")


@dataclass
class AdaptationTrace:
    step_losses: list[float] = field(default_factory=list)
    step_anis: list[float] = field(default_factory=list)
    step_query_accuracies: list[float] = field(default_factory=list)
    query_loss: float = float("nan")

    @property
    def steps_taken(self) -> int:
        return len(self.step_losses)


@dataclass
class EpisodeTensors:
    """Batched support and query sets of one episode, built once and reused."""

    support: GraphBatch
    support_labels: torch.Tensor
    query: GraphBatch
    query_labels: torch.Tensor
    way: int

    @classmethod
    def from_episode(cls, ep: Episode) -> EpisodeTensors:
        return cls(
            GraphBatch.from_graphs(ep.support_graphs),
            as_labels(ep.support_labels),
            GraphBatch.from_graphs(ep.query_graphs),
            as_labels(ep.query_labels),
            ep.way,
        )


def _tensors(episode: Episode | EpisodeTensors) -> EpisodeTensors:
    return episode if isinstance(episode, EpisodeTensors) else EpisodeTensors.from_episode(episode)


def _inner_loop(
    theta: ParamSet,
    ep: EpisodeTensors,
    steps: int,
    bcfg: BackboneConfig,
    mcfg: MetaConfig,
    *,
    create_graph: bool,
    track_query: bool,
) -> tuple[ParamSet, AdaptationTrace]:
    fast = dict(theta)
    trace = AdaptationTrace()
    for t in range(steps):
        res = episode_forward(ep.support, ep.support_labels, fast, bcfg)
        loss = res.loss
        if not bool(torch.isfinite(loss)):
            raise NumericError(f"non-finite support loss at adaptation step {t + 1}")
        trace.step_losses.append(float(loss.detach()))
        trace.step_anis.append(res.ani)
        fast = autodiff.sgd_step(fast, loss, mcfg.inner_lr, create_graph=create_graph)
        if not create_graph:
            fast = {k: v.detach().requires_grad_(True) for k, v in fast.items()}
        if track_query and t < steps - 1:
            with torch.no_grad():
                q = episode_forward(ep.query, ep.query_labels, fast, bcfg, with_ani=False)
            trace.step_query_accuracies.append(q.accuracy)
    return fast, trace


def adapt(
    theta: ParamSet,
    episode: Episode | EpisodeTensors,
    steps: int,
    bcfg: BackboneConfig,
    mcfg: MetaConfig,
    *,
    track_query: bool = True,
) -> tuple[ParamSet, AdaptationTrace]:
    """Run ``steps`` SGD steps on the support loss starting from a copy of ``theta``.

    With ``track_query`` the query accuracy of the current fast weights is
    recorded after every step. ``theta`` is never modified.
    """
    if steps < 1:
        raise ValueError("adaptation needs at least one step")
    ep = _tensors(episode)
    fast, trace = _inner_loop(
        autodiff.leaf_copy(theta), ep, steps, bcfg, mcfg, create_graph=False, track_query=track_query
    )
    if track_query:
        with torch.no_grad():
            q = episode_forward(ep.query, ep.query_labels, fast, bcfg, with_ani=False)
        trace.step_query_accuracies.append(q.accuracy)
        trace.query_loss = float(q.loss.detach())
    return {k: v.detach() for k, v in fast.items()}, trace


def meta_gradient(
    theta: ParamSet,
    episode: Episode | EpisodeTensors,
    steps: int,
    bcfg: BackboneConfig,
    mcfg: MetaConfig,
) -> tuple[ParamSet, AdaptationTrace]:
    """Gradient of the post-adaptation query loss with respect to ``theta``.

    Also returns the adaptation trace, with per-step query accuracies.
    """
    ep = _tensors(episode)
    leaves = autodiff.leaf_copy(theta)
    second = mcfg.order == "second"
    fast, trace = _inner_loop(leaves, ep, steps, bcfg, mcfg, create_graph=second, track_query=True)
    q = episode_forward(ep.query, ep.query_labels, fast, bcfg, with_ani=False)
    if not bool(torch.isfinite(q.loss)):
        raise NumericError("non-finite query loss after adaptation")
    trace.query_loss = float(q.loss.detach())
    if steps > 0:
        trace.step_query_accuracies.append(q.accuracy)
    wrt = leaves if second or steps == 0 else fast
    names = list(wrt)
    grads = torch.autograd.grad(q.loss, [wrt[k] for k in names], allow_unused=True)
    out = {}
    for k, g in zip(names, grads):
        g = torch.zeros_like(theta[k]) if g is None else g.detach()
        autodiff.check_finite(g, f"meta-gradient of {k}")
        out[k] = g
    return out, trace


def sgd_weight_decay(theta: ParamSet, grads: ParamSet, lr: float, weight_decay: float) -> ParamSet:
    return {k: (theta[k] - lr * (grads[k] + weight_decay * theta[k])).detach() for k in theta}


def meta_update(
    theta: ParamSet,
    episodes: Episode | EpisodeTensors | Sequence[Episode | EpisodeTensors],
    steps: int,
    bcfg: BackboneConfig,
    mcfg: MetaConfig,
) -> tuple[ParamSet, list[AdaptationTrace]]:
    """One outer SGD step (with weight decay) on the mean query loss after adaptation."""
    if isinstance(episodes, (Episode, EpisodeTensors)):
        episodes = [episodes]
    total: ParamSet | None = None
    traces = []
    for ep in episodes:
        g, trace = meta_gradient(theta, ep, steps, bcfg, mcfg)
        traces.append(trace)
        total = g if total is None else {k: total[k] + g[k] for k in total}
    grads = {k: v / len(episodes) for k, v in total.items()}
    return sgd_weight_decay(theta, grads, mcfg.outer_lr, mcfg.weight_decay), traces


def test_episode(
    theta: ParamSet,
    episode: Episode | EpisodeTensors,
    steps: int,
    bcfg: BackboneConfig,
    mcfg: MetaConfig,
) -> float:
    """Adapt on the support set, then return query accuracy of the adapted weights."""
    ep = _tensors(episode)
    fast, _ = adapt(theta, ep, steps, bcfg, mcfg, track_query=False)
    with torch.no_grad():
        return episode_forward(ep.query, ep.query_labels, fast, bcfg, with_ani=False).accuracy
