"""Adaptive step controller.

An LSTM cell reads the per-step (support loss, batch ANI) sequence of an
episode and emits a stop probability after every step. The last probability
sets the step budget of the next episode as ``floor(1 / p)`` clamped to the
configured bounds. The controller is trained with REINFORCE on rewards built
from the per-step query accuracies.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff import DTYPE, ParamSet, check_finite, leaf_copy
from .errors import NumericError


@dataclass
class StepBounds:
    t_min: int = 4
    t_max: int = 15

    def __post_init__(self):
        if not 1 <= self.t_min <= self.t_max:
            raise ValueError(f"need 1 <= t_min <= t_max, got {self.t_min}, {self.t_max}")

    @property
    def initial(self) -> int:
        return self.t_min + (self.t_max - self.t_min) // 2


@dataclass
class RewardConfig:
    penalty: float = 0.01
    controller_lr: float = 1e-4
    # "to-go": Q_t = sum_{tau >= t} r_tau; "constant": every Q_t = sum_tau r_tau
    returns: str = "to-go"
    # which log-probability the policy gradient follows:
    #   "continue": ln(1 - p_t), the probability of the action actually taken
    #   "stop": ln p_t
    log_prob: str = "continue"

    def __post_init__(self):
        if self.penalty < 0:
            raise ValueError("penalty must be >= 0")
        if self.returns not in ("to-go", "constant"):
            raise ValueError("returns must be 'to-go' or 'constant'")
        if self.log_prob not in ("continue", "stop"):
            raise ValueError("log_prob must be 'continue' or 'stop'")


def init_controller_params(hidden: int, seed: int, input_dim: int = 2, initial_steps: int | None = None) -> ParamSet:
    """Uniform(-1/sqrt(h), 1/sqrt(h)) init, the usual LSTM convention.

    With ``initial_steps`` the head bias is shifted so the untrained
    controller proposes roughly that many steps instead of ``floor(1/0.5)``.
    """
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(hidden)

    def u(*shape):
        return (torch.rand(*shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound

    p = {
        "ctrl.lstm.w_ih": u(4 * hidden, input_dim),
        "ctrl.lstm.w_hh": u(4 * hidden, hidden),
        "ctrl.lstm.bias": u(4 * hidden),
        "ctrl.head.weight": u(hidden),
        "ctrl.head.bias": u(1),
    }
    if initial_steps is not None:
        p_stop = 1.0 / (initial_steps + 0.5)
        p["ctrl.head.bias"] = torch.tensor([math.log(p_stop / (1.0 - p_stop))], dtype=DTYPE)
    return {k: p[k] for k in sorted(p)}


def lstm_cell(
    params: ParamSet, x: torch.Tensor, h: torch.Tensor, c: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Gate order in the stacked weights: input, forget, candidate, output."""
    gates = params["ctrl.lstm.w_ih"] @ x + params["ctrl.lstm.w_hh"] @ h + params["ctrl.lstm.bias"]
    i, f, g, o = gates.chunk(4)
    c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h = torch.sigmoid(o) * torch.tanh(c)
    return h, c


def controller_logits(params: ParamSet, inputs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Stop logits for a ``(T, 2)`` input sequence, plus the final hidden state."""
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise ValueError(f"controller inputs must be (T>=1, features), got {tuple(inputs.shape)}")
    if not bool(torch.isfinite(inputs).all()):
        raise NumericError("non-finite controller input")
    hidden = params["ctrl.lstm.w_hh"].shape[1]
    h = torch.zeros(hidden, dtype=DTYPE)
    c = torch.zeros(hidden, dtype=DTYPE)
    logits = []
    for x in inputs:
        h, c = lstm_cell(params, x, h, c)
        logits.append(params["ctrl.head.weight"] @ h + params["ctrl.head.bias"][0])
    return torch.stack(logits), h


def controller_scan(params: ParamSet, inputs) -> tuple[np.ndarray, np.ndarray]:
    """Stop probabilities in (0, 1) for each step and the final hidden state."""
    inputs = torch.as_tensor(np.ascontiguousarray(inputs, dtype=np.float64))
    with torch.no_grad():
        logits, h = controller_logits(params, inputs)
    return torch.sigmoid(logits).numpy(), h.numpy()


def next_step_count(p_final: float, bounds: StepBounds) -> int:
    if not 0.0 < p_final < 1.0:
        raise ValueError(f"stop probability must be in (0, 1), got {p_final}")
    return int(min(max(math.floor(1.0 / p_final), bounds.t_min), bounds.t_max))


def compute_rewards(query_accuracies: Sequence[float], penalty: float, mode: str = "to-go") -> np.ndarray:
    """Per-step returns from ``r_t = e_T - e_t - penalty * t`` (t counted from 1)."""
    e = np.asarray(query_accuracies, dtype=np.float64)
    if e.size < 1:
        raise ValueError("need at least one step")
    t = np.arange(1, e.size + 1, dtype=np.float64)
    r = e[-1] - e - penalty * t
    if mode == "to-go":
        return np.cumsum(r[::-1])[::-1].copy()
    if mode == "constant":
        return np.full_like(r, r.sum())
    raise ValueError(f"unknown return mode {mode!r}")


def log_prob_objective(params: ParamSet, inputs: torch.Tensor, returns: torch.Tensor, log_prob: str) -> torch.Tensor:
    """``sum_t Q_t * ln pi_t``, where ``pi_t`` is ``p_t`` or ``1 - p_t``."""
    logits, _ = controller_logits(params, inputs)
    # logsigmoid(-x) = ln(1 - sigmoid(x)), stable for large logits
    lp = torch.nn.functional.logsigmoid(logits if log_prob == "stop" else -logits)
    return (returns * lp).sum()


def reinforce_update(params: ParamSet, inputs, returns, lr: float, log_prob: str = "continue") -> ParamSet:
    """Gradient ascent ``theta + lr * sum_t Q_t * grad ln pi_t``."""
    inputs = torch.as_tensor(np.ascontiguousarray(inputs, dtype=np.float64))
    returns = torch.as_tensor(np.asarray(returns, dtype=np.float64))
    if inputs.shape[0] != returns.shape[0]:
        raise ValueError("inputs and returns must have the same length")
    leaves = leaf_copy(params)
    objective = log_prob_objective(leaves, inputs, returns, log_prob)
    names = list(leaves)
    grads = torch.autograd.grad(objective, [leaves[k] for k in names])
    out = {}
    for k, g in zip(names, grads):
        check_finite(g, f"controller gradient of {k}")
        out[k] = (params[k] + lr * g).detach()
    return out


@dataclass
class RunningNormalizer:
    """Per-feature running mean / variance (Welford)."""

    count: int = 0
    mean: list[float] = field(default_factory=lambda: [0.0, 0.0])
    m2: list[float] = field(default_factory=lambda: [0.0, 0.0])
    eps: float = 1e-8

    def update(self, rows: np.ndarray) -> None:
        for row in np.asarray(rows, dtype=np.float64):
            self.count += 1
            for j, x in enumerate(row):
                delta = x - self.mean[j]
                self.mean[j] += delta / self.count
                self.m2[j] += delta * (x - self.mean[j])

    @property
    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones(len(self.mean))
        return np.sqrt(np.asarray(self.m2) / (self.count - 1))

    def transform(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - np.asarray(self.mean)) / (self.std + self.eps)

    def state(self) -> dict:
        return {"count": self.count, "mean": list(self.mean), "m2": list(self.m2), "eps": self.eps}

    @classmethod
    def from_state(cls, state: dict) -> RunningNormalizer:
        return cls(int(state["count"]), [float(x) for x in state["mean"]], [float(x) for x in state["m2"]], float(state["eps"]))


@dataclass
class ControllerStep:
    steps_used: int
    stop_probs: np.ndarray
    returns: np.ndarray
    next_steps: int

    @property
    def p_final(self) -> float:
        return float(self.stop_probs[-1])


class StepController:
    """Sequential controller state owned by the training loop."""

    def __init__(self, params: ParamSet, bounds: StepBounds, reward: RewardConfig,
                 normalizer: RunningNormalizer | None = None, steps: int | None = None):
        self.params = params
        self.bounds = bounds
        self.reward = reward
        self.normalizer = normalizer or RunningNormalizer()
        self.steps = bounds.initial if steps is None else steps

    @classmethod
    def create(cls, hidden: int, bounds: StepBounds, reward: RewardConfig, seed: int) -> StepController:
        return cls(init_controller_params(hidden, seed, initial_steps=bounds.initial), bounds, reward)

    def features(self, losses: Sequence[float], anis: Sequence[float]) -> np.ndarray:
        rows = np.stack([np.asarray(losses, dtype=np.float64), np.asarray(anis, dtype=np.float64)], axis=1)
        if not np.all(np.isfinite(rows)):
            raise NumericError("non-finite controller input")
        self.normalizer.update(rows)
        return self.normalizer.transform(rows)

    def observe(self, losses: Sequence[float], anis: Sequence[float], query_accuracies: Sequence[float],
                learn: bool = True) -> ControllerStep:
        """Consume one episode's trace: score it, set the next step count, and learn."""
        used = self.steps
        inputs = self.features(losses, anis)
        probs, _ = controller_scan(self.params, inputs)
        returns = compute_rewards(query_accuracies, self.reward.penalty, self.reward.returns)
        # a saturated sigmoid can round to exactly 0 or 1 in float64
        p_final = min(max(float(probs[-1]), 1e-300), 1.0 - 2.0 ** -53)
        self.steps = next_step_count(p_final, self.bounds)
        if learn:
            self.params = reinforce_update(self.params, inputs, returns, self.reward.controller_lr, self.reward.log_prob)
        return ControllerStep(used, probs, returns, self.steps)
