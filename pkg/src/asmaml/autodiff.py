"""Gradients over named parameter sets.

Parameters live in plain ``dict[str, torch.Tensor]`` maps (float64), kept in
sorted-name order. Reverse-mode differentiation is delegated to
``torch.autograd``; this module adds the pieces the meta-learner needs on top:
finiteness checks, differentiation through a sequence of inner SGD updates
(second or first order), an independent central-difference checker and an
exact text checkpoint format.
"""

from __future__ import annotations

import json
import math
import os
from collections.abc import Callable, Mapping
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, NumericError

DTYPE = torch.float64

ParamSet = dict[str, torch.Tensor]
Objective = Callable[[ParamSet], torch.Tensor]

CHECKPOINT_MAGIC = "# asmaml-paramset v1"


def as_paramset(params: Mapping[str, object]) -> ParamSet:
    """Value copy of ``params`` as detached float64 tensors in sorted-name order."""
    return {k: torch.as_tensor(params[k], dtype=DTYPE).detach().clone() for k in sorted(params)}


def leaf_copy(params: Mapping[str, torch.Tensor]) -> ParamSet:
    return {k: params[k].detach().clone().requires_grad_(True) for k in sorted(params)}


def check_finite(value: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(value).all()):
        raise NumericError(f"non-finite value in {what}")


def grad(objective: Objective, params: Mapping[str, torch.Tensor]) -> ParamSet:
    """Reverse-mode gradient of a scalar ``objective(params)``.

    Parameters that do not influence the objective get a zero gradient.
    """
    leaves = leaf_copy(params)
    value = objective(leaves)
    if value.numel() != 1:
        raise ValueError(f"objective must be scalar, got shape {tuple(value.shape)}")
    check_finite(value, "objective")
    names = list(leaves)
    grads = torch.autograd.grad(value, [leaves[k] for k in names], allow_unused=True)
    out = {}
    for k, g in zip(names, grads):
        g = torch.zeros_like(leaves[k]) if g is None else g.detach()
        check_finite(g, f"gradient of {k}")
        out[k] = g
    return out


def sgd_step(
    params: ParamSet,
    loss: torch.Tensor,
    lr: float,
    *,
    create_graph: bool,
    names: list[str] | None = None,
) -> ParamSet:
    """One differentiable SGD step ``p - lr * dloss/dp`` over ``names`` (default: all)."""
    names = list(params) if names is None else names
    grads = torch.autograd.grad(
        loss, [params[k] for k in names], create_graph=create_graph, allow_unused=True
    )
    out = dict(params)
    for k, g in zip(names, grads):
        if g is None:
            continue
        if not create_graph:
            g = g.detach()
        check_finite(g, f"inner-loop gradient of {k}")
        out[k] = params[k] - lr * g
    return out


def grad_through_updates(
    inner_loss: Objective,
    outer_loss: Objective,
    initial: Mapping[str, torch.Tensor],
    inner_steps: int,
    inner_lr: float,
    order: str = "second",
) -> ParamSet:
    """Gradient of ``outer_loss(adapted)`` with respect to the initial parameters.

    ``adapted`` is ``initial`` after ``inner_steps`` SGD steps on ``inner_loss``
    with rate ``inner_lr``. In ``"second"`` order mode the gradient flows through
    every inner update; in ``"first"`` order mode the adapted parameters are
    treated as independent of the initial ones, so the result is the outer
    gradient evaluated at the adapted point.
    """
    if order not in ("second", "first"):
        raise ValueError(f"order must be 'second' or 'first', got {order!r}")
    if inner_steps < 0:
        raise ValueError("inner_steps must be >= 0")
    theta = leaf_copy(initial)
    fast: ParamSet = dict(theta)
    for t in range(inner_steps):
        loss = inner_loss(fast)
        check_finite(loss, f"inner loss at step {t + 1}")
        fast = sgd_step(fast, loss, inner_lr, create_graph=order == "second")
        if order == "first":
            fast = leaf_copy(fast)
    value = outer_loss(fast)
    check_finite(value, "outer loss")
    wrt = theta if order == "second" else fast
    names = list(wrt)
    grads = torch.autograd.grad(value, [wrt[k] for k in names], allow_unused=True)
    out = {}
    for k, g in zip(names, grads):
        g = torch.zeros_like(wrt[k]) if g is None else g.detach()
        check_finite(g, f"meta-gradient of {k}")
        out[k] = g
    return out


def finite_diff_check(
    objective: Objective,
    params: Mapping[str, torch.Tensor],
    step: float = 1e-5,
    sample: int = 50,
    seed: int = 0,
    analytic: Mapping[str, torch.Tensor] | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Checks ``sample`` coordinates drawn deterministically from all parameter
    entries. Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator. A
    non-finite evaluation is reported as ``inf`` rather than raised.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = as_paramset(params)
    try:
        analytic = grad(objective, base) if analytic is None else analytic
    except NumericError:
        return math.inf
    coords = [(k, i) for k in base for i in range(base[k].numel())]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(coords), size=min(sample, len(coords)), replace=False)
    worst = 0.0
    with torch.no_grad():
        for c in sorted(picks.tolist()):
            name, idx = coords[c]
            vals = []
            for sign in (1.0, -1.0):
                shifted = dict(base)
                flat = base[name].clone().reshape(-1)
                flat[idx] += sign * step
                shifted[name] = flat.reshape(base[name].shape)
                vals.append(float(objective(shifted)))
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            exact = float(analytic[name].reshape(-1)[idx])
            if not (math.isfinite(numeric) and math.isfinite(exact)):
                return math.inf
            err = abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints
#
# Text format, one block per parameter in sorted-name order:
#   # asmaml-paramset v1
#   #meta {"json": "object"}          (optional)
#   name d0,d1,...
#   <space separated float.hex values>
# ``float.hex`` makes the round trip bitwise.


def save_params(path: str | os.PathLike, params: Mapping[str, torch.Tensor], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [CHECKPOINT_MAGIC + "\n"]
    if meta is not None:
        lines.append("#meta " + json.dumps(meta, sort_keys=True) + "\n")
    for name in sorted(params):
        if any(ch.isspace() for ch in name):
            raise ValueError(f"parameter name may not contain whitespace: {name!r}")
        t = params[name].detach().to(DTYPE).cpu()
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"{name} {shape}\n")
        lines.append(" ".join(float(x).hex() for x in t.reshape(-1).tolist()) + "\n")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        fh.writelines(lines)
    os.replace(tmp, path)
    return path


def load_params(path: str | os.PathLike) -> tuple[ParamSet, dict]:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a parameter checkpoint")
    meta: dict = {}
    params: ParamSet = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("#meta "):
            meta = json.loads(line[len("#meta "):])
            i += 1
            continue
        if not line.strip():
            i += 1
            continue
        try:
            name, _, shape_txt = line.partition(" ")
            shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt.strip() else ()
            values = [float.fromhex(tok) for tok in lines[i + 1].split()]
        except (ValueError, IndexError):
            raise FormatError(f"{path} line {i + 1}: malformed parameter block") from None
        if len(values) != math.prod(shape):
            raise FormatError(f"{path} line {i + 2}: {name} expects {math.prod(shape)} values, got {len(values)}")
        params[name] = torch.tensor(values, dtype=DTYPE).reshape(shape)
        i += 2
    return {k: params[k] for k in sorted(params)}, meta
