import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from asmaml.autodiff import (
    as_paramset,
    finite_diff_check,
    grad,
    grad_through_updates,
    load_params,
    save_params,
)
from asmaml.errors import FormatError, NumericError


def quad(p):
    return 0.5 * (p["w"] ** 2).sum()


def scalar(x):
    return {"w": torch.tensor([x], dtype=torch.float64)}


def test_grad_of_quadratic():
    g = grad(quad, {"w": torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)})
    assert g["w"].tolist() == [1.0, -2.0, 3.0]


def test_unused_parameter_gets_zero_gradient():
    g = grad(quad, {"w": torch.ones(2, dtype=torch.float64), "u": torch.ones(3, dtype=torch.float64)})
    assert g["u"].tolist() == [0.0, 0.0, 0.0]


def test_non_finite_objective_raises():
    with pytest.raises(NumericError):
        grad(lambda p: p["w"].sum() / 0.0, scalar(1.0))


def test_grad_does_not_touch_input():
    params = scalar(2.0)
    grad(quad, params)
    assert not params["w"].requires_grad


@pytest.mark.parametrize("theta,lr", [(1.3, 0.2), (-0.7, 0.05), (2.0, 0.9)])
def test_quadratic_meta_gradient_closed_form(theta, lr):
    g = grad_through_updates(quad, quad, scalar(theta), 1, lr)
    assert float(g["w"][0]) == pytest.approx((1 - lr) ** 2 * theta, rel=1e-12)


@pytest.mark.parametrize("steps", [0, 1, 3])
def test_quadratic_meta_gradient_t_steps(steps):
    # each step multiplies by (1 - lr); outer loss squares it again
    g = grad_through_updates(quad, quad, scalar(1.5), steps, 0.1)
    assert float(g["w"][0]) == pytest.approx(0.9 ** (2 * steps) * 1.5, rel=1e-12)


def test_first_order_drops_update_jacobian():
    g = grad_through_updates(quad, quad, scalar(1.3), 1, 0.2, order="first")
    assert float(g["w"][0]) == pytest.approx((1 - 0.2) * 1.3, rel=1e-12)


def test_zero_inner_lr_is_plain_gradient():
    def inner(p):
        return (p["w"] ** 3).sum()

    init = {"w": torch.tensor([0.4, -1.1], dtype=torch.float64)}
    for steps in (0, 2, 5):
        g = grad_through_updates(inner, quad, init, steps, 0.0)
        assert torch.equal(g["w"], grad(quad, init)["w"])


def test_orders_agree_for_tiny_inner_lr():
    def inner(p):
        return (torch.sin(p["w"]) * p["w"] ** 2).sum()

    def outer(p):
        return (torch.cos(p["w"]) + p["w"] ** 2).sum()

    init = {"w": torch.tensor([0.3, -0.8, 1.2], dtype=torch.float64)}
    a = grad_through_updates(inner, outer, init, 3, 1e-8, order="second")["w"]
    b = grad_through_updates(inner, outer, init, 3, 1e-8, order="first")["w"]
    assert float((a - b).abs().max() / a.abs().max()) < 1e-4
    # T = 0: both are the plain outer gradient
    a = grad_through_updates(inner, outer, init, 0, 0.3, order="second")["w"]
    b = grad_through_updates(inner, outer, init, 0, 0.3, order="first")["w"]
    assert torch.equal(a, b)


def test_meta_gradient_matches_finite_differences_nonlinear():
    rng = np.random.default_rng(0)
    x = torch.as_tensor(rng.standard_normal((6, 3)))
    y = torch.as_tensor(rng.standard_normal(6))

    def inner(p):
        return ((torch.tanh(x @ p["w"]) - y) ** 2).mean()

    def outer(p):
        return ((torch.tanh(x @ p["w"]) + 0.5 * y) ** 2).mean()

    init = {"w": torch.as_tensor(rng.standard_normal(3))}

    def inner_grad(w):
        # hand-derived gradient of the inner loss
        t = torch.tanh(x @ w)
        return (2.0 * (t - y) * (1 - t ** 2)) @ x / len(y)

    def meta_objective(p):
        w = p["w"]
        for _ in range(3):
            w = w - 0.3 * inner_grad(w)
        return outer({"w": w})

    analytic = grad_through_updates(inner, outer, init, 3, 0.3)
    assert finite_diff_check(meta_objective, init, step=1e-6, analytic=analytic) < 1e-6


def test_finite_diff_detects_wrong_gradient():
    bad = {"w": torch.tensor([5.0], dtype=torch.float64)}
    assert finite_diff_check(quad, scalar(1.0), analytic=bad) > 0.5
    assert finite_diff_check(quad, scalar(1.0)) < 1e-8


def test_finite_diff_reports_inf_on_nan():
    assert finite_diff_check(lambda p: torch.log(p["w"]).sum(), scalar(-1.0)) == math.inf


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=6), st.floats(0.0, 0.9))
def test_quadratic_meta_gradient_property(values, lr):
    init = {"w": torch.tensor(values, dtype=torch.float64)}
    g = grad_through_updates(quad, quad, init, 2, lr)["w"]
    expected = torch.tensor(values, dtype=torch.float64) * (1 - lr) ** 4
    assert torch.allclose(g, expected, rtol=1e-12, atol=1e-14)


def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    params = as_paramset({"b": rng.standard_normal((3, 2)), "a": rng.standard_normal(4),
                          "s": np.array(np.pi), "tiny": np.array([5e-324, -0.0, 1e308])})
    path = save_params(tmp_path / "p.ckpt", params, {"episode": 7})
    back, meta = load_params(path)
    assert list(back) == sorted(params)
    assert meta == {"episode": 7}
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].numpy().tobytes() == params[k].numpy().tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_text("hello\n")
    with pytest.raises(FormatError):
        load_params(p)
    p.write_text("# asmaml-paramset v1\nw 3\n0x1p+0 0x1p+1\n")
    with pytest.raises(FormatError, match="expects 3 values"):
        load_params(p)
