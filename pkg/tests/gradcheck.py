"""Shared gradient-checking helpers for the test suite.

The finite-difference oracle lives in the library; these helpers wrap the
compare loop so unit tests and the acceptance gate assert the same way.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from varenc.autodiff import (
    constant,
    Tensor,
    backward,
    elementwise,
    finite_difference_grad,
    matmul,
    parameter,
    zero_grads,
)


def rel_error(analytic: np.ndarray, estimate: np.ndarray) -> float:
    """Max abs difference, normalized by the oracle's scale (floor 1)."""
    diff = np.max(np.abs(analytic - estimate))
    scale = max(1.0, float(np.max(np.abs(estimate))))
    return float(diff / scale)


def assert_grads_match(
    build_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    rel_tol: float = 1e-4,
    eps: float = 1e-5,
) -> float:
    """Backprop through `build_loss()` and compare against central differences.

    Returns the worst relative error over all parameters.
    """
    zero_grads(params)
    loss = build_loss()
    backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in params]
    numeric = finite_difference_grad(lambda: build_loss().item(), params, eps=eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = rel_error(a, n)
        worst = max(worst, err)
        assert err < rel_tol, f"gradient mismatch: rel error {err:.3e} >= {rel_tol}"
    return worst


def build_ve_graph(model, x_src, x_tgt, y, eps, l1_target: np.ndarray | None = None):
    """Rebuild the combined pair loss with a fixed epsilon draw.

    With `l1_target=None` the graph matches training exactly (live detach of
    the sampled point). Passing the sample's base-point values instead makes
    the L1 anchor a frozen constant, which is the form finite differences
    can check: FD and backward only agree on a stopped gradient when the
    stopped value does not move with the perturbation.
    """
    from varenc.autodiff import constant
    from varenc.model import gaussian_head, kl_diag_gaussian, reparameterize
    from varenc.nn import cross_entropy_rows, linear, mlp_forward

    hyper = model.hyper
    e_src = mlp_forward(model.encoder_source, constant(x_src))
    e_tgt = mlp_forward(model.encoder_target, constant(x_tgt))
    p_src = gaussian_head(e_src, model.head_source)
    p_tgt = gaussian_head(e_tgt, model.head_target)
    z = reparameterize(p_tgt, eps)
    logits_src = linear(e_src, model.cls_w, model.cls_b)
    logits_tgt = linear(z, model.cls_w, model.cls_b)

    d_entropy = cross_entropy_rows(logits_src, y) + cross_entropy_rows(logits_tgt, y)
    anchor = z.detach() if l1_target is None else constant(l1_target).detach()
    l1 = (e_src - anchor).abs().mean()
    kl = kl_diag_gaussian(p_src, p_tgt).mean()
    d_dist = l1 + kl.scale(hyper.kl_sign * hyper.beta)
    return d_entropy.scale(hyper.alpha) + d_dist.scale(hyper.gamma)


def sample_z_values(model, x_tgt, eps) -> np.ndarray:
    """Base-point values of the reparameterized sample (no grad tracking)."""
    from varenc.autodiff import constant
    from varenc.model import gaussian_head, reparameterize
    from varenc.nn import mlp_forward

    e_tgt = mlp_forward(model.encoder_target, constant(x_tgt))
    p_tgt = gaussian_head(e_tgt, model.head_target)
    return reparameterize(p_tgt, eps).values.copy()


def composite_graph(seed: int):
    """A loss touching every registered op; returns (build, params, kink_gap).

    `kink_gap` is the smallest |input| reaching relu/abs: callers should skip
    seeds where it is tiny, since finite differences straddle the kink there.

    The detach node is fed a base-point constant rather than the live
    subgraph: finite differences and backward only agree on a stopped
    gradient when the stopped value does not move with the perturbation.
    Live-barrier behaviour is covered by the dedicated ablation tests.
    """
    rng = np.random.default_rng(seed)
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(3, 4)))
    c = parameter(rng.normal(size=(4, 2)))
    pos = parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    row = parameter(rng.normal(size=(1, 4)))
    s = parameter(rng.normal(size=(1,)))

    t4_base = ((a.values + b.values) * a.values - row.values) / pos.values
    kink_gap = float(np.min(np.abs(t4_base)))
    t6_base = np.maximum(t4_base, 0.0) + 0.5 * np.abs(t4_base) + s.values

    def build() -> Tensor:
        t1 = elementwise("add", a, b)
        t2 = elementwise("mul", t1, a)
        t3 = elementwise("sub", t2, row)
        t4 = elementwise("div", t3, pos)
        t5 = t4.relu() + elementwise("scale", t4.abs(), 0.5)
        t6 = t5 + s
        m = matmul(t6, c)
        t7 = m.exp().scale(0.05)
        t8 = elementwise("log", pos).sum(axis=1)
        frozen = constant(t6_base).detach()
        anchored = (frozen * t6).mean()
        return t7.sum() + t8.mean() + t6.mean(axis=0).sum() + anchored

    return build, [a, b, c, pos, row, s], kink_gap
