"""Backward pass guard and the finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from ..errors import GradientStateError, NumericError


def graph_leaves(loss: torch.Tensor) -> list[torch.Tensor]:
    """All ``requires_grad`` leaves reachable from ``loss`` (visit order)."""
    leaves, seen, on_path = [], set(), set()

    def visit(node):
        if node is None:
            return
        if id(node) in on_path:
            raise GradientStateError("cycle in autograd graph")
        if id(node) in seen:
            return
        seen.add(id(node))
        on_path.add(id(node))
        var = getattr(node, "variable", None)
        if var is not None:
            leaves.append(var)
        for nxt, _ in node.next_functions:
            visit(nxt)
        on_path.discard(id(node))

    visit(loss.grad_fn)
    return leaves


def zero_grad(tensors: Sequence[torch.Tensor]) -> None:
    for t in tensors:
        t.grad = None


def backward(loss: torch.Tensor) -> list[torch.Tensor]:
    """Populate ``.grad`` on every leaf feeding ``loss``.

    Raises if the loss is not a scalar, or if any leaf still holds a gradient
    from an earlier call (call :func:`zero_grad` first). Returns the leaves.
    """
    if loss.numel() != 1:
        raise GradientStateError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise GradientStateError("loss was not produced by taped primitives")
    leaves = graph_leaves(loss)
    stale = [i for i, t in enumerate(leaves) if t.grad is not None]
    if stale:
        raise GradientStateError(f"{len(stale)} leaf gradient(s) not reset before backward")
    loss.reshape(()).backward()
    return leaves


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: tuple[int, int]  # (tensor index, flat coordinate)
    n_coords: int


def numeric_gradient(f: Callable[..., torch.Tensor], point: Sequence[torch.Tensor], h: float) -> list[torch.Tensor]:
    """Central differences ``(f(x+h) - f(x-h)) / 2h``, one coordinate at a time."""
    xs = [p.detach().clone() for p in point]
    grads = []
    with torch.no_grad():
        for x in xs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + h
                fp = float(f(*xs))
                flat[j] = orig - h
                fm = float(f(*xs))
                flat[j] = orig
                if not (torch.isfinite(torch.tensor(fp)) and torch.isfinite(torch.tensor(fm))):
                    raise NumericError(f"grad_check: non-finite f at perturbed coordinate {j}")
                gflat[j] = (fp - fm) / (2.0 * h)
            grads.append(g)
    return grads


def analytic_gradient(f: Callable[..., torch.Tensor], point: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    xs = [p.detach().clone().requires_grad_(True) for p in point]
    loss = f(*xs)
    backward(loss)
    return [x.grad if x.grad is not None else torch.zeros_like(x) for x in xs]


def grad_check(
    f: Callable[..., torch.Tensor],
    point: Sequence[torch.Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    analytic: Sequence[torch.Tensor] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``analytic`` overrides the backward-pass gradients (used for negative
    controls).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    if analytic is None:
        analytic = analytic_gradient(f, point)
    numeric = numeric_gradient(f, point, h)
    worst, worst_at, n = 0.0, (0, 0), 0
    for i, (a, g) in enumerate(zip(analytic, numeric)):
        a, g = a.detach().reshape(-1), g.reshape(-1)
        denom = torch.maximum(torch.maximum(a.abs(), g.abs()), torch.full_like(a, 1e-8))
        rel = (a - g).abs() / denom
        n += rel.numel()
        if rel.numel() and float(rel.max()) > worst:
            worst = float(rel.max())
            worst_at = (i, int(rel.argmax()))
    return GradCheckReport(max_rel_error=worst, passed=worst <= tol, worst=worst_at, n_coords=n)
