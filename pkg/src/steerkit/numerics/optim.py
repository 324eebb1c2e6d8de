from __future__ import annotations

from dataclasses import dataclass, field

import torch

from ..errors import DimensionError, NumericError


@dataclass
class AdamState:
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params):
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor],
    state: AdamState,
    t: int,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``p -= lr * m_hat / (sqrt(v_hat) + eps)`` with ``m_hat = m / (1 - beta1**t)``
    and ``v_hat = v / (1 - beta2**t)``.
    """
    if t < 1:
        raise ValueError(f"adam step index must be >= 1, got {t}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("adam: params, grads and state lengths differ")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g.shape != p.shape or m.shape != p.shape:
                raise DimensionError(f"adam: grad {tuple(g.shape)} vs param {tuple(p.shape)}")
            if not bool(torch.isfinite(g).all()):
                raise NumericError("adam: non-finite gradient")
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
