"""Differentiable float64 primitives.

Thin, shape-checked wrappers over torch. Torch's autograd records the tape;
every primitive validates its operand shapes and refuses to return
non-finite values.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from ..errors import DimensionError, NumericError, TokenError

DTYPE = torch.float64


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(data, dtype=DTYPE).clone().requires_grad_(requires_grad)


def _finite(name: str, out: torch.Tensor) -> torch.Tensor:
    # a single reduction is non-finite iff some element is (or the sum overflows)
    if not math.isfinite(float(out.detach().sum())):
        raise NumericError(f"{name}: non-finite output")
    return out


def _broadcast(name: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise DimensionError(f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not conform")
    return _finite("matmul", a @ b)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("add", a, b)
    return _finite("add", a + b)


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("mul", a, b)
    return _finite("mul", a * b)


def embedding(table: torch.Tensor, ids) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if table.dim() != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {tuple(table.shape)}")
    if ids.numel() and (int(ids.max()) >= table.shape[0] or int(ids.min()) < 0):
        raise TokenError(f"embedding: id out of range for vocabulary of {table.shape[0]}")
    return table[ids]


def rms_norm(x: torch.Tensor, gain: torch.Tensor | None = None, eps: float = 1e-12) -> torch.Tensor:
    """``x / sqrt(mean(x**2) + eps)`` over the last axis, then times ``gain``."""
    if gain is not None and gain.shape != x.shape[-1:]:
        raise DimensionError(f"rms_norm: gain {tuple(gain.shape)} vs input {tuple(x.shape)}")
    y = x * torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + eps)
    if gain is not None:
        y = y * gain
    return _finite("rms_norm", y)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact (erf) GELU."""
    return _finite("gelu", 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0))))


def softmax(x: torch.Tensor) -> torch.Tensor:
    z = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return _finite("softmax", e / e.sum(dim=-1, keepdim=True))


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    z = x - x.max(dim=-1, keepdim=True).values.detach()
    return _finite("log_softmax", z - torch.log(torch.exp(z).sum(dim=-1, keepdim=True)))


def cross_entropy(logits: torch.Tensor, targets, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows (optionally masked).

    ``logits`` is ``(..., V)``; ``targets`` holds integer ids with shape
    ``logits.shape[:-1]``. A mask selects the rows that contribute.
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    if targets.numel() and (int(targets.max()) >= logits.shape[-1] or int(targets.min()) < 0):
        raise TokenError("cross_entropy: target id out of range")
    nll = -log_softmax(logits).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        return _finite("cross_entropy", nll.mean())
    mask = torch.as_tensor(mask, dtype=DTYPE)
    if mask.shape != nll.shape:
        raise DimensionError(f"cross_entropy: mask {tuple(mask.shape)} vs targets {tuple(nll.shape)}")
    count = mask.sum()
    if float(count) == 0:
        raise NumericError("cross_entropy: empty mask")
    return _finite("cross_entropy", (nll * mask).sum() / count)


def l2_norm(x: torch.Tensor) -> torch.Tensor:
    return _finite("l2_norm", torch.sqrt((x * x).sum(dim=-1)))


def rope_tables(positions: torch.Tensor, head_dim: int, base: float = 10000.0):
    """Rotary tables for half-split rotation: ``theta_i = base**(-2i/head_dim)``."""
    if head_dim % 2:
        raise DimensionError(f"rope: head_dim must be even, got {head_dim}")
    inv = base ** (-torch.arange(0, head_dim // 2, dtype=DTYPE) * 2.0 / head_dim)
    ang = positions.to(DTYPE).unsqueeze(-1) * inv
    return torch.cos(ang), torch.sin(ang)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate pairs ``(x[i], x[i + d/2])`` of the last axis by the tabled angles."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def causal_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    q_offset: int = 0,
    key_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scaled dot-product attention with a causal mask.

    ``q`` is ``(..., Tq, d)`` and ``k``/``v`` are ``(..., Tk, d)``. Query row
    ``i`` sits at absolute position ``q_offset + i`` and sees keys
    ``j <= q_offset + i``. ``key_mask`` (``(..., Tk)`` booleans, broadcast
    over queries) hides padding keys.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"causal_attention: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)} do not conform"
        )
    tq, tk = q.shape[-2], k.shape[-2]
    if q_offset + tq > tk:
        raise DimensionError(f"causal_attention: {tq} queries at offset {q_offset} exceed {tk} keys")
    if key_mask is None and q_offset == 0 and tq == tk:
        out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
    else:
        qpos = torch.arange(tq).unsqueeze(-1) + q_offset
        allowed = torch.arange(tk).unsqueeze(0) <= qpos
        if key_mask is not None:
            allowed = allowed & key_mask.unsqueeze(-2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed)
    return _finite("causal_attention", out)
