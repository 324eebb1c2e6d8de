"""Decoder-only transformer with activation taps, KV-cache decoding and a
residual-stream hook.

Blocks are pre-norm::

    h   = x + Attn(RMSNorm(x))        (rotary positions, causal)
    out = h + W2 gelu(W1 RMSNorm(h))

The output projection is the transposed token embedding (tied weights), so a
token's identity and the prediction of that token share one direction in the
residual stream. ``tie_embeddings=False`` gives a separate ``unembed`` matrix.

The tap point for layer ``l`` is ``out`` of block ``l``, before the final
model-level norm. A hook at layer ``l`` rewrites that vector for generated
positions only, and blocks ``l + 1 ..`` consume the rewritten value.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch

from .errors import DimensionError, NumericError, TokenError, TrainingDivergedError
from .numerics import checkpoint, ops
from .numerics.autograd import backward, zero_grad
from .numerics.optim import AdamState, adam_step
from .numerics.rng import Rng
from .synth_task import PAD, STOP

log = logging.getLogger(__name__)

PROMPT, GENERATED = "prompt", "generated"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 256
    seed: int = 0
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ActivationTrace:
    """Tapped block outputs keyed by layer; positions are absolute."""

    gen_start: int
    positions: dict[int, list[int]] = field(default_factory=dict)
    vectors: dict[int, list[torch.Tensor]] = field(default_factory=dict)

    def add(self, layer: int, position: int, vector: torch.Tensor) -> None:
        self.positions.setdefault(layer, []).append(position)
        self.vectors.setdefault(layer, []).append(vector.detach().clone())

    def role(self, position: int) -> str:
        return GENERATED if position >= self.gen_start else PROMPT

    @property
    def layers(self) -> list[int]:
        return sorted(self.positions)

    def is_empty(self) -> bool:
        return not self.positions

    def generated(self, layer: int) -> torch.Tensor:
        """``(n_generated, d_model)`` stack of generated-position vectors."""
        rows = [v for p, v in zip(self.positions.get(layer, []), self.vectors.get(layer, [])) if p >= self.gen_start]
        if not rows:
            return torch.zeros(0, 0, dtype=ops.DTYPE)
        return torch.stack(rows)

    def records(self) -> Iterable[dict]:
        for layer in self.layers:
            for p, v in zip(self.positions[layer], self.vectors[layer]):
                yield {"layer": layer, "position": p, "role": self.role(p), "vector": v.tolist()}


def write_trace_jsonl(path: str | Path, traces: Sequence[ActivationTrace], sample_ids: Sequence[int] | None = None) -> None:
    """One JSON record per (sample, layer, position)."""
    ids = range(len(traces)) if sample_ids is None else sample_ids
    with open(path, "w") as fh:
        for sid, tr in zip(ids, traces):
            for rec in tr.records():
                fh.write(json.dumps({"sample": sid, **rec}) + "\n")


@dataclass
class GenerationResult:
    tokens: list[int]
    status: str  # "ok" | "budget_exhausted"
    steps_used: int
    trace: ActivationTrace | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class LayerHook:
    """Rewrites the block-``layer`` output at generated positions."""

    layer: int
    fn: Callable[[torch.Tensor], torch.Tensor]

    def __call__(self, vector: torch.Tensor) -> torch.Tensor:
        return self.fn(vector)


@dataclass(frozen=True)
class Greedy:
    def pick(self, logits: torch.Tensor, step: int) -> int:
        return int(torch.argmax(logits))


@dataclass(frozen=True)
class Temperature:
    tau: float
    seed: int = 0

    def pick(self, logits: torch.Tensor, step: int) -> int:
        probs = ops.softmax(logits / self.tau).numpy()
        return int(Rng(self.seed, step).categorical(probs))


class Transformer:
    def __init__(self, config: ModelConfig, params: dict[str, torch.Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        self.digest = ""

    # -- forward ---------------------------------------------------------

    def _attn(self, l: int, x: torch.Tensor, positions: torch.Tensor, cache=None, q_offset: int = 0):
        c, P = self.config, self.params
        B, T, _ = x.shape
        h = ops.rms_norm(x, P[f"blocks.{l}.attn_norm"])

        def heads(w):
            return ops.matmul(h, P[f"blocks.{l}.{w}"]).view(B, T, c.n_heads, c.head_dim).transpose(1, 2)

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        cos, sin = ops.rope_tables(positions, c.head_dim)
        q, k = ops.apply_rope(q, cos, sin), ops.apply_rope(k, cos, sin)
        if cache is not None:
            if cache[l] is not None:
                k = torch.cat([cache[l][0], k], dim=2)
                v = torch.cat([cache[l][1], v], dim=2)
            cache[l] = (k, v)
        a = ops.causal_attention(q, k, v, q_offset=q_offset)
        a = a.transpose(1, 2).reshape(B, T, c.d_model)
        return ops.matmul(a, P[f"blocks.{l}.wo"])

    def _mlp(self, l: int, x: torch.Tensor) -> torch.Tensor:
        P = self.params
        h = ops.rms_norm(x, P[f"blocks.{l}.mlp_norm"])
        return ops.matmul(ops.gelu(ops.matmul(h, P[f"blocks.{l}.w1"])), P[f"blocks.{l}.w2"])

    def _block(self, l, x, positions, cache=None, q_offset=0):
        x = ops.add(x, self._attn(l, x, positions, cache, q_offset))
        return ops.add(x, self._mlp(l, x))

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.shape[-1] > self.config.max_seq_len:
            raise DimensionError(f"sequence of {tokens.shape[-1]} exceeds max_seq_len={self.config.max_seq_len}")
        if tokens.numel() and (int(tokens.max()) >= self.config.vocab_size or int(tokens.min()) < 0):
            raise TokenError(f"token id outside [0, {self.config.vocab_size})")

    def _check_layers(self, layers: Iterable[int]) -> None:
        for l in layers:
            if not 0 <= l < self.config.n_layers:
                raise ValueError(f"layer {l} outside [0, {self.config.n_layers})")

    def forward(
        self,
        tokens,
        gen_start: int | None = None,
        tap: Iterable[int] = (),
        hook: LayerHook | None = None,
    ) -> tuple[torch.Tensor, ActivationTrace]:
        """Full-context forward pass over one sequence.

        Returns ``(logits (T, vocab), trace)``. Positions ``>= gen_start`` are
        generated; the hook, if any, rewrites only those.
        """
        tokens = torch.as_tensor(tokens, dtype=torch.long).reshape(-1)
        T = tokens.shape[0]
        gen_start = T if gen_start is None else gen_start
        if not 0 <= gen_start <= T:
            raise ValueError(f"gen_start={gen_start} outside [0, {T}]")
        self._check_tokens(tokens)
        tap = sorted(set(tap))
        self._check_layers(tap)
        if hook is not None:
            self._check_layers([hook.layer])
        trace = ActivationTrace(gen_start)
        x = ops.embedding(self.params["embed"], tokens).unsqueeze(0)
        positions = torch.arange(T)
        for l in range(self.config.n_layers):
            x = self._block(l, x, positions)
            if hook is not None and hook.layer == l and gen_start < T:
                rows = [hook(x[0, p]) for p in range(gen_start, T)]
                x = torch.cat([x[:, :gen_start], torch.stack(rows).unsqueeze(0)], dim=1)
                _finite_hidden(x)
            if l in tap:
                for p in range(T):
                    trace.add(l, p, x[0, p])
        logits = self._head(x)[0]
        return logits, trace

    def _head(self, x: torch.Tensor) -> torch.Tensor:
        h = ops.rms_norm(x, self.params["final_norm"])
        if self.config.tie_embeddings:
            return ops.matmul(h, self.params["embed"].T)
        return ops.matmul(h, self.params["unembed"])

    def batch_logits(self, tokens: torch.Tensor) -> torch.Tensor:
        """``(B, T)`` right-padded batch to ``(B, T, vocab)`` logits (training path)."""
        self._check_tokens(tokens)
        x = ops.embedding(self.params["embed"], tokens)
        positions = torch.arange(tokens.shape[1])
        for l in range(self.config.n_layers):
            x = self._block(l, x, positions)
        return self._head(x)

    # -- decoding --------------------------------------------------------

    def _step(self, tokens: torch.Tensor, start: int, cache, hook, tap, trace, gen_start):
        """Run positions ``start .. start+len(tokens)-1`` through all blocks using ``cache``."""
        x = ops.embedding(self.params["embed"], tokens).unsqueeze(0)
        T = tokens.shape[0]
        positions = torch.arange(start, start + T)
        for l in range(self.config.n_layers):
            x = self._block(l, x, positions, cache, q_offset=start)
            if hook is not None and hook.layer == l:
                rows = [hook(x[0, i]) if start + i >= gen_start else x[0, i] for i in range(T)]
                x = torch.stack(rows).unsqueeze(0)
                _finite_hidden(x)
            if l in tap:
                for i in range(T):
                    trace.add(l, start + i, x[0, i])
        return self._head(x)[0, -1]

    @torch.no_grad()
    def generate(
        self,
        prompt: Sequence[int],
        max_new: int,
        sampler=Greedy(),
        hook: LayerHook | None = None,
        tap: Iterable[int] = (),
        use_cache: bool = True,
        stop_token: int = STOP,
    ) -> GenerationResult:
        """Autoregressive decoding until ``stop_token`` or the budget runs out.

        With ``use_cache=False`` every step re-runs the full context, which is
        the reference path for cache-consistency checks.
        """
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        if len(prompt) == 0:
            raise ValueError("empty prompt")
        tap = set(tap)
        self._check_layers(tap)
        if hook is not None:
            self._check_layers([hook.layer])
        gen_start = len(prompt)
        seq = list(prompt)
        self._check_tokens(torch.as_tensor(seq))
        trace = ActivationTrace(gen_start)
        out: list[int] = []
        status = "budget_exhausted"
        cache = [None] * self.config.n_layers
        if use_cache:
            logits = self._step(torch.as_tensor(seq), 0, cache, hook, tap, trace, gen_start)
        for step in range(max_new):
            if not use_cache:
                logits, full = self.forward(seq, gen_start, tap, hook)
                logits = logits[-1]
            tok = sampler.pick(logits, step)
            out.append(tok)
            if tok == stop_token:
                status = "ok"
                break
            if step == max_new - 1 or len(seq) + 1 > self.config.max_seq_len:
                break
            seq.append(tok)
            if use_cache:
                logits = self._step(torch.as_tensor([tok]), len(seq) - 1, cache, hook, tap, trace, gen_start)
        if not use_cache and tap:
            _, trace = self.forward(seq, gen_start, tap, hook)
        return GenerationResult(out, status, len(out), trace if tap else None)

    # -- persistence -----------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None) -> str:
        meta = {"config": asdict(self.config), **(extra or {})}
        self.digest = checkpoint.save(path, self.params, meta)
        return self.digest

    @classmethod
    def load(cls, path: str | Path) -> "Transformer":
        tensors, meta, digest = checkpoint.load(path)
        config = dict(meta["config"])
        config.setdefault("tie_embeddings", "unembed" not in tensors)
        model = cls(ModelConfig(**config), tensors)
        model.digest = digest
        return model


def _finite_hidden(x: torch.Tensor) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericError("non-finite hidden state after hook")


def param_names(config: ModelConfig) -> list[str]:
    names = ["embed"]
    for l in range(config.n_layers):
        names += [f"blocks.{l}.{n}" for n in ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2")]
    return names + ["final_norm"] + ([] if config.tie_embeddings else ["unembed"])


def init_params(config: ModelConfig) -> dict[str, torch.Tensor]:
    """Gaussian init from the config seed; residual outputs scaled by ``1/sqrt(2L)``."""
    rng = Rng(config.seed, 0x1A17)
    d, f, V = config.d_model, config.d_ff, config.vocab_size
    out_scale = 1.0 / math.sqrt(2 * config.n_layers)
    # tied embeddings double as the output projection: rows start near unit
    # norm, so step-0 logits have unit variance (smaller starts stall training)
    embed_std = d**-0.5 if config.tie_embeddings else 1.0
    shapes = {"embed": ((V, d), embed_std), "final_norm": ((d,), None), "unembed": ((d, V), 0.02)}
    for l in range(config.n_layers):
        shapes.update(
            {
                f"blocks.{l}.attn_norm": ((d,), None),
                f"blocks.{l}.wq": ((d, d), d**-0.5),
                f"blocks.{l}.wk": ((d, d), d**-0.5),
                f"blocks.{l}.wv": ((d, d), d**-0.5),
                f"blocks.{l}.wo": ((d, d), d**-0.5 * out_scale),
                f"blocks.{l}.mlp_norm": ((d,), None),
                f"blocks.{l}.w1": ((d, f), d**-0.5),
                f"blocks.{l}.w2": ((f, d), f**-0.5 * out_scale),
            }
        )
    params = {}
    for name in param_names(config):
        shape, std = shapes[name]
        if std is None:
            t = torch.ones(shape, dtype=ops.DTYPE)
        else:
            t = torch.from_numpy(rng.child(name).normal(shape, std=std))
        params[name] = t.requires_grad_(True)
    return params


# -- training --------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 100
    min_lr_ratio: float = 0.1
    seed: int = 0
    log_every: int = 50

    def lr_at(self, step: int) -> float:
        """Linear warmup then cosine decay to ``min_lr_ratio * lr``."""
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        frac = (step - self.warmup) / max(1, self.steps - self.warmup)
        cos = 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))
        return self.lr * (self.min_lr_ratio + (1 - self.min_lr_ratio) * cos)


def collate(examples: Sequence[tuple[Sequence[int], int]]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-pad examples into ``(inputs, targets, loss_mask)`` for next-token loss.

    The mask selects predictions of tokens at positions ``>= gen_start``.
    """
    T = max(len(t) for t, _ in examples) - 1
    B = len(examples)
    inputs = torch.full((B, T), PAD, dtype=torch.long)
    targets = torch.full((B, T), PAD, dtype=torch.long)
    mask = torch.zeros((B, T), dtype=ops.DTYPE)
    for b, (toks, gs) in enumerate(examples):
        n = len(toks) - 1
        inputs[b, :n] = torch.as_tensor(toks[:-1])
        targets[b, :n] = torch.as_tensor(toks[1:])
        mask[b, max(gs - 1, 0) : n] = 1.0
    return inputs, targets, mask


def loss_on(model: Transformer, examples) -> torch.Tensor:
    inputs, targets, mask = collate(examples)
    return ops.cross_entropy(model.batch_logits(inputs), targets, mask)


@dataclass
class TrainResult:
    model: Transformer
    losses: list[tuple[int, float]]  # (step, loss) at every logged step
    state: AdamState
    step: int


def train(
    examples: Sequence[tuple[Sequence[int], int]],
    config: ModelConfig,
    schedule: Schedule = Schedule(),
    model: Transformer | None = None,
    state: AdamState | None = None,
    start_step: int = 0,
    on_log: Callable[[int, float], None] | None = None,
    stop_at: int | None = None,
) -> TrainResult:
    """Teacher-forced training on generated positions only.

    Batch order and learning rate are deterministic functions of
    ``schedule`` and the step index, so a run stopped early with ``stop_at``
    and resumed at ``start_step`` replays the uninterrupted run exactly.
    """
    if not examples:
        raise ValueError("empty training corpus")
    longest = max(len(t) for t, _ in examples)
    if longest > config.max_seq_len:
        raise DimensionError(f"example of length {longest} exceeds max_seq_len={config.max_seq_len}")
    model = model or Transformer(config)
    names = param_names(config)
    params = [model.params[n] for n in names]
    for p in params:
        p.requires_grad_(True)
    state = state or AdamState.zeros_like(params)
    order_rng = Rng(schedule.seed, 0x0BA7C4)
    per_epoch = max(1, len(examples) // schedule.batch_size)
    perm, perm_epoch = None, -1
    losses = []
    end = schedule.steps if stop_at is None else min(stop_at, schedule.steps)
    for step in range(start_step, end):
        epoch, slot = divmod(step, per_epoch)
        if epoch != perm_epoch:
            perm, perm_epoch = order_rng.child(epoch).permutation(len(examples)), epoch
        idx = perm[slot * schedule.batch_size : (slot + 1) * schedule.batch_size]
        batch = [examples[i] for i in idx]
        zero_grad(params)
        loss = loss_on(model, batch)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        backward(loss)
        adam_step(params, [p.grad for p in params], state, t=step + 1, lr=schedule.lr_at(step))
        if step % schedule.log_every == 0 or step == end - 1:
            losses.append((step, value))
            log.info("step %d loss %.4f", step, value)
            if on_log:
                on_log(step, value)
    zero_grad(params)
    return TrainResult(model, losses, state, max(end, start_step))
