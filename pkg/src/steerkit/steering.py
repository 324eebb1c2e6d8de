"""Contrastive steering vectors: extraction, norm-preserving application,
persistence and layer/strength sweeps.

A stored vector points from the neutral condition towards the accented one::

    v_l = mean_i a_{l,i}(accented) - mean_i a_{l,i}(neutral)

where ``a_{l,i}`` is sample ``i``'s layer-``l`` output averaged over its
generated positions. At decode time each generated position's layer-``l``
output ``a`` becomes ``s * |a| / |s|`` with ``s = a - alpha * v`` (or
``a + alpha * v`` to accentuate).
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import struct
import warnings
from dataclasses import asdict, dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch

from .errors import DimensionError, ExtractionError, FormatError, VersionError
from .numerics.rng import Rng
from .parallel import ordered_map
from .synth_task import Triplet, Vocab, build_prompt, perturb_reference
from .transformer import GenerationResult, Greedy, LayerHook, Transformer

SUBTRACT, ADD = "subtract", "add"
VECTOR_MAGIC = b"STKV"
VECTOR_FORMAT_VERSION = 1


@dataclass(frozen=True)
class VectorMeta:
    n_accented: int
    n_neutral: int
    augmented: bool
    checkpoint_digest: str
    seed: int
    created: str | None = None


@dataclass
class SteeringVector:
    layer: int
    values: torch.Tensor
    meta: VectorMeta

    def __post_init__(self):
        if self.meta.n_accented < 1 or self.meta.n_neutral < 1:
            raise ValueError("steering vector needs at least one sample per condition")

    @property
    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.values))


@dataclass(frozen=True)
class SteerConfig:
    layer: int
    alpha: float = 1.0
    sign: str = SUBTRACT
    eps: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.sign not in (SUBTRACT, ADD):
            raise ValueError(f"sign must be '{SUBTRACT}' or '{ADD}', got {self.sign!r}")


def apply_steering(
    activation: torch.Tensor,
    vector: SteeringVector | torch.Tensor,
    config: SteerConfig,
    events: list | None = None,
) -> torch.Tensor:
    """Shift ``activation`` along the vector and rescale to its original L2 norm.

    Falls back to the unmodified activation (and appends to ``events``) when
    the shifted vector is degenerate: ``|s| < eps * |a|``, or ``|a| = 0``.
    """
    v = vector.values if isinstance(vector, SteeringVector) else vector
    if activation.shape != v.shape:
        raise DimensionError(f"activation {tuple(activation.shape)} vs steering vector {tuple(v.shape)}")
    if config.alpha == 0.0 or not bool(v.any()):
        return activation
    step = config.alpha * v
    s = activation - step if config.sign == SUBTRACT else activation + step
    a_norm = torch.linalg.vector_norm(activation)
    s_norm = torch.linalg.vector_norm(s)
    if float(a_norm) == 0.0 or float(s_norm) < config.eps * float(a_norm):
        if events is not None:
            events.append("norm_guard")
        return activation
    return s * (a_norm / s_norm)


class SteeringHook(LayerHook):
    """Decode-time hook that applies :func:`apply_steering` and counts guard events."""

    def __init__(self, vector: SteeringVector, config: SteerConfig):
        if vector.layer != config.layer:
            raise ValueError(f"vector is for layer {vector.layer}, config targets layer {config.layer}")
        self.vector, self.config, self.events = vector, config, []
        super().__init__(config.layer, lambda a: apply_steering(a, vector, config, self.events))


# -- extraction ------------------------------------------------------------


def generation_budget(triplet: Triplet) -> int:
    return 4 * len(triplet.target_text)


@dataclass
class SampleMeans:
    """Per-sample generated-token means, in sample-index order."""

    results: list[GenerationResult]
    means: list[dict[int, torch.Tensor] | None]  # None for dropped samples

    @property
    def kept(self) -> list[dict[int, torch.Tensor]]:
        return [m for m in self.means if m is not None]


def _decode_one(model, layers, augment, strength, vocab, item):
    trip, rng = item
    if augment:
        ref = perturb_reference(trip.reference_sequence, strength, rng, vocab)
        trip = Triplet(trip.target_text, trip.reference_text, tuple(ref), trip.speaker_id, trip.accent_prob)
    res = model.generate(build_prompt(trip, vocab), generation_budget(trip), Greedy(), tap=layers)
    rows = {l: res.trace.generated(l) for l in layers}
    if not res.ok or any(r.shape[0] == 0 for r in rows.values()):
        return res, None
    return res, {l: _ordered_mean(list(r)) for l, r in rows.items()}


def sample_means(
    model: Transformer,
    triplets: Sequence[Triplet],
    layers: Iterable[int],
    augment: bool = False,
    rng: Rng | None = None,
    strength: float = 20.0,
    vocab: Vocab = Vocab(),
    jobs: int = 1,
) -> SampleMeans:
    """Decode every triplet (greedy, unsteered) and average tapped outputs over generated positions.

    Sample ``i`` perturbs its reference with ``rng.child(i)`` when
    ``augment`` is set. Samples that exhaust the budget, or that stop before
    any generated token is fed back, are dropped (``None``).
    """
    layers = sorted(set(layers))
    rng = rng or Rng(0)
    items = [(t, rng.child(i)) for i, t in enumerate(triplets)]
    out = ordered_map(partial(_decode_one, model, layers, augment, strength, vocab), items, jobs)
    return SampleMeans([r for r, _ in out], [m for _, m in out])


def _ordered_mean(rows: Sequence[torch.Tensor]) -> torch.Tensor:
    total = torch.zeros_like(rows[0])
    for r in rows:
        total = total + r
    return total / len(rows)


def difference_of_means(
    accented: Sequence[dict[int, torch.Tensor]],
    neutral: Sequence[dict[int, torch.Tensor]],
    layers: Iterable[int],
) -> dict[int, torch.Tensor]:
    """``mean(accented) - mean(neutral)`` per layer, summed in index order."""
    if not accented:
        raise ExtractionError("no successful samples in the accented condition")
    if not neutral:
        raise ExtractionError("no successful samples in the neutral condition")
    return {l: _ordered_mean([m[l] for m in accented]) - _ordered_mean([m[l] for m in neutral]) for l in layers}


@dataclass
class Extraction:
    vectors: dict[int, SteeringVector]
    accented: SampleMeans
    neutral: SampleMeans


def extract_vectors(
    model: Transformer,
    accented: Sequence[Triplet],
    neutral: Sequence[Triplet],
    layers: Iterable[int],
    augment: bool = False,
    rng: Rng | None = None,
    strength: float = 20.0,
    timestamp: bool = False,
    vocab: Vocab = Vocab(),
    jobs: int = 1,
) -> Extraction:
    """Per-layer difference of mean generated-token activations between two conditions."""
    if not accented or not neutral:
        raise ExtractionError("both conditions need at least one triplet")
    layers = sorted(set(layers))
    if not layers:
        raise ValueError("no layers requested")
    for l in layers:
        if not 0 <= l < model.config.n_layers:
            raise ValueError(f"layer {l} outside [0, {model.config.n_layers})")
    rng = rng or Rng(0)
    acc = sample_means(model, accented, layers, augment, rng.child("accented"), strength, vocab, jobs)
    neu = sample_means(model, neutral, layers, augment, rng.child("neutral"), strength, vocab, jobs)
    diffs = difference_of_means(acc.kept, neu.kept, layers)
    meta = VectorMeta(
        n_accented=len(acc.kept),
        n_neutral=len(neu.kept),
        augmented=augment,
        checkpoint_digest=model.digest,
        seed=rng.seed,
        created=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds") if timestamp else None,
    )
    vectors = {l: SteeringVector(l, diffs[l], meta) for l in layers}
    return Extraction(vectors, acc, neu)


# -- persistence -----------------------------------------------------------


def encode_vectors(vectors: dict[int, SteeringVector]) -> bytes:
    if not vectors:
        raise ValueError("no vectors to save")
    d = {v.values.numel() for v in vectors.values()}
    if len(d) != 1:
        raise DimensionError(f"vectors disagree on dimension: {sorted(d)}")
    parts = [VECTOR_MAGIC, struct.pack("<III", VECTOR_FORMAT_VERSION, d.pop(), len(vectors))]
    for layer in sorted(vectors):
        v = vectors[layer]
        meta = json.dumps(asdict(v.meta), sort_keys=True).encode()
        parts.append(struct.pack("<II", layer, len(meta)) + meta)
        parts.append(v.values.detach().numpy().astype("<f8").tobytes())
    return b"".join(parts)


def decode_vectors(buf: bytes) -> dict[int, SteeringVector]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"vector file truncated at byte {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != VECTOR_MAGIC:
        raise FormatError("not a steering-vector file (bad magic)")
    version, d_model, count = struct.unpack("<III", take(12))
    if version != VECTOR_FORMAT_VERSION:
        raise VersionError(f"vector format version {version}, expected {VECTOR_FORMAT_VERSION}")
    out = {}
    for _ in range(count):
        layer, mlen = struct.unpack("<II", take(8))
        try:
            meta = VectorMeta(**json.loads(take(mlen)))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"bad metadata for layer {layer}: {exc}") from None
        values = torch.frombuffer(bytearray(take(8 * d_model)), dtype=torch.float64)
        out[layer] = SteeringVector(layer, values.clone(), meta)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes in vector file")
    return out


def save_vectors(vectors: dict[int, SteeringVector], path: str | Path) -> str:
    """Write the binary vector file; returns its sha256 digest."""
    data = encode_vectors(vectors)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_vectors(path: str | Path, model: Transformer | None = None) -> dict[int, SteeringVector]:
    vectors = decode_vectors(Path(path).read_bytes())
    if model is not None:
        for v in vectors.values():
            if v.values.numel() != model.config.d_model:
                raise DimensionError(
                    f"vector file has d_model={v.values.numel()}, model has d_model={model.config.d_model}"
                )
            if v.layer >= model.config.n_layers:
                raise DimensionError(f"vector for layer {v.layer} but model has {model.config.n_layers} layers")
        digests = {v.meta.checkpoint_digest for v in vectors.values()}
        if model.digest and digests != {model.digest}:
            warnings.warn("steering vectors were extracted from a different checkpoint", stacklevel=2)
    return vectors


def export_vectors_json(vectors: dict[int, SteeringVector], path: str | Path) -> None:
    doc = {
        str(l): {"meta": asdict(v.meta), "norm": v.norm, "values": v.values.tolist()}
        for l, v in sorted(vectors.items())
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


# -- sweeps ------------------------------------------------------------------


def _steer_one(model, vector, config, tap, vocab, trip):
    hook = SteeringHook(vector, config) if vector is not None and config is not None else None
    res = model.generate(build_prompt(trip, vocab), generation_budget(trip), Greedy(), hook=hook, tap=tap)
    return res, len(hook.events) if hook else 0


def steered_generations(
    model: Transformer,
    triplets: Sequence[Triplet],
    vector: SteeringVector | None,
    config: SteerConfig | None,
    vocab: Vocab = Vocab(),
    tap: Iterable[int] = (),
    jobs: int = 1,
    per_sample_events: bool = False,
):
    """Greedy generations for ``triplets`` under one steering condition.

    Returns the results and the number of norm-guard events (a per-sample
    list of counts when ``per_sample_events`` is set). ``tap`` records traces
    in the same decoding pass.
    """
    out = ordered_map(partial(_steer_one, model, vector, config, tuple(tap), vocab), triplets, jobs)
    results, events = [r for r, _ in out], [e for _, e in out]
    return results, events if per_sample_events else sum(events)


def default_grid(n_layers: int, alphas: Sequence[float] = (1.0, 2.0)) -> list[tuple[int, float]]:
    return [(l, a) for l in range(n_layers) for a in alphas]


def sweep(
    model: Transformer,
    vectors: dict[int, SteeringVector],
    grid: Sequence[tuple[int, float]],
    eval_set: Sequence[Triplet],
    evaluate: Callable,
    out_path: str | Path | None = None,
    sign: str = SUBTRACT,
    vocab: Vocab = Vocab(),
    label_prefix: str = "",
    jobs: int = 1,
) -> list:
    """Unsteered baseline row, then one row per ``(layer, alpha)``.

    ``evaluate(results, triplets, label, layer, alpha, guard_events)`` turns
    generations into an :class:`~steerkit.evaluation.EvalRow`. When
    ``out_path`` is given, each row is appended to that CSV as soon as it is
    computed, and rows already present are reused instead of recomputed.
    ``label_prefix`` is prepended to every condition label.
    """
    from .evaluation import append_row_csv, read_rows_csv

    missing = sorted({l for l, _ in grid if l not in vectors})
    if missing:
        raise ExtractionError(f"no steering vector for grid layer(s) {missing}")
    done = {}
    if out_path is not None and Path(out_path).exists():
        done = {r.condition: r for r in read_rows_csv(out_path)}
    conditions = [(f"{label_prefix}unsteered", None, None)]
    conditions += [(f"{label_prefix}layer{l}_alpha{a:g}_{sign}", l, a) for l, a in grid]
    rows = []
    for label, layer, alpha in conditions:
        if label in done:
            rows.append(done[label])
            continue
        if layer is None:
            results, events = steered_generations(model, eval_set, None, None, vocab, jobs=jobs)
        else:
            cfg = SteerConfig(layer, alpha, sign)
            results, events = steered_generations(model, eval_set, vectors[layer], cfg, vocab, jobs=jobs)
        row = evaluate(results, eval_set, label, layer, alpha, events)
        rows.append(row)
        if out_path is not None:
            append_row_csv(out_path, row)
    return rows
