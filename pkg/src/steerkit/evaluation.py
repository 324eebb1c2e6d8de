"""Toy-domain metrics: inference success rate, accent match rate, speaker
similarity and content error rate, plus CSV/JSON reporting."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import SteerkitError
from .numerics.rng import Rng
from .synth_task import Triplet, Vocab, accented_fraction, content_words, timbre_histogram

ACCENTED, NEUTRAL = "accented", "neutral"


class UndefinedEmbeddingError(SteerkitError, ValueError):
    pass


def isr(results: Sequence) -> float:
    """Share of generations that emitted the stop token within budget."""
    if not results:
        raise ValueError("isr of an empty batch")
    return sum(r.status == "ok" for r in results) / len(results)


@dataclass(frozen=True)
class AttrClassifier:
    """Binary accent decision on the accented-variant fraction of a sequence.

    ``threshold``: accented iff fraction >= ``threshold``.
    ``logistic``: accented iff ``weight * fraction + bias >= 0``.
    """

    kind: str = "threshold"
    threshold: float = 0.5
    weight: float = 0.0
    bias: float = 0.0
    heldout_accuracy: float | None = None

    def decide(self, seq: Sequence[int], vocab: Vocab = Vocab()) -> str | None:
        frac = accented_fraction(seq, vocab)
        if frac is None:
            return None
        if self.kind == "threshold":
            return ACCENTED if frac >= self.threshold else NEUTRAL
        return ACCENTED if self.weight * frac + self.bias >= 0 else NEUTRAL

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "AttrClassifier":
        return cls(**json.loads(Path(path).read_text()))


def _fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1e-3, iters: int = 50) -> tuple[float, float]:
    """Newton's method on the L2-regularised logistic loss for one feature."""
    w = np.zeros(2)
    X = np.stack([x, np.ones_like(x)], axis=1)
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(X @ w)))
        grad = X.T @ (p - y) / len(y) + l2 * np.array([w[0], 0.0])
        hess = (X.T * (p * (1 - p))) @ X / len(y) + l2 * np.diag([1.0, 1e-9])
        step = np.linalg.solve(hess, grad)
        w -= step
        if np.abs(step).max() < 1e-12:
            break
    return float(w[0]), float(w[1])


def train_attr_classifier(
    corpus: Sequence[tuple[Sequence[int], str]],
    seed: int = 0,
    heldout: float = 0.2,
    vocab: Vocab = Vocab(),
) -> AttrClassifier:
    """Logistic regression on accented fraction with a seeded held-out split."""
    feats, labels = [], []
    for seq, label in corpus:
        frac = accented_fraction(seq, vocab)
        if frac is not None:
            feats.append(frac)
            labels.append(1.0 if label == ACCENTED else 0.0)
    y = np.asarray(labels)
    if len(set(labels)) < 2:
        raise ValueError("classifier corpus needs both classes")
    x = np.asarray(feats)
    order = Rng(seed, 0xC1A5).permutation(len(x))
    n_test = max(1, int(round(heldout * len(x))))
    test, tr = order[:n_test], order[n_test:]
    w, b = _fit_logistic(x[tr], y[tr])
    pred = (w * x[test] + b >= 0).astype(float)
    acc = float((pred == y[test]).mean())
    return AttrClassifier("logistic", threshold=-b / w if w else 0.5, weight=w, bias=b, heldout_accuracy=acc)


def amr_counts(sequences: Sequence[Sequence[int]], clf: AttrClassifier, target: str, vocab: Vocab = Vocab()):
    """``(matches, malformed, total)``; malformed sequences never match."""
    matches = malformed = 0
    for seq in sequences:
        d = clf.decide(seq, vocab)
        if d is None:
            malformed += 1
        elif d == target:
            matches += 1
    return matches, malformed, len(sequences)


def amr(sequences: Sequence[Sequence[int]], clf: AttrClassifier, target: str, vocab: Vocab = Vocab()) -> float:
    """Share of sequences the classifier assigns to ``target``."""
    if target not in (ACCENTED, NEUTRAL):
        raise ValueError(f"unknown accent target {target!r}")
    m, _, n = amr_counts(sequences, clf, target, vocab)
    return m / n if n else 0.0


def speaker_embedding(seq: Sequence[int], vocab: Vocab = Vocab()) -> np.ndarray:
    """L2-normalised timbre histogram."""
    h = timbre_histogram(seq, vocab)
    n = np.linalg.norm(h)
    if n == 0:
        raise UndefinedEmbeddingError("sequence has no timbre symbols")
    return h / n


def cosine_sim(e1: np.ndarray, e2: np.ndarray) -> float:
    c = float(np.dot(e1, e2) / (np.linalg.norm(e1) * np.linalg.norm(e2)))
    return max(-1.0, min(1.0, c))


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def content_error_rate(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """Edit distance over canonical content words divided by ``len(ref)``; may exceed 1."""
    if not ref:
        raise ValueError("empty reference")
    return edit_distance(list(hyp), list(ref)) / len(ref)


@dataclass(frozen=True)
class EvalRow:
    condition: str
    layer: int | None
    alpha: float | None
    isr: float
    amr_accented: float
    amr_neutral: float
    spk_sim: float
    cer: float
    n_samples: int
    norm_guard_events: int = 0


COLUMNS = [f.name for f in fields(EvalRow)]
FRACTION_COLUMNS = ("isr", "amr_accented", "amr_neutral", "spk_sim", "cer")


def evaluate_generations(
    results: Sequence,
    triplets: Sequence[Triplet],
    clf: AttrClassifier,
    label: str,
    layer: int | None = None,
    alpha: float | None = None,
    guard_events: int = 0,
    vocab: Vocab = Vocab(),
) -> EvalRow:
    """Fold one condition's generations into an :class:`EvalRow`.

    ISR counts every attempt; the other metrics average over successful
    generations only. A generation without timbre symbols scores similarity 0.
    """
    if len(results) != len(triplets):
        raise ValueError("results and triplets differ in length")
    ok = [(r, t) for r, t in zip(results, triplets) if r.status == "ok"]
    seqs = [r.tokens for r, _ in ok]
    sims, cers = [], []
    for r, t in ok:
        try:
            sims.append(cosine_sim(speaker_embedding(r.tokens, vocab), speaker_embedding(t.reference_sequence, vocab)))
        except UndefinedEmbeddingError:
            sims.append(0.0)
        cers.append(content_error_rate(content_words(r.tokens, vocab), t.target_text))
    n_ok = len(ok)
    return EvalRow(
        condition=label,
        layer=layer,
        alpha=alpha,
        isr=isr(results),
        amr_accented=amr(seqs, clf, ACCENTED, vocab) if n_ok else 0.0,
        amr_neutral=amr(seqs, clf, NEUTRAL, vocab) if n_ok else 0.0,
        spk_sim=float(np.mean(sims)) if n_ok else 0.0,
        cer=float(np.mean(cers)) if n_ok else 0.0,
        n_samples=len(results),
        norm_guard_events=guard_events,
    )


# -- report I/O ------------------------------------------------------------


def _format(name: str, value) -> str:
    if value is None:
        return ""
    if name in FRACTION_COLUMNS:
        return f"{value:.4f}"
    if name == "alpha":
        return f"{value:g}"
    return str(value)


def _parse(name: str, text: str):
    if text == "":
        return None
    if name in ("layer", "n_samples", "norm_guard_events"):
        return int(text)
    if name == "condition":
        return text
    return float(text)


def row_to_csv(row: EvalRow) -> dict:
    return {c: _format(c, getattr(row, c)) for c in COLUMNS}


def append_row_csv(path: str | Path, row: EvalRow) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(row_to_csv(row))


def read_rows_csv(path: str | Path) -> list[EvalRow]:
    with open(path, newline="") as fh:
        return [EvalRow(**{c: _parse(c, rec[c]) for c in COLUMNS}) for rec in csv.DictReader(fh)]


def write_rows_csv(path: str | Path, rows: Sequence[EvalRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(row_to_csv(r))


def order_rows(rows: Sequence[EvalRow]) -> list[EvalRow]:
    """Baseline rows first, then by (layer, alpha), keeping first occurrences."""
    seen, unique = set(), []
    for r in rows:
        if r.condition not in seen:
            seen.add(r.condition)
            unique.append(r)
    return sorted(unique, key=lambda r: (r.layer is not None, r.layer or 0, r.alpha or 0.0, r.condition))


def report(rows: Sequence[EvalRow], out: str | Path, metadata: dict | None = None) -> tuple[Path, Path]:
    """Write ``<out>.csv`` and ``<out>.json``; returns both paths.

    The JSON groups steered rows by strength into per-layer series for
    plotting; a ``"<set>:"`` condition prefix (the prompt set) keeps series of
    different prompt sets apart.
    """
    if not rows:
        raise ValueError("no rows to report")
    ordered = order_rows(rows)
    out = Path(out)
    csv_path, json_path = out.with_suffix(".csv"), out.with_suffix(".json")
    write_rows_csv(csv_path, ordered)
    series: dict[str, dict[str, list]] = {}
    for r in ordered:
        if r.layer is None:
            continue
        group = r.condition.split(":", 1)[0] + ":" if ":" in r.condition else ""
        s = series.setdefault(f"{group}{r.alpha:g}", {c: [] for c in ("layer",) + FRACTION_COLUMNS})
        s["layer"].append(r.layer)
        for c in FRACTION_COLUMNS:
            s[c].append(round(getattr(r, c), 4))
    doc = {
        "rows": [row_to_csv(r) for r in ordered],
        "series_by_alpha": series,
        "metadata": metadata or {},
    }
    json_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return csv_path, json_path


def middle_layers(n_layers: int) -> list[int]:
    """Every layer except the first and the last (all of them below three layers)."""
    return list(range(1, n_layers - 1)) if n_layers >= 3 else list(range(n_layers))


def best_middle_layer(rows: Sequence[EvalRow], n_layers: int, alpha: float = 1.0, prefix: str = "") -> int | None:
    """Middle layer whose ``alpha`` row (accented prompts) has the lowest accent
    match rate, ties broken by higher speaker similarity, then lower index."""
    cands = [
        r
        for r in rows
        if r.layer in middle_layers(n_layers) and r.alpha == alpha and r.condition.startswith(prefix)
    ]
    if not cands:
        return None
    return min(cands, key=lambda r: (r.amr_accented, -r.spk_sim, r.layer)).layer
