"""Synthetic two-attribute sequence task.

An utterance renders a text (a tuple of content-word indices) as alternating
content and timbre tokens::

    v(w_1) t_1 v(w_2) t_2 ... v(w_n) t_n STOP

``v(w)`` is the neutral form of word ``w``, or with probability
``accent_prob`` its accented form. Each ``t_i`` is drawn from the speaker's
timbre distribution. Accent lives only in the content channel and timbre
only in the timbre channel, so both can be measured exactly.

Vocabulary layout for ``W`` words and ``S`` timbre symbols::

    0 PAD | 1 BOS | 2 SEP | 3 GEN | 4 STOP
    5 .. 5+W-1              canonical words (used for texts in prompts)
    5+W .. 5+3W-1           surface variants, 2 per word (neutral, accented)
    5+3W .. 5+3W+S-1        timbre symbols
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import TokenError
from .numerics.rng import Rng

PAD, BOS, SEP, GEN, STOP = range(5)
N_SPECIAL = 5
GATE_THRESHOLD = 0.3


@dataclass(frozen=True)
class Vocab:
    n_words: int = 64
    n_timbre: int = 16

    @property
    def size(self) -> int:
        return N_SPECIAL + 3 * self.n_words + self.n_timbre

    def word(self, w: int) -> int:
        self._check_word(w)
        return N_SPECIAL + w

    def variant(self, w: int, accented: bool) -> int:
        self._check_word(w)
        return N_SPECIAL + self.n_words + 2 * w + int(accented)

    def timbre(self, s: int) -> int:
        if not 0 <= s < self.n_timbre:
            raise TokenError(f"timbre symbol {s} outside [0, {self.n_timbre})")
        return N_SPECIAL + 3 * self.n_words + s

    def _check_word(self, w: int) -> None:
        if not 0 <= w < self.n_words:
            raise TokenError(f"unknown content word {w}")

    def is_variant(self, tok: int) -> bool:
        return N_SPECIAL + self.n_words <= tok < N_SPECIAL + 3 * self.n_words

    def is_timbre(self, tok: int) -> bool:
        return N_SPECIAL + 3 * self.n_words <= tok < self.size

    def split_variant(self, tok: int) -> tuple[int, bool]:
        """``(word, accented)`` for a surface-variant token."""
        off = tok - N_SPECIAL - self.n_words
        return off // 2, bool(off % 2)

    def timbre_index(self, tok: int) -> int:
        return tok - N_SPECIAL - 3 * self.n_words


@dataclass(frozen=True)
class AccentSpec:
    accent_prob: float
    vocab: Vocab = field(default_factory=Vocab)

    def __post_init__(self):
        if not 0.0 <= self.accent_prob <= 1.0:
            raise ValueError(f"accent_prob must lie in [0, 1], got {self.accent_prob}")

    @property
    def variant_table(self) -> dict[int, tuple[int, int]]:
        v = self.vocab
        return {w: (v.variant(w, False), v.variant(w, True)) for w in range(v.n_words)}


NEUTRAL = AccentSpec(0.0)
ACCENTED = AccentSpec(0.9)


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    timbre_dist: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.timbre_dist)
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"speaker {self.speaker_id}: timbre_dist is not a distribution")


@dataclass(frozen=True)
class Triplet:
    target_text: tuple[int, ...]
    reference_text: tuple[int, ...]
    reference_sequence: tuple[int, ...]
    speaker_id: str = ""
    accent_prob: float = 0.0


def _cosine(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def make_speaker(speaker_id: str, dominant: int, rng: Rng, n_timbre: int = 16, dominant_mass: float = 0.7) -> SpeakerProfile:
    """A speaker with ``dominant_mass`` on one symbol and the rest Dirichlet-spread."""
    rest = rng.dirichlet(np.full(n_timbre, 0.5))
    p = (1.0 - dominant_mass) * rest
    p[dominant] += dominant_mass
    p = p / p.sum()
    return SpeakerProfile(speaker_id, tuple(float(x) for x in p))


def make_speakers(
    prefix: str, n: int, rng: Rng, n_timbre: int = 16, exclude: Iterable[int] = (), max_cosine: float = 0.85
) -> list[SpeakerProfile]:
    """``n`` speakers with distinct dominant symbols and pairwise cosine <= ``max_cosine``."""
    free = [s for s in rng.child("dominant").permutation(n_timbre) if s not in set(exclude)]
    if len(free) < n:
        raise ValueError(f"only {len(free)} free timbre symbols for {n} speakers")
    out: list[SpeakerProfile] = []
    for i in range(n):
        sub = rng.child(i)
        while True:
            spk = make_speaker(f"{prefix}{i}", int(free[i]), sub, n_timbre)
            if all(_cosine(spk.timbre_dist, o.timbre_dist) <= max_cosine for o in out):
                out.append(spk)
                break
    return out


def default_speakers(rng: Rng, n_per_condition: int = 4, n_timbre: int = 16):
    """Native and accented speaker panels with mutually distinct dominant symbols."""
    native = make_speakers("native", n_per_condition, rng.child("native"), n_timbre)
    used = [int(np.argmax(s.timbre_dist)) for s in native]
    accented = make_speakers("accented", n_per_condition, rng.child("accented"), n_timbre, exclude=used)
    everyone = native + accented
    for i, a in enumerate(everyone):
        for b in everyone[i + 1 :]:
            if _cosine(a.timbre_dist, b.timbre_dist) > 0.85:
                raise AssertionError("speaker panel violates the cosine bound")
    return native, accented


def make_sentence_pool(n: int, rng: Rng, n_words: int = 64, min_len: int = 8, max_len: int = 20) -> list[tuple[int, ...]]:
    """``n`` distinct random sentences with lengths uniform on ``[min_len, max_len]``."""
    seen, pool = set(), []
    while len(pool) < n:
        length = rng.integers(min_len, max_len + 1)
        s = tuple(int(w) for w in rng.integers(0, n_words, size=length))
        if s not in seen:
            seen.add(s)
            pool.append(s)
    return pool


def render_utterance(text: Sequence[int], speaker: SpeakerProfile, accent: AccentSpec, rng: Rng) -> list[int]:
    """Surface sequence of length ``2 * len(text) + 1`` ending in STOP."""
    v = accent.vocab
    if len(speaker.timbre_dist) != v.n_timbre:
        raise ValueError("speaker timbre alphabet does not match the vocabulary")
    out = []
    for w in text:
        accented = rng.uniform() < accent.accent_prob
        out.append(v.variant(int(w), accented))
        out.append(v.timbre(rng.categorical(speaker.timbre_dist)))
    out.append(STOP)
    return out


def split_pool(pool: Sequence[tuple[int, ...]]) -> tuple[list, list]:
    """Disjoint (target, reference) halves of a sentence pool."""
    if len(pool) < 2:
        raise ValueError("sentence pool too small for disjoint target/reference sets")
    half = len(pool) // 2
    targets, refs = list(pool[:half]), list(pool[half:])
    if set(targets) & set(refs):
        raise ValueError("sentence pool contains duplicates across the split")
    return targets, refs


def pair_texts(k: int, pool: Sequence[tuple[int, ...]], rng: Rng) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """``k`` (target, reference) pairs drawn without replacement from disjoint halves."""
    targets, refs = split_pool(pool)
    if k > min(len(targets), len(refs)):
        raise ValueError(f"sentence pool too small: need {k} disjoint pairs, have {min(len(targets), len(refs))}")
    ti = rng.child("targets").permutation(len(targets))[:k]
    ri = rng.child("references").permutation(len(refs))[:k]
    return [(targets[a], refs[b]) for a, b in zip(ti, ri)]


def build_triplets(
    n: int,
    speakers: Sequence[SpeakerProfile],
    accent: AccentSpec,
    sentence_pool: Sequence[tuple[int, ...]],
    rng: Rng,
) -> list[Triplet]:
    """``n`` triplets; each text pair is rendered once per speaker, round-robin.

    Text pairing uses ``rng.child("pairs")`` only, so two calls with the same
    ``rng`` and pool but different speaker panels share the same pairs.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not speakers:
        raise ValueError("no speakers")
    k = math.ceil(n / len(speakers))
    pairs = pair_texts(k, sentence_pool, rng.child("pairs"))
    render = rng.child("render")
    out = []
    for i in range(n):
        target, ref = pairs[i // len(speakers)]
        spk = speakers[i % len(speakers)]
        seq = render_utterance(ref, spk, accent, render.child(i))
        out.append(Triplet(target, ref, tuple(seq), spk.speaker_id, accent.accent_prob))
    return out


def build_prompt(triplet: Triplet, vocab: Vocab = Vocab()) -> list[int]:
    """``BOS ref_text SEP ref_surface SEP target_text GEN``; generation starts after GEN."""
    ref_surface = [t for t in triplet.reference_sequence if t != STOP]
    return (
        [BOS]
        + [vocab.word(w) for w in triplet.reference_text]
        + [SEP]
        + ref_surface
        + [SEP]
        + [vocab.word(w) for w in triplet.target_text]
        + [GEN]
    )


def check_well_formed(seq: Sequence[int], vocab: Vocab = Vocab()) -> None:
    body = list(seq[:-1]) if seq and seq[-1] == STOP else list(seq)
    if len(body) % 2:
        raise TokenError("malformed surface sequence: odd body length")
    for i, tok in enumerate(body):
        ok = vocab.is_variant(tok) if i % 2 == 0 else vocab.is_timbre(tok)
        if not ok:
            raise TokenError(f"malformed surface sequence at position {i} (token {tok})")


def gate_draw(rng: Rng, threshold: float = GATE_THRESHOLD) -> tuple[float, bool]:
    """Draw ``gamma ~ U(0, 1)``; perturb when ``gamma > threshold``."""
    gamma = float(rng.uniform())
    return gamma, gamma > threshold


def perturb_reference(
    seq: Sequence[int],
    strength: float,
    rng: Rng,
    vocab: Vocab = Vocab(),
    threshold: float = GATE_THRESHOLD,
) -> list[int]:
    """Voice perturbation that leaves every content token untouched.

    Behind the gamma gate, the timbre histogram of ``seq`` (add-one smoothed)
    is jittered by a Dirichlet with concentration ``strength`` and every
    timbre symbol is redrawn from the jittered distribution.
    """
    check_well_formed(seq, vocab)
    _, applied = gate_draw(rng, threshold)
    if not applied:
        return list(seq)
    counts = np.ones(vocab.n_timbre)
    for tok in seq:
        if vocab.is_timbre(tok):
            counts[vocab.timbre_index(tok)] += 1
    base = counts / counts.sum()
    jittered = rng.dirichlet(strength * base)
    return [vocab.timbre(rng.categorical(jittered)) if vocab.is_timbre(t) else t for t in seq]


def accented_fraction(seq: Sequence[int], vocab: Vocab = Vocab()) -> float | None:
    """Share of content tokens in accented form; ``None`` when there are none."""
    flags = [vocab.split_variant(t)[1] for t in seq if vocab.is_variant(t)]
    return sum(flags) / len(flags) if flags else None


def timbre_histogram(seq: Sequence[int], vocab: Vocab = Vocab()) -> np.ndarray:
    h = np.zeros(vocab.n_timbre)
    for t in seq:
        if vocab.is_timbre(t):
            h[vocab.timbre_index(t)] += 1
    return h


def content_words(seq: Sequence[int], vocab: Vocab = Vocab()) -> list[int]:
    """Canonical word indices of the content tokens, accent stripped."""
    return [vocab.split_variant(t)[0] for t in seq if vocab.is_variant(t)]


# --- JSON Lines I/O -------------------------------------------------------


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def triplet_record(t: Triplet) -> dict:
    rec = asdict(t)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in rec.items()}


def triplet_from_record(rec: dict) -> Triplet:
    return Triplet(
        tuple(rec["target_text"]),
        tuple(rec["reference_text"]),
        tuple(rec["reference_sequence"]),
        rec.get("speaker_id", ""),
        float(rec.get("accent_prob", 0.0)),
    )


def utterance_record(speaker_id: str, accent_prob: float, text, surface) -> dict:
    return {"speaker_id": speaker_id, "accent_prob": accent_prob, "text": list(text), "surface": list(surface)}


def make_training_corpus(
    n_speakers: int,
    utterances_per_speaker: int,
    rng: Rng,
    vocab: Vocab = Vocab(),
    accented_prob: float = 0.9,
) -> list[dict]:
    """Utterance records from fresh random speakers, half neutral and half accented.

    Each speaker gets a random dominant timbre symbol; texts are fresh random
    sentences (never drawn from an evaluation pool).
    """
    records = []
    for i in range(n_speakers):
        sub = rng.child(i)
        spk = make_speaker(f"train{i}", sub.integers(0, vocab.n_timbre), sub.child("profile"), vocab.n_timbre)
        accent = AccentSpec(accented_prob if i % 2 else 0.0, vocab)
        texts = make_sentence_pool(utterances_per_speaker, sub.child("texts"), vocab.n_words)
        for j, text in enumerate(texts):
            surface = render_utterance(text, spk, accent, sub.child("render").child(j))
            records.append(utterance_record(spk.speaker_id, accent.accent_prob, text, surface))
    return records


def training_examples(records: Sequence[dict], vocab: Vocab = Vocab()) -> list[tuple[list[int], int]]:
    """Pair consecutive utterances of each speaker into ``(tokens, gen_start)`` examples."""
    by_speaker: dict[str, list[dict]] = {}
    for rec in records:
        by_speaker.setdefault(rec["speaker_id"], []).append(rec)
    out = []
    for spk in by_speaker:
        utts = by_speaker[spk]
        for ref, tgt in zip(utts, utts[1:] + utts[:1]):
            if ref is tgt:
                continue
            trip = Triplet(tuple(tgt["text"]), tuple(ref["text"]), tuple(ref["surface"]), spk, ref["accent_prob"])
            prompt = build_prompt(trip, vocab)
            out.append((prompt + list(tgt["surface"]), len(prompt)))
    return out
