import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs

from steerkit.errors import TokenError
from steerkit.evaluation import ACCENTED as ACC_LABEL
from steerkit.evaluation import NEUTRAL as NEU_LABEL
from steerkit.evaluation import train_attr_classifier
from steerkit.numerics import Rng
from steerkit.synth_task import (
    ACCENTED,
    BOS,
    GEN,
    NEUTRAL,
    SEP,
    STOP,
    AccentSpec,
    SpeakerProfile,
    Vocab,
    accented_fraction,
    build_prompt,
    build_triplets,
    check_well_formed,
    content_words,
    default_speakers,
    gate_draw,
    make_sentence_pool,
    make_speaker,
    make_training_corpus,
    perturb_reference,
    read_jsonl,
    render_utterance,
    timbre_histogram,
    training_examples,
    triplet_from_record,
    triplet_record,
    write_jsonl,
)

V = Vocab()


def speaker(seed=0, dominant=3):
    return make_speaker("s", dominant, Rng(seed, 5))


def test_vocab_layout():
    assert V.size == 213
    assert V.word(0) == 5 and V.variant(0, False) == 69 and V.variant(63, True) == 196
    assert V.timbre(0) == 197 and V.timbre(15) == 212
    tokens = {V.variant(w, a) for w in range(64) for a in (False, True)}
    assert len(tokens) == 128
    assert V.split_variant(V.variant(17, True)) == (17, True)
    with pytest.raises(TokenError):
        V.word(64)
    with pytest.raises(TokenError):
        V.timbre(16)


def test_variant_table_forms_differ():
    assert all(a != b for a, b in ACCENTED.variant_table.values())
    with pytest.raises(ValueError):
        AccentSpec(1.5)


def test_speaker_profile_validation():
    with pytest.raises(ValueError):
        SpeakerProfile("x", (0.5, 0.6))
    p = np.asarray(speaker().timbre_dist)
    assert abs(p.sum() - 1) <= 1e-12 and p.argmax() == 3


def test_render_length_and_shape():
    text = (1, 2, 3, 4, 5)
    seq = render_utterance(text, speaker(), ACCENTED, Rng(1, 1))
    assert len(seq) == 2 * len(text) + 1 and seq[-1] == STOP
    check_well_formed(seq)
    assert content_words(seq) == list(text)


def test_render_degenerate_accent_probabilities():
    text = tuple(range(40))
    assert accented_fraction(render_utterance(text, speaker(), NEUTRAL, Rng(2, 1))) == 0.0
    assert accented_fraction(render_utterance(text, speaker(), AccentSpec(1.0), Rng(2, 1))) == 1.0


def test_render_accent_rate_concentrates():
    text = tuple(int(w) for w in Rng(3, 2).integers(0, 64, size=1000))
    frac = accented_fraction(render_utterance(text, speaker(), ACCENTED, Rng(3, 3)))
    assert abs(frac - 0.9) <= 0.03


def test_render_rejects_unknown_word():
    with pytest.raises(TokenError):
        render_utterance((64,), speaker(), NEUTRAL, Rng(0, 0))


def test_timbre_histogram_converges_to_distribution():
    spk = speaker(4, 7)
    p = np.asarray(spk.timbre_dist)
    dists = []
    for seed in range(200):
        seq = render_utterance(tuple(range(50)), spk, NEUTRAL, Rng(seed, 9))
        h = timbre_histogram(seq)
        dists.append(h / h.sum())
    assert np.abs(np.mean(dists, axis=0) - p).sum() <= 0.1


def test_default_speakers_are_cosine_distinct():
    native, accented = default_speakers(Rng(0, 1))
    everyone = native + accented
    assert len(everyone) == 8
    assert len({int(np.argmax(s.timbre_dist)) for s in everyone}) == 8
    for i, a in enumerate(everyone):
        for b in everyone[i + 1 :]:
            x, y = np.asarray(a.timbre_dist), np.asarray(b.timbre_dist)
            assert x @ y / (np.linalg.norm(x) * np.linalg.norm(y)) <= 0.85


def test_sentence_pool_is_distinct_and_bounded():
    pool = make_sentence_pool(300, Rng(1, 4))
    assert len(set(pool)) == 300
    assert all(8 <= len(s) <= 20 for s in pool)


def test_triplets_keep_target_and_reference_sets_disjoint():
    pool = make_sentence_pool(20, Rng(2, 4))
    native, _ = default_speakers(Rng(0, 1))
    trips = build_triplets(8, native, NEUTRAL, pool, Rng(5, 6))
    targets = {t.target_text for t in trips}
    refs = {t.reference_text for t in trips}
    assert not targets & refs
    one = build_triplets(1, native, NEUTRAL, pool, Rng(5, 7))[0]
    assert one.target_text in pool[:10] and one.reference_text in pool[10:]
    assert [t.speaker_id for t in trips] == [s.speaker_id for s in native] * 2
    for t in trips:
        assert content_words(t.reference_sequence) == list(t.reference_text)


def test_triplets_are_deterministic():
    pool = make_sentence_pool(40, Rng(2, 4))
    native, _ = default_speakers(Rng(0, 1))
    assert build_triplets(12, native, ACCENTED, pool, Rng(8, 1)) == build_triplets(12, native, ACCENTED, pool, Rng(8, 1))


def test_triplets_need_a_large_enough_pool():
    native, _ = default_speakers(Rng(0, 1))
    with pytest.raises(ValueError):
        build_triplets(9, native, NEUTRAL, make_sentence_pool(4, Rng(0, 0)), Rng(0, 0))
    with pytest.raises(ValueError):
        build_triplets(1, native, NEUTRAL, make_sentence_pool(1, Rng(0, 0)), Rng(0, 0))


def test_prompt_layout():
    native, _ = default_speakers(Rng(0, 1))
    t = build_triplets(1, native, NEUTRAL, make_sentence_pool(4, Rng(1, 1)), Rng(0, 2))[0]
    p = build_prompt(t)
    n_ref, n_tgt = len(t.reference_text), len(t.target_text)
    assert p[0] == BOS and p[-1] == GEN
    assert p[1 + n_ref] == SEP and p[2 + n_ref + 2 * n_ref] == SEP
    assert p[1 : 1 + n_ref] == [V.word(w) for w in t.reference_text]
    assert p[-1 - n_tgt : -1] == [V.word(w) for w in t.target_text]
    assert STOP not in p


def test_triplet_record_round_trip(tmp_path):
    native, _ = default_speakers(Rng(0, 1))
    trips = build_triplets(4, native, ACCENTED, make_sentence_pool(10, Rng(1, 1)), Rng(0, 2))
    write_jsonl(tmp_path / "t.jsonl", [triplet_record(t) for t in trips])
    assert [triplet_from_record(r) for r in read_jsonl(tmp_path / "t.jsonl")] == trips


def test_well_formed_check():
    good = render_utterance((1, 2), speaker(), NEUTRAL, Rng(0, 0))
    check_well_formed(good)
    with pytest.raises(TokenError):
        check_well_formed(good[1:])
    with pytest.raises(TokenError):
        check_well_formed([good[0], good[0], STOP])


def test_gate_fraction_over_many_draws():
    root = Rng(11, 3)
    applied = sum(gate_draw(root.child(i))[1] for i in range(10_000))
    assert abs(applied / 10_000 - 0.7) <= 0.02


def test_perturb_passes_through_when_gate_closed():
    seq = render_utterance(tuple(range(20)), speaker(), ACCENTED, Rng(1, 0))
    i = next(i for i in range(1000) if not gate_draw(Rng(i, 12))[1])
    assert perturb_reference(seq, 20.0, Rng(i, 12)) == seq


def test_perturb_changes_timbre_when_gate_open():
    seq = render_utterance(tuple(range(20)), speaker(), ACCENTED, Rng(1, 0))
    changed = 0
    for i in range(200):
        r = Rng(i, 12)
        if gate_draw(Rng(i, 12))[1]:
            out = perturb_reference(seq, 20.0, r)
            changed += np.abs(timbre_histogram(out) - timbre_histogram(seq)).sum() > 0
    assert changed > 100


@settings(max_examples=40, deadline=None)
@given(hs.integers(0, 2**31), hs.floats(0.5, 200.0), hs.lists(hs.integers(0, 63), min_size=1, max_size=30))
def test_perturb_never_touches_content(seed, strength, text):
    seq = render_utterance(tuple(text), speaker(), ACCENTED, Rng(seed, 1))
    out = perturb_reference(seq, strength, Rng(seed, 2))
    assert len(out) == len(seq)
    assert [t for t in out if V.is_variant(t)] == [t for t in seq if V.is_variant(t)]
    assert accented_fraction(out) == accented_fraction(seq)


def test_perturb_rejects_malformed_input():
    with pytest.raises(TokenError):
        perturb_reference([V.timbre(0), V.variant(0, False), STOP], 20.0, Rng(0, 0))


def _labelled_corpus(seed, n=400):
    out = []
    for i in range(n):
        text = tuple(int(w) for w in Rng(seed, i).integers(0, 64, size=12))
        accent = ACCENTED if i % 2 else NEUTRAL
        seq = render_utterance(text, speaker(i, i % 16), accent, Rng(seed + 1, i))
        out.append((seq, ACC_LABEL if i % 2 else NEU_LABEL))
    return out


def test_accent_attribute_is_separable():
    clf = train_attr_classifier(_labelled_corpus(3), seed=1)
    assert clf.heldout_accuracy >= 0.99


def test_shuffled_labels_are_not_separable():
    corpus = _labelled_corpus(3, n=2000)
    labels = [lab for _, lab in corpus]
    perm = Rng(9, 9).permutation(len(labels))
    shuffled = [(seq, labels[j]) for (seq, _), j in zip(corpus, perm)]
    clf = train_attr_classifier(shuffled, seed=1, heldout=0.5)
    assert abs(clf.heldout_accuracy - 0.5) <= 0.05


def test_training_corpus_and_examples():
    recs = make_training_corpus(6, 3, Rng(0, 3))
    assert len(recs) == 18
    assert {r["accent_prob"] for r in recs} == {0.0, 0.9}
    assert recs == make_training_corpus(6, 3, Rng(0, 3))
    examples = training_examples(recs)
    assert len(examples) == 18
    for toks, gen_start in examples:
        assert toks[gen_start - 1] == GEN and toks[-1] == STOP
        check_well_formed(toks[gen_start:])
