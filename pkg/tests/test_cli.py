import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from steerkit import cli
from steerkit import steering as st
from steerkit.audio_augment import Waveform, synthetic_vowel, write_wav
from steerkit.synth_task import read_jsonl, triplet_from_record
from steerkit.transformer import Transformer

TINY = """\
# small enough to train in about a minute
n_train_speakers = 200
utterances_per_speaker = 3
n_samples = 16
eval_fraction = 0.5
n_layers = 2
d_model = 32
n_heads = 2
d_ff = 64
max_seq_len = 160
steps = 600
batch_size = 16
warmup = 20
alphas = 1.0
"""


def run(workdir, *args, cfg=None):
    argv = list(args) + ["--workdir", str(workdir), "--no-timestamp"]
    if cfg is not None:
        argv += ["--config", str(cfg)]
    return cli.main(argv)


def tree(root):
    """Relative path -> bytes for every file under ``root``."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, cfg):
    """Workdir holding a corpus and a trained tiny model."""
    w = tmp_path_factory.mktemp("trained")
    assert run(w, "gen-corpus", cfg=cfg) == 0
    assert run(w, "train", cfg=cfg) == 0
    return w


def clone(src, dst):
    shutil.copytree(src, dst)
    return dst


# -- config and exit codes ---------------------------------------------------------


def test_flags_override_set_overrides_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 5\nsteps = 10  # trailing comment\naugment = false\n")
    args = cli.build_parser().parse_args(["train", "--config", str(path), "--seed", "7", "--set", "steps=20"])
    r = cli.resolve(args)
    assert (r["seed"], r["steps"], r["augment"]) == (7, 20, False)
    assert r["lr"] == cli.DEFAULTS["lr"][1]
    args = cli.build_parser().parse_args(["train", "--config", str(path), "--steps", "30", "--set", "steps=20"])
    assert cli.resolve(args)["steps"] == 30


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run(tmp_path, "gen-corpus", "--n-samples", "0") == 2
    assert run(tmp_path, "train", "--set", "bogus=1") == 2
    assert run(tmp_path, "train", "--set", "steps=many") == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("this line has no equals sign\n")
    assert run(tmp_path, "train", cfg=bad) == 2
    assert "usage error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        cli.main(["no-such-command"])
    assert info.value.code == 2


def test_domain_errors_exit_1(tmp_path, capsys):
    assert run(tmp_path, "train") == 1
    assert "training corpus not found" in capsys.readouterr().err
    assert run(tmp_path, "report") == 1
    assert run(tmp_path, "augment-audio", "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "o")) == 1


def test_console_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "steerkit", "--help"], capture_output=True, text=True)
    assert ok.returncode == 0 and "gen-corpus" in ok.stdout
    usage = subprocess.run([sys.executable, "-m", "steerkit", "extract", "--bogus"], capture_output=True)
    assert usage.returncode == 2
    domain = subprocess.run(
        [sys.executable, "-m", "steerkit", "extract", "--workdir", str(tmp_path)], capture_output=True, text=True
    )
    assert domain.returncode == 1 and "checkpoint not found" in domain.stderr


# -- reproducibility of every subcommand ------------------------------------------------


def test_gen_corpus_rerun_is_bit_identical(tmp_path, cfg):
    assert run(tmp_path / "a", "gen-corpus", cfg=cfg) == 0
    assert run(tmp_path / "b", "gen-corpus", cfg=cfg) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b and "corpus/extract_accented.jsonl" in a and "classifier.json" in a


def test_gen_corpus_splits(trained):
    corpus = trained / "corpus"
    ext = [triplet_from_record(r) for c in ("accented", "neutral") for r in read_jsonl(corpus / f"extract_{c}.jsonl")]
    evs = [triplet_from_record(r) for c in ("accented", "neutral") for r in read_jsonl(corpus / f"eval_{c}.jsonl")]
    assert len(ext) == 16 and len(evs) == 8
    texts = lambda ts: {t.target_text for t in ts} | {t.reference_text for t in ts}  # noqa: E731
    assert not texts(ext) & texts(evs)


def test_gen_corpus_seed_changes_output(tmp_path, cfg):
    run(tmp_path / "a", "gen-corpus", cfg=cfg)
    run(tmp_path / "b", "gen-corpus", "--seed", "1", cfg=cfg)
    assert tree(tmp_path / "a") != tree(tmp_path / "b")


def test_train_rerun_and_resume_are_bit_identical(tmp_path, trained, cfg):
    dirs = {}
    for name in ("a", "b", "c"):
        dirs[name] = tmp_path / name
        shutil.copytree(trained / "corpus", dirs[name] / "corpus")
    short = ["--steps", "8", "--set", "log_every=1"]
    assert run(dirs["a"], "train", *short, cfg=cfg) == 0
    assert run(dirs["b"], "train", *short, cfg=cfg) == 0
    assert run(dirs["c"], "train", *short, "--stop-at", "3", cfg=cfg) == 0
    assert run(dirs["c"], "train", *short, "--resume", cfg=cfg) == 0
    a, b, c = tree(dirs["a"]), tree(dirs["b"]), tree(dirs["c"])
    assert a == b
    for name in ("model.ckpt", "train_state.ckpt", "loss.csv"):
        assert c[name] == a[name], name


@pytest.fixture(scope="module")
def extracted(trained, cfg):
    assert run(trained, "extract", "--vectors", "v1.stkv", cfg=cfg) == 0
    return trained


def test_extract_rerun_is_bit_identical(extracted, cfg):
    assert run(extracted, "extract", "--vectors", "v2.stkv", cfg=cfg) == 0
    assert (extracted / "v1.stkv").read_bytes() == (extracted / "v2.stkv").read_bytes()
    assert (extracted / "v1.json").read_bytes() == (extracted / "v2.json").read_bytes()


def test_extract_with_jobs_matches_serial(extracted, cfg):
    assert run(extracted, "extract", "--vectors", "vj.stkv", "--jobs", "2", cfg=cfg) == 0
    assert (extracted / "v1.stkv").read_bytes() == (extracted / "vj.stkv").read_bytes()


def test_extract_flags(extracted, cfg):
    assert run(extracted, "extract", "--vectors", "na.stkv", "--no-augment", "--layers", "1", "--n-samples", "4", cfg=cfg) == 0
    vectors = st.load_vectors(extracted / "na.stkv")
    assert list(vectors) == [1]
    meta = vectors[1].meta
    assert not meta.augmented and (meta.n_accented, meta.n_neutral) == (2, 2)
    assert meta.checkpoint_digest == Transformer.load(extracted / "model.ckpt").digest
    assert run(extracted, "extract", "--vectors", "x.stkv", "--n-samples", "1000", cfg=cfg) == 2


def test_vector_file_round_trips(extracted):
    data = (extracted / "v1.stkv").read_bytes()
    assert st.encode_vectors(st.decode_vectors(data)) == data


def steer(workdir, cfg, out, *extra):
    return run(workdir, "steer", "--vectors", "v1.stkv", "--layer", "1", "--set", f"generations={out}", *extra, cfg=cfg)


def test_steer_rerun_is_bit_identical(extracted, cfg):
    assert steer(extracted, cfg, "g1.jsonl", "--trace", "--set", "trace_file=t1.jsonl") == 0
    assert steer(extracted, cfg, "g2.jsonl", "--trace", "--set", "trace_file=t2.jsonl") == 0
    assert (extracted / "g1.jsonl").read_bytes() == (extracted / "g2.jsonl").read_bytes()
    assert (extracted / "t1.jsonl").read_bytes() == (extracted / "t2.jsonl").read_bytes()
    recs = read_jsonl(extracted / "g1.jsonl")
    assert len(recs) == 8 and {r["condition"] for r in recs} == {"accented", "neutral"}
    assert all(r["layer"] == 1 and r["alpha"] == 1.0 and r["direction"] == "subtract" for r in recs)
    roles = {json.loads(line)["role"] for line in (extracted / "t1.jsonl").read_text().splitlines()}
    assert roles == {"prompt", "generated"}


def test_steer_zero_alpha_equals_unsteered(extracted, cfg):
    assert steer(extracted, cfg, "g0.jsonl", "--alpha", "0") == 0
    model = Transformer.load(extracted / "model.ckpt")
    recs = read_jsonl(extracted / "g0.jsonl")
    for cond in ("accented", "neutral"):
        trips = [triplet_from_record(r) for r in read_jsonl(extracted / "corpus" / f"eval_{cond}.jsonl")]
        plain, _ = st.steered_generations(model, trips, None, None)
        mine = [r for r in recs if r["condition"] == cond]
        assert [(r["tokens"], r["status"]) for r in mine] == [(p.tokens, p.status) for p in plain]


def test_steer_direction_flag(extracted, cfg):
    assert steer(extracted, cfg, "gadd.jsonl", "--direction", "add", "--alpha", "2") == 0
    assert steer(extracted, cfg, "gsub.jsonl", "--alpha", "2") == 0
    add, sub = read_jsonl(extracted / "gadd.jsonl"), read_jsonl(extracted / "gsub.jsonl")
    assert {r["direction"] for r in add} == {"add"}
    assert [r["tokens"] for r in add] != [r["tokens"] for r in sub]


def test_steer_needs_vector_for_layer(extracted, cfg):
    run(extracted, "extract", "--vectors", "only1.stkv", "--layers", "1", "--n-samples", "4", cfg=cfg)
    assert run(extracted, "steer", "--vectors", "only1.stkv", "--layer", "0", cfg=cfg) == 1
    assert run(extracted, "steer", "--vectors", "only1.stkv", "--layer", "5", cfg=cfg) == 2


def test_sweep_evaluate_report_rerun_identical(extracted, cfg):
    for i in (1, 2):
        assert run(extracted, "sweep", "--vectors", "v1.stkv", "--sweep-csv", f"s{i}.csv", cfg=cfg) == 0
    assert (extracted / "s1.csv").read_bytes() == (extracted / "s2.csv").read_bytes()
    rows = (extracted / "s1.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 3
    assert rows[1].startswith("accented:unsteered,,,")

    steer(extracted, cfg, "ge.jsonl")
    for i in (1, 2):
        assert run(extracted, "evaluate", "--set", "generations=ge.jsonl", "--set", f"eval_csv=e{i}.csv", cfg=cfg) == 0
    assert (extracted / "e1.csv").read_bytes() == (extracted / "e2.csv").read_bytes()
    assert "accented:steer_layer1_alpha1_subtract" in (extracted / "e1.csv").read_text()

    inputs = ["--inputs", str(extracted / "s1.csv"), str(extracted / "e1.csv")]
    for i in (1, 2):
        assert run(extracted, "report", *inputs, "--set", f"report=r{i}", cfg=cfg) == 0
    assert (extracted / "r1.csv").read_bytes() == (extracted / "r2.csv").read_bytes()
    assert (extracted / "r1.json").read_bytes() == (extracted / "r2.json").read_bytes()
    meta = json.loads((extracted / "r1.json").read_text())["metadata"]
    assert meta["created"] is None and meta["selected_layer"] in (0, 1)
    assert meta["checkpoint_digest"] == Transformer.load(extracted / "model.ckpt").digest


def test_report_of_duplicate_sweeps_is_idempotent(extracted, cfg):
    run(extracted, "sweep", "--vectors", "v1.stkv", "--sweep-csv", "sd.csv", cfg=cfg)
    shutil.copy(extracted / "sd.csv", extracted / "sd_copy.csv")
    run(extracted, "report", "--inputs", str(extracted / "sd.csv"), "--set", "report=one", cfg=cfg)
    run(extracted, "report", "--inputs", str(extracted / "sd.csv"), str(extracted / "sd_copy.csv"), "--set", "report=two", cfg=cfg)
    assert (extracted / "one.csv").read_bytes() == (extracted / "two.csv").read_bytes()
    one, two = (json.loads((extracted / f"{n}.json").read_text()) for n in ("one", "two"))
    assert one["rows"] == two["rows"] and one["series_by_alpha"] == two["series_by_alpha"]


def test_sweep_refuses_leaky_splits(tmp_path, extracted, cfg):
    w = clone(extracted, tmp_path / "leaky")
    ext = (w / "corpus" / "extract_neutral.jsonl").read_text().splitlines()
    with open(w / "corpus" / "eval_neutral.jsonl", "a") as fh:
        fh.write(ext[0] + "\n")
    assert run(w, "sweep", "--vectors", "v1.stkv", cfg=cfg) == 1
    assert run(w, "evaluate", "--set", "generations=g1.jsonl", cfg=cfg) == 1


# -- augment-audio ---------------------------------------------------------------------


def test_augment_audio_empty_dir(tmp_path):
    (tmp_path / "in").mkdir()
    assert run(tmp_path, "augment-audio", "--in", str(tmp_path / "in"), "--out", str(tmp_path / "out")) == 0
    assert (tmp_path / "out" / "params.jsonl").read_text() == ""
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["params.jsonl"]


def test_augment_audio_is_deterministic_per_file(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    for i, f0 in enumerate((110, 150, 190, 230)):
        write_wav(synthetic_vowel(f0, 700, duration=0.3), src / f"u{i}.wav")
    write_wav(Waveform(np.zeros(4000), 16000), src / "quiet.wav")
    (src / "notes.txt").write_text("ignored")
    for name, jobs in (("a", "1"), ("b", "1"), ("c", "2")):
        assert run(tmp_path, "augment-audio", "--in", str(src), "--out", str(tmp_path / name), "--jobs", jobs, "--seed", "3") == 0
    a = tree(tmp_path / "a")
    assert a == tree(tmp_path / "b") == tree(tmp_path / "c")
    assert sorted(a) == ["params.jsonl", "quiet.wav", "u0.wav", "u1.wav", "u2.wav", "u3.wav"]
    log = read_jsonl(tmp_path / "a" / "params.jsonl")
    assert [r["input"] for r in log] == ["quiet.wav", "u0.wav", "u1.wav", "u2.wav", "u3.wav"]
    for r in log:
        assert r["applied"] == (r["gamma"] > 0.3)
        if not r["applied"]:
            assert a[r["input"]] == (src / r["input"]).read_bytes()
    # a file's outcome depends on (seed, name) only
    solo = tmp_path / "solo"
    solo.mkdir()
    shutil.copy(src / "u2.wav", solo / "u2.wav")
    run(tmp_path, "augment-audio", "--in", str(solo), "--out", str(tmp_path / "solo_out"), "--seed", "3")
    assert (tmp_path / "solo_out" / "u2.wav").read_bytes() == a["u2.wav"]
