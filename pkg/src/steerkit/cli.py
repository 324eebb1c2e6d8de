"""Command-line pipeline: corpus -> model -> vectors -> steered decoding -> metrics.

Every subcommand reads one key-value config file (``key = value`` lines,
``#`` comments) and lets flags override it. All randomness derives from the
top-level ``seed``; each subcommand draws from its own named stream.

Usage:
  steerkit gen-corpus --config run.cfg
  steerkit train --config run.cfg --steps 1500
  steerkit extract --config run.cfg --n-samples 1000 --no-augment --vectors run/noaug.stkv
  steerkit steer --config run.cfg --layer 2 --alpha 1.0 --direction subtract
  steerkit sweep --config run.cfg
  steerkit evaluate --config run.cfg
  steerkit report --config run.cfg
  steerkit augment-audio --in wavs/ --out wavs_aug/ --seed 3

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import math
import sys
from dataclasses import asdict
from functools import partial
from pathlib import Path

import torch

from . import audio_augment as audio
from . import evaluation as ev
from . import steering as st
from . import synth_task as task
from .errors import SteerkitError
from .numerics import checkpoint
from .numerics.optim import AdamState
from .numerics.rng import Rng, stream_id
from .parallel import ordered_map
from .transformer import GenerationResult, ModelConfig, Schedule, Transformer, loss_on, param_names, train, write_trace_jsonl


class UsageError(Exception):
    """Bad flag or config value; exit code 2."""


# key -> (type, default). Paths are relative to ``workdir`` unless absolute.
DEFAULTS: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "workdir": (str, "run"),
    "jobs": (int, 1),
    # synthetic task
    "n_train_speakers": (int, 4000),
    "utterances_per_speaker": (int, 3),
    "n_samples": (int, 4000),
    "eval_fraction": (float, 0.1),
    "heldout_speakers": (float, 0.05),
    # model
    "n_layers": (int, 4),
    "d_model": (int, 64),
    "n_heads": (int, 4),
    "d_ff": (int, 256),
    "max_seq_len": (int, 256),
    "tie_embeddings": (bool, True),
    # training
    "steps": (int, 1500),
    "batch_size": (int, 32),
    "lr": (float, 3e-3),
    "warmup": (int, 100),
    "log_every": (int, 50),
    # extraction
    "layers": (str, "all"),
    "augment": (bool, True),
    "strength": (float, 20.0),
    # steering
    "layer": (int, -1),
    "alpha": (float, 1.0),
    "direction": (str, st.SUBTRACT),
    "alphas": (str, "1.0,2.0"),
    "trace": (bool, False),
    # artifacts
    "corpus_dir": (str, "corpus"),
    "checkpoint": (str, "model.ckpt"),
    "train_state": (str, "train_state.ckpt"),
    "loss_csv": (str, "loss.csv"),
    "classifier": (str, "classifier.json"),
    "vectors": (str, "vectors.stkv"),
    "generations": (str, "generations.jsonl"),
    "trace_file": (str, "trace.jsonl"),
    "sweep_csv": (str, "sweep.csv"),
    "eval_csv": (str, "eval.csv"),
    "report": (str, "report"),
}

PATH_KEYS = (
    "corpus_dir",
    "checkpoint",
    "train_state",
    "loss_csv",
    "classifier",
    "vectors",
    "generations",
    "trace_file",
    "sweep_csv",
    "eval_csv",
    "report",
)

CONDITIONS = (ev.ACCENTED, ev.NEUTRAL)


def _coerce(key: str, text: str):
    if key not in DEFAULTS:
        raise UsageError(f"unknown config key {key!r}")
    kind = DEFAULTS[key][0]
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise UsageError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def read_config(path: str | Path) -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def write_config(cfg: dict, path: str | Path) -> None:
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in cfg.items()]
    Path(path).write_text("\n".join(lines) + "\n")


class Run:
    """Resolved configuration plus path helpers."""

    def __init__(self, cfg: dict, timestamp: bool):
        self.cfg = cfg
        self.timestamp = timestamp
        self.workdir = Path(cfg["workdir"])
        self._validate()

    def __getitem__(self, key):
        return self.cfg[key]

    def _validate(self):
        c = self.cfg
        for key in ("n_samples", "n_train_speakers", "steps", "batch_size", "jobs", "n_layers"):
            if c[key] < 1:
                raise UsageError(f"{key} must be >= 1, got {c[key]}")
        if c["n_samples"] < 2:
            raise UsageError("n_samples must be >= 2 (one per condition)")
        if c["utterances_per_speaker"] < 2:
            raise UsageError("utterances_per_speaker must be >= 2 to form reference/target pairs")
        if not 0 < c["eval_fraction"] < 1:
            raise UsageError("eval_fraction must lie in (0, 1)")
        if c["direction"] not in (st.SUBTRACT, st.ADD):
            raise UsageError(f"direction must be {st.SUBTRACT!r} or {st.ADD!r}")
        if c["alpha"] < 0:
            raise UsageError("alpha must be >= 0")

    def path(self, key: str) -> Path:
        p = Path(self.cfg[key])
        return p if p.is_absolute() else self.workdir / p

    def relative(self, p: Path) -> str:
        """``p`` relative to the workdir when inside it, so artifacts do not depend on where the run lives."""
        try:
            return Path(p).resolve().relative_to(self.workdir.resolve()).as_posix()
        except ValueError:
            return Path(p).as_posix()

    def corpus(self, name: str) -> Path:
        return self.path("corpus_dir") / name

    def rng(self, command: str) -> Rng:
        return Rng(self.cfg["seed"], stream_id(command))

    def created(self) -> str | None:
        return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds") if self.timestamp else None

    def model_config(self) -> ModelConfig:
        c = self.cfg
        return ModelConfig(
            vocab_size=task.Vocab().size,
            n_layers=c["n_layers"],
            d_model=c["d_model"],
            n_heads=c["n_heads"],
            d_ff=c["d_ff"],
            max_seq_len=c["max_seq_len"],
            seed=c["seed"],
            tie_embeddings=c["tie_embeddings"],
        )

    def layer_list(self, n_layers: int) -> list[int]:
        spec = self.cfg["layers"].strip()
        if spec == "all":
            return list(range(n_layers))
        try:
            layers = sorted({int(x) for x in spec.split(",") if x.strip()})
        except ValueError:
            raise UsageError(f"layers: expected 'all' or a comma list, got {spec!r}") from None
        bad = [l for l in layers if not 0 <= l < n_layers]
        if bad or not layers:
            raise UsageError(f"layers {bad or spec} outside [0, {n_layers})")
        return layers

    def alpha_grid(self) -> list[float]:
        try:
            alphas = [float(x) for x in self.cfg["alphas"].split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"alphas: expected a comma list of numbers, got {self.cfg['alphas']!r}") from None
        if not alphas or any(a < 0 for a in alphas):
            raise UsageError("alphas must be a non-empty list of non-negative numbers")
        return alphas


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path} (run the earlier pipeline step first)")
    return path


def _dump_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_triplets(run: Run, split: str, condition: str) -> list[task.Triplet]:
    path = _need(run.corpus(f"{split}_{condition}.jsonl"), f"{split} triplets")
    return [task.triplet_from_record(r) for r in task.read_jsonl(path)]


def check_split_hygiene(run: Run) -> None:
    """Evaluation target texts must never appear among extraction targets."""
    seen = {t.target_text for c in CONDITIONS for t in load_triplets(run, "extract", c)}
    for c in CONDITIONS:
        leaked = [t for t in load_triplets(run, "eval", c) if t.target_text in seen]
        if leaked:
            raise SteerkitError(f"{len(leaked)} {c} evaluation targets also occur in the extraction split")


def load_classifier(run: Run) -> ev.AttrClassifier:
    return ev.AttrClassifier.load(_need(run.path("classifier"), "accent classifier"))


# -- subcommands ---------------------------------------------------------------


def cmd_gen_corpus(run: Run) -> int:
    rng = run.rng("gen-corpus")
    vocab = task.Vocab()
    out = run.path("corpus_dir")
    out.mkdir(parents=True, exist_ok=True)

    records = task.make_training_corpus(run["n_train_speakers"], run["utterances_per_speaker"], rng.child("train"), vocab)
    task.write_jsonl(out / "train.jsonl", records)

    native, accented = task.default_speakers(rng.child("speakers"))
    n_extract = {ev.ACCENTED: (run["n_samples"] + 1) // 2, ev.NEUTRAL: run["n_samples"] // 2}
    n_eval = max(1, round(run["eval_fraction"] * run["n_samples"] / 2))
    per_pool = {
        split: 2 * math.ceil(max(n_extract.values()) / len(native)) + 2 if split == "extract"
        else 2 * math.ceil(n_eval / len(native)) + 2
        for split in ("extract", "eval")
    }
    # one pool of distinct sentences, cut into disjoint extraction and evaluation parts
    pool = task.make_sentence_pool(sum(per_pool.values()), rng.child("sentences"), vocab.n_words)
    pools = {"extract": pool[: per_pool["extract"]], "eval": pool[per_pool["extract"] :]}
    panels = {ev.ACCENTED: (accented, task.ACCENTED), ev.NEUTRAL: (native, task.NEUTRAL)}
    counts: dict[str, dict] = {}
    for split in ("extract", "eval"):
        for cond, (speakers, accent) in panels.items():
            n = n_extract[cond] if split == "extract" else n_eval
            trips = task.build_triplets(n, speakers, accent, pools[split], rng.child(f"{split}/{cond}"))
            task.write_jsonl(out / f"{split}_{cond}.jsonl", [task.triplet_record(t) for t in trips])
            per_speaker: dict[str, int] = {}
            for t in trips:
                per_speaker[t.speaker_id] = per_speaker.get(t.speaker_id, 0) + 1
            counts[f"{split}_{cond}"] = per_speaker
    _dump_json(
        out / "speakers.json",
        {s.speaker_id: list(s.timbre_dist) for s in native + accented},
    )

    labelled = [(r["surface"], ev.ACCENTED if r["accent_prob"] > 0 else ev.NEUTRAL) for r in records]
    clf = ev.train_attr_classifier(labelled, seed=run["seed"], vocab=vocab)
    clf.save(run.path("classifier"))

    summary = {"seed": run["seed"], "counts": counts, "n_train_utterances": len(records), "created": run.created()}
    _dump_json(out / "summary.json", summary)
    print(f"training corpus: {len(records)} utterances from {run['n_train_speakers']} speakers")
    for name, per in counts.items():
        detail = ", ".join(f"{k}={v}" for k, v in sorted(per.items()))
        print(f"{name}: {sum(per.values())} triplets ({detail})")
    print(f"accent classifier held-out accuracy: {clf.heldout_accuracy:.4f}")
    return 0


def _split_training(run: Run, records: list[dict]) -> tuple[list, list]:
    speakers = list(dict.fromkeys(r["speaker_id"] for r in records))
    if len(speakers) < 2:
        raise UsageError("training needs at least two speakers (one is held out)")
    n_held = min(len(speakers) - 1, max(1, round(run["heldout_speakers"] * len(speakers))))
    held = set(speakers[-n_held:])
    fit = task.training_examples([r for r in records if r["speaker_id"] not in held])
    heldout = task.training_examples([r for r in records if r["speaker_id"] in held])
    return fit, heldout


@torch.no_grad()
def heldout_loss(model: Transformer, examples, batch_size: int = 64) -> float:
    total = weight = 0.0
    for i in range(0, len(examples), batch_size):
        batch = examples[i : i + batch_size]
        n = sum(len(t) - max(gs - 1, 0) - 1 for t, gs in batch)
        total += float(loss_on(model, batch)) * n
        weight += n
    return total / weight


def cmd_train(run: Run, resume: bool = False, stop_at: int | None = None) -> int:
    records = task.read_jsonl(_need(run.corpus("train.jsonl"), "training corpus"))
    fit, heldout = _split_training(run, records)
    config = run.model_config()
    schedule = Schedule(
        steps=run["steps"],
        batch_size=run["batch_size"],
        lr=run["lr"],
        warmup=min(run["warmup"], run["steps"]),
        seed=run["seed"],
        log_every=run["log_every"],
    )
    ckpt, state_path, loss_path = run.path("checkpoint"), run.path("train_state"), run.path("loss_csv")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model, state, start, history = None, None, 0, []
    if resume and ckpt.exists() and state_path.exists():
        model = Transformer.load(ckpt)
        if asdict(model.config) != asdict(config):
            raise SteerkitError("checkpoint was trained with a different model configuration")
        tensors, meta, _ = checkpoint.load(state_path)
        names = param_names(config)
        state = AdamState([tensors[f"m.{n}"] for n in names], [tensors[f"v.{n}"] for n in names])
        start = int(meta["step"])
        if loss_path.exists():
            with open(loss_path, newline="") as fh:
                history = [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh) if int(r["step"]) < start]
        print(f"resuming from step {start}")
    result = train(fit, config, schedule, model=model, state=state, start_step=start, stop_at=stop_at)
    losses = history + result.losses

    meta = {"step": result.step, "seed": run["seed"], "corpus_digest": file_digest(run.corpus("train.jsonl"))}
    if run.timestamp:
        meta["created"] = run.created()
    digest = result.model.save(ckpt, meta)
    names = param_names(config)
    moments = {f"m.{n}": m for n, m in zip(names, result.state.m)}
    moments.update({f"v.{n}": v for n, v in zip(names, result.state.v)})
    checkpoint.save(state_path, moments, {"step": result.step, "checkpoint_digest": digest})
    with open(loss_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows((s, f"{l:.6f}") for s, l in losses)
    print(f"trained {result.step} steps; checkpoint {ckpt} sha256 {digest[:16]}")
    print(f"final held-out loss: {heldout_loss(result.model, heldout):.4f}")
    return 0


def cmd_extract(run: Run) -> int:
    model = Transformer.load(_need(run.path("checkpoint"), "checkpoint"))
    n_acc, n_neu = (run["n_samples"] + 1) // 2, run["n_samples"] // 2
    acc, neu = load_triplets(run, "extract", ev.ACCENTED), load_triplets(run, "extract", ev.NEUTRAL)
    if n_acc > len(acc) or n_neu > len(neu):
        raise UsageError(f"n_samples={run['n_samples']} exceeds the corpus ({len(acc)} + {len(neu)} triplets)")
    layers = run.layer_list(model.config.n_layers)
    result = st.extract_vectors(
        model,
        acc[:n_acc],
        neu[:n_neu],
        layers,
        augment=run["augment"],
        rng=run.rng("extract"),
        strength=run["strength"],
        timestamp=run.timestamp,
        jobs=run["jobs"],
    )
    out = run.path("vectors")
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = st.save_vectors(result.vectors, out)
    st.export_vectors_json(result.vectors, out.with_suffix(".json"))
    meta = next(iter(result.vectors.values())).meta
    print(f"kept {meta.n_accented}/{n_acc} accented and {meta.n_neutral}/{n_neu} neutral samples (augment={meta.augmented})")
    for l, v in sorted(result.vectors.items()):
        print(f"layer {l}: |v| = {v.norm:.6f}")
    print(f"vectors {out} sha256 {digest[:16]}")
    return 0


def _resolve_layer(run: Run, model: Transformer) -> int:
    layer = run["layer"] if run["layer"] >= 0 else model.config.n_layers // 2
    if not 0 <= layer < model.config.n_layers:
        raise UsageError(f"layer {layer} outside [0, {model.config.n_layers})")
    return layer


def cmd_steer(run: Run) -> int:
    model = Transformer.load(_need(run.path("checkpoint"), "checkpoint"))
    vectors = st.load_vectors(_need(run.path("vectors"), "steering vectors"), model)
    layer = _resolve_layer(run, model)
    if layer not in vectors:
        raise st.ExtractionError(f"no steering vector for layer {layer} (have {sorted(vectors)})")
    config = st.SteerConfig(layer, run["alpha"], run["direction"])
    tap = (layer,) if run["trace"] else ()
    records, traces, ids = [], [], []
    for cond in CONDITIONS:
        trips = load_triplets(run, "eval", cond)
        results, events = st.steered_generations(
            model, trips, vectors[layer], config, tap=tap, jobs=run["jobs"], per_sample_events=True
        )
        for i, (r, e) in enumerate(zip(results, events)):
            records.append(
                {
                    "condition": cond,
                    "index": i,
                    "speaker_id": trips[i].speaker_id,
                    "status": r.status,
                    "steps_used": r.steps_used,
                    "tokens": r.tokens,
                    "norm_guard_events": e,
                    "layer": layer,
                    "alpha": run["alpha"],
                    "direction": run["direction"],
                }
            )
            if r.trace is not None:
                traces.append(r.trace)
                ids.append(f"{cond}/{i}")
        print(f"{cond}: isr {ev.isr(results):.4f} over {len(results)} prompts, {sum(events)} norm-guard events")
    out = run.path("generations")
    out.parent.mkdir(parents=True, exist_ok=True)
    task.write_jsonl(out, records)
    if traces:
        write_trace_jsonl(run.path("trace_file"), traces, ids)
    print(f"generations written to {out}")
    return 0


def _evaluator(clf: ev.AttrClassifier):
    def evaluate(results, trips, label, layer, alpha, events):
        return ev.evaluate_generations(results, trips, clf, label, layer, alpha, events)

    return evaluate


def cmd_sweep(run: Run) -> int:
    check_split_hygiene(run)
    model = Transformer.load(_need(run.path("checkpoint"), "checkpoint"))
    vectors = st.load_vectors(_need(run.path("vectors"), "steering vectors"), model)
    layers = [l for l in run.layer_list(model.config.n_layers)]
    grid = [(l, a) for l in layers for a in run.alpha_grid()]
    evaluate = _evaluator(load_classifier(run))
    out = run.path("sweep_csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for cond in CONDITIONS:
        rows += st.sweep(
            model,
            vectors,
            grid,
            load_triplets(run, "eval", cond),
            evaluate,
            out_path=out,
            sign=run["direction"],
            label_prefix=f"{cond}:",
            jobs=run["jobs"],
        )
    _print_rows(rows)
    return 0


def cmd_evaluate(run: Run) -> int:
    check_split_hygiene(run)
    clf = load_classifier(run)
    recs = task.read_jsonl(_need(run.path("generations"), "generations"))
    rows = []
    for cond in CONDITIONS:
        trips = load_triplets(run, "eval", cond)
        mine = sorted((r for r in recs if r["condition"] == cond), key=lambda r: r["index"])
        if not mine:
            continue
        if [r["index"] for r in mine] != list(range(len(trips))):
            raise SteerkitError(f"{cond} generations do not cover the evaluation split one-to-one")
        results = [GenerationResult(r["tokens"], r["status"], r["steps_used"]) for r in mine]
        first = mine[0]
        label = f"{cond}:steer_layer{first['layer']}_alpha{first['alpha']:g}_{first['direction']}"
        events = sum(r["norm_guard_events"] for r in mine)
        rows.append(ev.evaluate_generations(results, trips, clf, label, first["layer"], first["alpha"], events))
    if not rows:
        raise SteerkitError("generation file holds no records")
    out = run.path("eval_csv")
    ev.write_rows_csv(out, rows)
    _print_rows(rows)
    return 0


def cmd_report(run: Run, inputs: list[str] | None = None) -> int:
    paths = [Path(p) for p in inputs] if inputs else [p for p in (run.path("sweep_csv"), run.path("eval_csv")) if p.exists()]
    if not paths:
        raise FileNotFoundError("no sweep or evaluation CSV to report on")
    rows = []
    for p in paths:
        rows += ev.read_rows_csv(_need(p, "metrics CSV"))
    meta = {
        "seed": run["seed"],
        "inputs": {run.relative(p): file_digest(p) for p in paths},
        "created": run.created(),
    }
    for key in ("checkpoint", "vectors"):
        if run.path(key).exists():
            meta[f"{key}_digest"] = file_digest(run.path(key))
    if run.path("checkpoint").exists():
        n_layers = Transformer.load(run.path("checkpoint")).config.n_layers
        meta["selected_layer"] = ev.best_middle_layer(rows, n_layers, 1.0, prefix=f"{ev.ACCENTED}:")
    csv_path, json_path = ev.report(rows, run.path("report"), meta)
    _print_rows(ev.order_rows(rows))
    print(f"report written to {csv_path} and {json_path}")
    return 0


def _augment_one(in_dir: Path, out_dir: Path, seed: int, config: audio.PerturbConfig, name: str) -> dict:
    wave = audio.read_wav(in_dir / name)
    rng = Rng(seed, stream_id("augment-audio")).child(name)
    outcome = audio.perturb(wave, config, rng)
    audio.write_wav(outcome.wave, out_dir / name)
    return {"input": name, **outcome.params()}


def cmd_augment_audio(run: Run, in_dir: str, out_dir: str) -> int:
    src, dst = Path(in_dir), Path(out_dir)
    if not src.is_dir():
        raise FileNotFoundError(f"input directory not found: {src}")
    dst.mkdir(parents=True, exist_ok=True)
    names = sorted(p.name for p in src.iterdir() if p.suffix.lower() == ".wav")
    work = partial(_augment_one, src, dst, run["seed"], audio.PerturbConfig())
    log = ordered_map(work, names, run["jobs"])
    task.write_jsonl(dst / "params.jsonl", log)
    applied = sum(r["applied"] for r in log)
    print(f"augmented {len(names)} files ({applied} perturbed, {len(names) - applied} passed through)")
    return 0


def _print_rows(rows) -> None:
    print(f"{'condition':40s} {'isr':>6s} {'amr_acc':>8s} {'amr_neu':>8s} {'spk_sim':>8s} {'cer':>6s}")
    for r in rows:
        print(f"{r.condition:40s} {r.isr:6.3f} {r.amr_accented:8.3f} {r.amr_neutral:8.3f} {r.spk_sim:8.3f} {r.cer:6.3f}")


# -- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value config file; flags override it")
    common.add_argument("--seed", type=int, help="top-level seed (default 0)")
    common.add_argument("--workdir", help="directory for all artifacts (default ./run)")
    common.add_argument("--jobs", type=int, help="worker processes for per-sample work (default 1)")
    common.add_argument("--no-timestamp", action="store_true", help="omit creation times so reruns are byte-identical")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    parser = argparse.ArgumentParser(prog="steerkit", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="write training corpus, triplets and accent classifier")
    p.add_argument("--n-samples", type=int, dest="n_samples", help="extraction triplets over both conditions (default 4000)")

    p = sub.add_parser("train", parents=[common], help="train the toy model")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the saved checkpoint and optimiser state")
    p.add_argument("--stop-at", type=int, dest="stop_at", help="save and stop after this many steps of the schedule")

    p = sub.add_parser("extract", parents=[common], help="extract per-layer steering vectors")
    p.add_argument("--n-samples", type=int, dest="n_samples")
    p.add_argument("--layers", help="'all' or a comma list")
    p.add_argument("--vectors", help="output vector file")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--augment", dest="augment", action="store_const", const=True)
    g.add_argument("--no-augment", dest="augment", action="store_const", const=False)

    p = sub.add_parser("steer", parents=[common], help="steered decoding of the evaluation split")
    p.add_argument("--layer", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--direction", choices=[st.SUBTRACT, st.ADD])
    p.add_argument("--vectors")
    p.add_argument("--trace", dest="trace", action="store_const", const=True, help="also dump the steered layer's trace")

    p = sub.add_parser("sweep", parents=[common], help="evaluate every (layer, alpha) pair plus the unsteered baseline")
    p.add_argument("--layers")
    p.add_argument("--alphas", help="comma list (default 1.0,2.0)")
    p.add_argument("--direction", choices=[st.SUBTRACT, st.ADD])
    p.add_argument("--vectors")
    p.add_argument("--sweep-csv", dest="sweep_csv")

    sub.add_parser("evaluate", parents=[common], help="score the generations written by 'steer'")

    p = sub.add_parser("report", parents=[common], help="merge metric CSVs into CSV + JSON")
    p.add_argument("--inputs", nargs="+", help="metric CSVs (default: sweep and eval CSVs of the run)")

    p = sub.add_parser("augment-audio", parents=[common], help="perturb every WAV in a directory")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    return parser


def resolve(args: argparse.Namespace) -> Run:
    cfg = {k: d for k, (_, d) in DEFAULTS.items()}
    if args.config:
        cfg.update(read_config(args.config))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _coerce(key.strip(), value)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return Run(cfg, timestamp=not args.no_timestamp)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = resolve(args)
        if args.command == "gen-corpus":
            return cmd_gen_corpus(run)
        if args.command == "train":
            return cmd_train(run, resume=args.resume, stop_at=args.stop_at)
        if args.command == "extract":
            return cmd_extract(run)
        if args.command == "steer":
            return cmd_steer(run)
        if args.command == "sweep":
            return cmd_sweep(run)
        if args.command == "evaluate":
            return cmd_evaluate(run)
        if args.command == "report":
            return cmd_report(run, args.inputs)
        return cmd_augment_audio(run, args.in_dir, args.out_dir)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (SteerkitError, OSError, ValueError, KeyError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
