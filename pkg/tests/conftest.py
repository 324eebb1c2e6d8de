import pytest

from steerkit.synth_task import Vocab
from steerkit.transformer import ModelConfig, Transformer

VOCAB = Vocab()


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(vocab_size=VOCAB.size, n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq_len=128, seed=3)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return Transformer(tiny_config)


@pytest.fixture(scope="session")
def trained_model():
    """Small model trained just long enough that greedy decodes terminate."""
    from steerkit.numerics import Rng
    from steerkit.synth_task import make_training_corpus, training_examples
    from steerkit.transformer import Schedule, train

    examples = training_examples(make_training_corpus(200, 3, Rng(0, 1)))
    cfg = ModelConfig(vocab_size=VOCAB.size, n_layers=2, d_model=32, n_heads=2, d_ff=64, max_seq_len=160, seed=1)
    return train(examples, cfg, Schedule(steps=600, batch_size=16, lr=3e-3, warmup=20, log_every=50)).model


@pytest.fixture(scope="session")
def panels():
    """(accented, neutral) triplet lists of 8 sharing text pairs."""
    from steerkit.numerics import Rng
    from steerkit.synth_task import ACCENTED, NEUTRAL, build_triplets, default_speakers, make_sentence_pool

    pool = make_sentence_pool(40, Rng(2, 2))
    native, accented = default_speakers(Rng(0, 3))
    return (
        build_triplets(8, accented, ACCENTED, pool, Rng(3, 3)),
        build_triplets(8, native, NEUTRAL, pool, Rng(3, 3)),
    )


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
