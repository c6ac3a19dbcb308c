import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from captionformer import data, text, transformer as tf  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return tf.ModelConfig(vocab_size=10, feature_dim=6, d_model=8, n_heads=2, n_enc_layers=1,
                          n_dec_layers=1, d_ff=12, dropout_p=0.1, max_len=12)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    data.synth_dataset(out, n_images=16, S=4, feature_dim=32, vocab_size_tokens=12, seed=0)
    return out


@pytest.fixture(scope="session")
def synth_vocab(synth_dir):
    man = data.load_manifest(synth_dir / "manifest.jsonl")
    return text.build_vocab([text.normalize_and_tokenize(c) for r in man for c in r.captions])
