import os
import time

import pytest

from zeroner import cli, corpus

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")

SYNTH_TRAIN = os.path.join(DATA_DIR, "synth_train.conll")
SYNTH_VECTORS = os.path.join(DATA_DIR, "synth_vectors.vec")
GOLDEN_GOLD = os.path.join(DATA_DIR, "golden_gold.conll")
GOLDEN_PRED = os.path.join(DATA_DIR, "golden_pred.conll")

# Settings that overfit the bundled 50-sentence corpus quickly and
# deterministically; shared by the acceptance suite and the CLI tests.
OVERFIT_CONFIG = """\
train = {train}
vectors = {vectors}
out = {out}
hidden_size = 24
num_layers = 2
expert_dim = 16
learning_rate = 0.005
batch_size = 5
dropout = 0.0
epochs = 200
patience = 15
seed = 7
freeze_embeddings = true
ngram_buckets = 64
"""


@pytest.fixture
def scheme4():
    return corpus.TagScheme(["PER", "LOC", "ORG", "MISC"])


@pytest.fixture
def synth_sentences():
    raw = corpus.read_raw(SYNTH_TRAIN)
    scheme = corpus.TagScheme.from_tags(t for _, tags in raw for t in tags)
    return scheme, corpus.read_conll(SYNTH_TRAIN, scheme)


class OverfitRun:
    def __init__(self, out_dir, seconds, exit_code):
        self.out_dir = out_dir
        self.seconds = seconds
        self.exit_code = exit_code
        self.checkpoint = os.path.join(out_dir, "checkpoint.bin")
        self.metrics = os.path.join(out_dir, "metrics.jsonl")


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Train the full model (auxiliary task + experts, frozen random
    vectors) on the bundled synthetic corpus, once per session."""
    out_dir = tmp_path_factory.mktemp("overfit")
    config_path = out_dir / "train.cfg"
    config_path.write_text(OVERFIT_CONFIG.format(
        train=SYNTH_TRAIN, vectors=SYNTH_VECTORS, out=str(out_dir)))
    start = time.monotonic()
    code = cli.main(["train", "--config", str(config_path)])
    seconds = time.monotonic() - start
    return OverfitRun(str(out_dir), seconds, code)
