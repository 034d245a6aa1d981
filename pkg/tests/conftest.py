import numpy as np
import pytest

from mobilellm.architecture import ModelConfig
from mobilellm.data import ByteTokenizer
from mobilellm.model import Model
from mobilellm.training import TrainPlan, train

TOY_TEXT = (
    "the cat sat on the mat. the dog sat on the log. a bird sang in the tree. "
    "the cat saw the bird. the dog saw the cat. a fish swam in the pond. "
    "the bird flew over the pond. the fish hid under the log. "
)


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, n_heads=4, n_kv_heads=2, embed_dim=32, hidden_dim=64,
                vocab_size=64, context_len=32, share_embeddings=True)
    base.update(kw)
    return ModelConfig(**base)


def toy_corpus(repeats: int = 12, seed: int = 0) -> np.ndarray:
    """Shuffled sentences from a small closed vocabulary, byte-tokenized."""
    rng = np.random.default_rng(seed)
    sentences = [s.strip() + "." for s in TOY_TEXT.split(".") if s.strip()]
    parts = []
    for _ in range(repeats):
        parts.extend(rng.permutation(sentences))
    return np.asarray(ByteTokenizer().encode(" ".join(parts) + " "), dtype=np.int64)


@pytest.fixture(scope="session")
def toy_split():
    tokens = toy_corpus(repeats=16, seed=0)
    cut = int(0.85 * tokens.size)
    return tokens[:cut], tokens[cut:]


@pytest.fixture(scope="session")
def trained_toy(toy_split):
    """A 2-layer byte model trained briefly on the toy corpus (shared by eval/PTQ tests)."""
    train_tokens, _ = toy_split
    cfg = ModelConfig(2, 4, 2, 64, 192, vocab_size=258, context_len=64)
    model = Model(cfg, seed=0)
    plan = TrainPlan(total_steps=250, batch_size=8, seq_len=48, warmup_steps=10, seed=0)
    history = train(model, train_tokens, plan)
    return model, history


# One line per acceptance criterion, echoed in the terminal summary so the
# PASS/FAIL table is visible even when output capture is on.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
