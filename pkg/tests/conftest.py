import time
from dataclasses import dataclass

import numpy as np
import pytest

from microvlm import synthetic
from microvlm.fusion import Example, FusionConfig, FusionModel
from microvlm.tokenizer import assemble_prompt, build_vocab, encode_text
from microvlm.trainer import Split, TrainConfig, evaluate_loss, train

OVERFIT_EPOCHS = 60
OVERFIT_BATCH = 4


@dataclass
class Overfit:
    model: FusionModel
    split: Split
    prompt: object
    data: list
    untrained_loss: dict
    result: object
    seconds: float


def build_caption_task(seed=0):
    data = synthetic.corpus()
    vocab = build_vocab([c for _, _, c in data] + [synthetic.CAPTION_QUESTION])
    model = FusionModel(FusionConfig(vocab_size=len(vocab)), vocab=vocab, seed=seed)
    vision = model.encode_images([img for img, _, _ in data])
    prompt = assemble_prompt(vocab, "", synthetic.CAPTION_QUESTION)
    examples = [Example(prompt.ids, prompt.slot, encode_text(vocab, c), i) for i, (_, _, c) in enumerate(data)]
    return model, Split(examples, vision), prompt, data


@pytest.fixture(scope="session")
def overfit():
    """The 16-texture caption task trained with default hyperparameters."""
    start = time.perf_counter()
    model, split, prompt, data = build_caption_task()
    untrained = {b: evaluate_loss(model, split, b) for b in (4, 8, 12, 16)}
    cfg = TrainConfig(epochs=OVERFIT_EPOCHS, batch_size=OVERFIT_BATCH, lr=1e-3, seed=0, early_stop_patience=1000)
    result = train(model, split, split, cfg)
    return Overfit(model, split, prompt, data, untrained, result, time.perf_counter() - start)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
