import numpy as np
import pytest

from difftpt.augmentation import AugmentConfig, assemble_view_batch
from difftpt.encoder import ClassVocabulary, EncoderWeights, ImageSample, PromptContext


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_setup():
    """Random encoder, vocabulary, prompt and a 25-view batch."""
    rng = np.random.default_rng(7)
    weights = EncoderWeights.random(3)
    vocab = ClassVocabulary(rng.standard_normal((5, 16)))
    prompt = PromptContext(0.5 * rng.standard_normal((4, 16)))
    sample = ImageSample(rng.standard_normal(32), label=2)
    views = assemble_view_batch(sample, AugmentConfig(n_standard=12, n_diffusion=12, seed=5), weights)
    return prompt, vocab, weights, sample, views


# one line per acceptance criterion, printed after the run
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[key])
