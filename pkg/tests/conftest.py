import numpy as np
import pytest

from ontogcn.labelgraph import GLOVE_SCALE, fallback_vector, label_words
from ontogcn.ontology import SynthSpec, default_cooccurrence_bias, generate_synthetic, grid_taxonomy

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion(request):
    """Log one pass/fail line for an acceptance criterion (also shown in the summary)."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[_LINES].append(line)

    return record


def word_vector_table(labels, dim=300, seed=0):
    """Label -> mean of GloVe-scale hash vectors of its words."""
    return {
        label: np.mean([fallback_vector(w, dim, seed, GLOVE_SCALE) for w in label_words(label)], axis=0)
        for label in labels
    }


@pytest.fixture
def small_corpus():
    tax = grid_taxonomy(3, 2)
    spec = SynthSpec(tax, feature_dim=6, n_clips=60, noise_sigma=0.5,
                     bias=default_cooccurrence_bias(tax, seed=1), base_rate=0.2)
    return generate_synthetic(spec, seed=1)
