import pytest

from stochformer.data import SyntheticSpec, generate_synthetic, load_corpus, load_features
from stochformer.model import ModelConfig

# small enough that a few epochs take well under a second
SMALL_MODEL = ModelConfig(patch_h=4, patch_w=13, max_frames=32, d_model=8, n_heads=2,
                          ffn_hidden=(16,), lcn_filters=4, head_lwta=4, head_dense=(4, 1))


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_corpus")
    generate_synthetic(SyntheticSpec(n_participants=16, duration_s=0.3, seed=5), root)
    return root


@pytest.fixture(scope="session")
def small_corpus(small_corpus_dir):
    return load_features(load_corpus(small_corpus_dir))


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
