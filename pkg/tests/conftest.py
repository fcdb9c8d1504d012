import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """Four subjects, two eyes, two captures each."""
    from eigeniris.synthetic import generate_corpus

    root = tmp_path_factory.mktemp("mini") / "data"
    anns = generate_corpus(root, n_subjects=4, images_per_eye=2, seed=7)
    return root, anns


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
