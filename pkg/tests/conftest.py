import numpy as np
import pytest

from fewmatch.features import Episode, FeatureSet, SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """24 classes per split, order pairs off, 10 videos per class."""
    spec = SyntheticSpec(num_classes=24, segments=8, d=16, noise_sigma=0.5, seed=3)
    return generate_synthetic(spec, tmp_path_factory.mktemp("synth"))


def make_episode(rng, n=3, d=4, way=3, shot=2, queries=1):
    support = [[FeatureSet(f"s{c}_{s}", rng.standard_normal((n, d))) for s in range(shot)] for c in range(way)]
    qs = [(FeatureSet(f"q{c}_{i}", rng.standard_normal((n, d))), c) for c in range(way) for i in range(queries)]
    return Episode(way, shot, support, qs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
