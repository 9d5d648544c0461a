import pytest

from cip.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def small_synth():
    """A 2 000-pair train-mode dataset and its oracle."""
    return generate(SynthConfig(n_pairs=2000, rng_seed=3))


@pytest.fixture(scope="session")
def small_records(small_synth):
    return small_synth[0]
