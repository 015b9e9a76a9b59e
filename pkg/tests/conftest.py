import pytest

from impactlab import synthgen as sg


@pytest.fixture(scope="session")
def small_gen_config() -> sg.GenConfig:
    return sg.GenConfig(window=60, days=2)


@pytest.fixture(scope="session")
def small_dataset(small_gen_config):
    """48 train / 16 eval samples with a short window; shared read-only."""
    return sg.build_dataset(small_gen_config, 48, 16, seed=123)
