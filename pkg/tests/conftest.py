import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: slow theory-vs-simulation acceptance suite")
    config.addinivalue_line("markers", "slow: Monte-Carlo tests taking more than a few seconds")


@pytest.fixture
def vision_arch():
    from wideformer import ArchSpec

    return ArchSpec("vision", n=32, H=4, T=3, n_in=6, n_out=3, blocks=("mhsa", "mlp"))


@pytest.fixture
def language_arch():
    from wideformer import ArchSpec

    return ArchSpec("language", n=32, H=4, T=3, n_in=10, n_out=10, blocks=("mhsa-masked", "mlp"), weight_tying=True)
