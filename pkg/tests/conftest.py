import pytest

from pix2seg.autodiff import Rng
from pix2seg.data import PhantomConfig, generate_phantoms
from pix2seg.networks import DiscriminatorSpec, GeneratorSpec


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def phantoms64():
    return generate_phantoms(PhantomConfig(count=4, image_size=64, seed=1))


@pytest.fixture
def tiny_gen():
    return GeneratorSpec(base_width=4, depth=2, dropout_p=0.5, image_size=16)


@pytest.fixture
def tiny_disc():
    return DiscriminatorSpec(base_width=4, n_layers=2)


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
