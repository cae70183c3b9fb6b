import numpy as np
import pytest

from lib.distributions import make_distribution

SEED = 20240601


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)


@pytest.fixture
def normal():
    return make_distribution("normal:0,1")


@pytest.fixture
def pareto():
    return make_distribution("pareto:1.5")


@pytest.fixture
def student_t():
    return make_distribution("student_t:3")


@pytest.fixture
def exponential():
    return make_distribution("exponential:1")


@pytest.fixture
def runner():
    from typer.testing import CliRunner

    return CliRunner()


@pytest.fixture
def cli(runner, tmp_path):
    """Invokes the app with artifacts under a temporary directory."""
    from main import app

    def invoke(*args):
        return runner.invoke(app, [*args, "--output-dir", str(tmp_path / "out")])

    return invoke
