"""
Pytest configuration and shared fixtures for quantized-rnn tests.
"""

import os
import sys
import logging
from pathlib import Path

import pytest
from dotenv import load_dotenv

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from quantized_rnn.numerics import get_precision, set_precision  # noqa: E402

# Load environment variables
load_dotenv()

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"


def pytest_addoption(parser):
    """Add custom command line options."""
    parser.addoption(
        "--precision",
        action="store",
        default="float64",
        choices=["float32", "float64"],
        help="Scalar precision for tests (gradient checks need float64)",
    )


@pytest.fixture(autouse=True)
def test_precision(request):
    """Run every test at the requested precision and restore the previous one."""
    previous = get_precision()
    set_precision(request.config.getoption("--precision"))
    yield get_precision()
    set_precision(previous)


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def corpus_path() -> Path:
    """The bundled public-domain text."""
    return DATA_DIR / "corpus.txt"


@pytest.fixture(scope="session")
def classics_path() -> Path:
    """About 100 KB of public-domain prose and verse."""
    return DATA_DIR / "classics.txt"
