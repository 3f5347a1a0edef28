import pathlib

import pytest

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="session")
def fdic_path() -> pathlib.Path:
    return FIXTURES / "fdic_institutions.yaml"


@pytest.fixture(scope="session")
def fdic_text(fdic_path) -> str:
    return fdic_path.read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def fixtures_dir() -> pathlib.Path:
    return FIXTURES
