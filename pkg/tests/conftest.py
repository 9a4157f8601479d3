import pathlib

import pytest

from gridems.matrices import build_matrices
from gridems.model import build_linknet, load_case

CASES = pathlib.Path(__file__).resolve().parents[1] / "src/gridems/cases"


@pytest.fixture(scope="session")
def case2():
    return load_case(CASES / "case2.json")


@pytest.fixture(scope="session")
def case3ring():
    return load_case(CASES / "case3ring.json")


@pytest.fixture(scope="session")
def case14():
    return load_case(CASES / "case14.json")


@pytest.fixture(scope="session")
def case14stressed():
    return load_case(CASES / "case14stressed.json")


@pytest.fixture(scope="session")
def case14_ctx(case14):
    idx = build_linknet(case14)
    mats = build_matrices(case14, idx)
    return case14, idx, mats


def case_path(name: str) -> pathlib.Path:
    return CASES / f"{name}.json"
