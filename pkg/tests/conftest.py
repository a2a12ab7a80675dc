import pytest

from mtdistill.graphdata import generate_sbm


@pytest.fixture
def small_sbm():
    return generate_sbm(6, 2, 0.9, 0.2, 4, 0.3, seed=3)


@pytest.fixture
def sbm20():
    return generate_sbm(20, 3, 0.5, 0.1, 8, 0.5, seed=0)
