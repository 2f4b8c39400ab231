import pytest

from esnac import chain_teacher, residual_teacher


@pytest.fixture
def chain():
    return chain_teacher()


@pytest.fixture
def resnet():
    return residual_teacher(blocks=2)


@pytest.fixture
def tiny_resnet():
    return residual_teacher(width=8, blocks=1)
