import pytest

from factories import small_setup


@pytest.fixture
def tiny():
    return small_setup()
