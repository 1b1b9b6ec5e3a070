import random

import pytest

from lldc import crypto


@pytest.fixture
def toy():
    return crypto.TOY_GROUP


@pytest.fixture
def p256():
    return crypto.P256_GROUP


@pytest.fixture
def rng():
    return random.Random(1234)
