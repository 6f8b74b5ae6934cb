import numpy as np
import pytest
from hypothesis import settings

from hevdb.lattice import Randomness, gen_pk, gen_sk
from hevdb.ring import RingParams, preset

settings.register_profile("hevdb", deadline=None, max_examples=40)
settings.load_profile("hevdb")

# d=8, r=4 over the default primes (both are 1 mod 16)
TINY = dict(d=8, r=4, delta=2.0**20)


@pytest.fixture(scope="session")
def toy():
    return preset("toy")


@pytest.fixture(scope="session")
def toy_keys(toy):
    sk = gen_sk(toy, Randomness(1))
    return sk, gen_pk(sk, Randomness(2))


@pytest.fixture(scope="session")
def small():
    return preset("small")


@pytest.fixture(scope="session")
def small_keys(small):
    sk = gen_sk(small, Randomness(3))
    return sk, gen_pk(sk, Randomness(4))


@pytest.fixture(scope="session")
def tiny():
    return RingParams(**TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
