import pytest

from freedfml import pool as pool_mod
from freedfml import tasks


@pytest.fixture(scope="session")
def universe():
    return tasks.build_universe(tasks.UniverseConfig(), seed=0)


@pytest.fixture(scope="session")
def small_pool(universe):
    return pool_mod.pretrain_pool(universe, pool_mod.PoolConfig(size=10), seed=0)
