import gc

import jax
import pytest


@pytest.fixture(autouse=True, scope="module")
def _release_compiled():
    # every module jits its own closures; without this the cache outgrows a small box
    yield
    jax.clear_caches()
    gc.collect()
