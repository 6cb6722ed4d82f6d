import pytest

from teampomdp import fixtures
from teampomdp.planner import build_coordinator_tree


@pytest.fixture(scope="session")
def models():
    return {name: fixtures.build_fixture(name) for name in fixtures.FIXTURE_NAMES}


@pytest.fixture(scope="session")
def trees(models):
    """Shared full coordinator trees (the expensive bind1c one in particular)."""
    out = {}
    for name, m in models.items():
        out[name] = {T: build_coordinator_tree(m, T) for T in (1, 2, 3)}
    return out
