import pytest

from mvmdp.models import build_inventory, build_queueing


@pytest.fixture(scope="session")
def queueing():
    return build_queueing()


@pytest.fixture(scope="session")
def inventory():
    return build_inventory()
