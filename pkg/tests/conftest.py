import pytest

from flowinverse.tasks.darcy import kl_basis_build


@pytest.fixture(scope="session")
def kl_basis():
    """Default 65x65 KL basis; disk-cached, so only the first run pays."""
    return kl_basis_build()
