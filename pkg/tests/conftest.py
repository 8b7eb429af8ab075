import pytest

from rnaloop import autodiff


@pytest.fixture(autouse=True, scope="session")
def _finite_checks():
    autodiff.set_debug_checks(True)
    yield
    autodiff.set_debug_checks(False)
