import datetime as dt
import random

import pytest

from amp.pki import EkuPurpose, alliance_layout, generate_test_pki
from amp.service import AmpService, LocalClient


def _window():
    now = dt.datetime.now(dt.timezone.utc)
    return now - dt.timedelta(days=1), now + dt.timedelta(days=30)


@pytest.fixture(scope="session")
def pki():
    """Alliance root -> TPS/WBC -> four bureaus -> one person each."""
    nb, na = _window()
    layout = alliance_layout()
    layout["children"].append({"name": "client-only", "purposes": ["ClientAuth"]})
    layout["children"].append({"name": "ledger-admin", "purposes": ["LedgerRegistration"]})
    return generate_test_pki(layout, not_before=nb, not_after=na)


@pytest.fixture(scope="session")
def alice(pki):
    return pki.chain("alice@TPS-UK")


@pytest.fixture(scope="session")
def bob(pki):
    return pki.chain("bob@TPS-USA")


@pytest.fixture(scope="session")
def carol(pki):
    return pki.chain("carol@WBC-North")


@pytest.fixture(scope="session")
def policy(pki):
    return pki.policy(EkuPurpose.MANIFEST_SIGNING)


@pytest.fixture
def service(pki):
    svc = AmpService.in_memory([pki.root])
    yield svc
    svc.close()


@pytest.fixture
def client(service):
    return LocalClient(service)


@pytest.fixture
def rng():
    return random.Random(20240611)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
