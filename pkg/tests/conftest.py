import pytest

from helpers import StubGateway

from tpsc.stamper import MockStampService


@pytest.fixture
def mock_service():
    with MockStampService(0, confirm_delay_s=0.0) as svc:
        yield svc


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("TPSC_API_KEY", "test-creator-key")
    return "test-creator-key"


@pytest.fixture
def gateway():
    gw = StubGateway()
    yield gw
    gw.close()


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail, secs = ACCEPTANCE[n]
        terminalreporter.write_line(
            f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  ({secs:.2f} s)  {detail}")
