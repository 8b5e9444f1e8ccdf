import pytest

from faultfence import corpus
from faultfence.asm import assemble


@pytest.fixture(scope="session")
def pincheck():
    return corpus.pincheck()


@pytest.fixture(scope="session")
def bootloader():
    return corpus.bootloader()


@pytest.fixture(scope="session")
def pin_image(pincheck):
    return assemble(pincheck.source)


@pytest.fixture(scope="session")
def boot_image(bootloader):
    return assemble(bootloader.source)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
