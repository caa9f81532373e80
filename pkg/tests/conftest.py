import pytest

from grantnovelty.corpus import link
from grantnovelty.synthkit import SynthSpec, generate


@pytest.fixture(scope="session")
def small_corpus():
    """Two agencies, three years, 150 grants per (agency, year)."""
    return generate(SynthSpec(seed=3, agencies=("NSF", "NIH"), years=(2010, 2012), grants_per_year=150))


@pytest.fixture(scope="session")
def small_linked(small_corpus):
    return link(small_corpus.grants, small_corpus.publications)


verdicts = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[verdicts] = []


@pytest.fixture
def verdict(request):
    """Print and record one PASS/FAIL line, then assert it."""
    lines = request.config.stash[verdicts]

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(verdicts, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
