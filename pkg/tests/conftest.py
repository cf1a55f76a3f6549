import pytest

from pagkd.synthdata import ImageStore, SynthConfig, generate


@pytest.fixture(scope="session")
def small_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    generate(root, SynthConfig(per_class=15, seed=3))
    return root


@pytest.fixture
def small_store(small_dir):
    return ImageStore(small_dir)


@pytest.fixture(scope="session")
def default_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("default")
    generate(root, SynthConfig())
    return root


_verdicts: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _verdicts.extend(v for k, v in report.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_verdicts, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
