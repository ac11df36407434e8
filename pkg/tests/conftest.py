import pytest

from chunkcat import synth

from corpora import scattered_spec

_acceptance = {}


@pytest.fixture(scope="session")
def tiny_spec():
    return synth.preset("tiny", seed=7)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory, tiny_spec):
    out = tmp_path_factory.mktemp("tiny")
    return synth.generate(tiny_spec, out)


@pytest.fixture(scope="session")
def scattered_corpus(tmp_path_factory):
    return synth.generate(scattered_spec(), tmp_path_factory.mktemp("scattered"))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    key = (number, title)
    failed = rep.failed or (rep.when == "setup" and rep.skipped)
    if rep.when == "call" or failed:
        previous = _acceptance.get(key, True)
        _acceptance[key] = previous and not failed


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), ok in sorted(_acceptance.items()):
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}")
