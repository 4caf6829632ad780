import logging

import pytest

from icheck.cluster import LocalCluster

MiB = 1024 * 1024
GiB = 1024 * MiB

_CRITERIA = []


@pytest.fixture
def cluster(tmp_path):
    with LocalCluster({"n1": GiB, "n2": GiB}, {"n3": GiB}, pfs_root=tmp_path / "pfs") as c:
        yield c


def pytest_configure(config):
    logging.getLogger("icheck").setLevel(logging.WARNING)
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.when == "setup" and rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA.append((mark.args[0], mark.args[1], rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {num:>2} {'PASS' if ok else 'FAIL'}: {title}"
                                    + (f" [{detail}]" if detail else ""))
