import pytest

from topoformer.autograd import current_tape

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.fixture(autouse=True)
def _fresh_default_tape():
    yield
    current_tape().reset()


def pytest_runtest_logreport(report):
    """Remember the outcome and recorded detail of every acceptance criterion."""
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        _ACCEPTANCE[name] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[name]
        number, _, slug = name[len("test_criterion_"):].partition("_")
        line = f"criterion {int(number):2d} {outcome}  {slug.replace('_', ' ')}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
