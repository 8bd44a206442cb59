import contextlib

import pytest

# criterion number -> (title, passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    @contextlib.contextmanager
    def check(number: int, title: str):
        detail = {"text": ""}
        try:
            yield detail
        except BaseException as exc:
            ACCEPTANCE[number] = (title, False, f"{detail['text']} {type(exc).__name__}: {exc}".strip())
            raise
        ACCEPTANCE[number] = (title, True, detail["text"])
    return check


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        first = detail.splitlines()[0] if detail else ""
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{number:2d}] {title}: {first}")
