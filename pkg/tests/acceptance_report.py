"""Shared result sink for the acceptance suite.

Each acceptance criterion records one (name, passed, detail) entry here; the
conftest terminal-summary hook prints them as one line per criterion so the
verdicts are visible in any pytest run.
"""

import functools

RESULTS: list[tuple[str, bool, str]] = []


def record(name: str, passed: bool, detail: str = "") -> None:
    RESULTS.append((name, bool(passed), detail))


def format_line(name: str, passed: bool, detail: str = "") -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}"
    return f"{line}: {detail}" if detail else line


def criterion(name: str):
    """Wrap a test so its outcome is recorded and printed as a PASS/FAIL
    line. The wrapped test may return a short detail string."""
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs) or ""
            except BaseException as exc:
                record(name, False, str(exc).splitlines()[0][:160])
                print(format_line(name, False))
                raise
            record(name, True, detail)
            print(format_line(name, True, detail))
        return wrapper
    return decorate
