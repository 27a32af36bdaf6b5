"""One PASS/FAIL line per acceptance criterion, printed in the pytest summary."""

import time
from contextlib import contextmanager

LINES = []


class Check:
    """Holds the measured values that end up on the criterion's line."""

    def __init__(self):
        self.detail = ""
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start


@contextmanager
def criterion(number: int, title: str, echo=None):
    """Record PASS when the block completes and FAIL when it raises."""
    chk = Check()
    try:
        yield chk
    except BaseException as exc:
        detail = chk.detail or f"{type(exc).__name__}: {exc}".splitlines()[0]
        _record(number, title, False, detail, chk.elapsed, echo)
        raise
    _record(number, title, True, chk.detail, chk.elapsed, echo)


def _record(number, title, ok, detail, elapsed, echo):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title}: {detail} [{elapsed:.1f} s]"
    LINES.append((number, line))
    if echo is not None:
        echo(line)
