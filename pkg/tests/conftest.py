"""Shared helpers for driving guest threads from tests."""

from __future__ import annotations

acceptance_verdicts: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_verdicts:
        terminalreporter.section("acceptance verdicts")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)


def run_in_guest(world, process, fn, timeout=30.0):
    """Run ``fn(thread)`` on a fresh guest thread; re-raise its failure."""
    box = {}
    thread = world.new_thread(process)

    def body(t):
        try:
            box["result"] = fn(t)
        except BaseException as exc:
            box["error"] = exc

    thread.start(body)
    thread.join(timeout)
    if "error" in box:
        raise box["error"]
    return box["result"]
