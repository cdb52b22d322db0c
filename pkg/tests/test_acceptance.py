"""Headline properties at their stated tolerances; each prints one PASS/FAIL line."""

import subprocess
import sys
import time

import pytest

from lapdiff import verify

NUMBERED = list(enumerate(verify.CHECKS, start=1))


def _report(capsys, number, label, ok, detail=""):
    with capsys.disabled():
        print()
        print(f"[{number:2d}] {label:<16} {'PASS' if ok else 'FAIL'} {detail}".rstrip())


@pytest.mark.parametrize("number,name", NUMBERED, ids=[n for _, n in NUMBERED])
def test_property(capsys, number, name):
    rows = verify.CHECKS[name](0)
    ok = all(r.passed for r in rows)
    _report(capsys, number, name, ok, "; ".join(f"{r.name}={r.value:.3g} ({r.tolerance()})" for r in rows))
    for r in rows:
        assert r.passed, r.line()


def test_verify_command_full_suite(capsys):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "lapdiff", "verify"], capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    ok = proc.returncode == 0 and elapsed < 300
    _report(capsys, len(NUMBERED) + 1, "verify_command", ok, f"exit={proc.returncode} elapsed={elapsed:.1f}s (< 300s)")
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert elapsed < 300
