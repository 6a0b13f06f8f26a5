"""Acceptance criteria AC-1..AC-9 at the default budget.

AC-1..AC-8 share one suite (and its 10^5-path ensemble); AC-9 runs the
``selftest`` command twice at a reduced budget and compares the artifacts.
Each criterion prints one PASS/FAIL line, repeated in the terminal summary.
"""

from __future__ import annotations

import pytest

from impacthedge.acceptance import Suite, ac9

from .conftest import ACCEPTANCE_LINES


@pytest.fixture(scope="module")
def suite():
    return Suite()


def _report(result):
    line = result.line()
    print(line)
    ACCEPTANCE_LINES.append(line)
    return result


@pytest.mark.slow
@pytest.mark.parametrize("name", ["AC-1", "AC-2", "AC-3", "AC-4", "AC-5", "AC-6", "AC-7", "AC-8"])
def test_criterion(suite, name):
    (result,) = suite.run([name])
    assert _report(result).passed, result.message


@pytest.mark.slow
def test_ac9_reproducibility(tmp_path):
    result = _report(ac9(workdir=tmp_path))
    assert result.passed, result.message
    assert len(result.details["files"]) == 1
