"""The acceptance criteria at their stated tolerances, one pass/fail line each."""
import pytest

from scorelab.acceptance import CRITERIA, SUITES


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{fn.number:02d}" for fn in CRITERIA])
def test_criterion(criterion, capsys):
    res = criterion()
    with capsys.disabled():
        print(f"\n{res.line()}")
    assert res.passed, res.line()


def test_suites_partition_criteria():
    listed = sorted(fn.number for fns in SUITES.values() for fn in fns)
    assert listed == list(range(1, 12))
