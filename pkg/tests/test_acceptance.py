"""Full acceptance suite on the shipped default configuration.

Each test runs one criterion at its stated tolerance and prints a single
pass/fail line (numerical result, wall time and time budget).
"""
import pytest

from kinfilter import acceptance
from kinfilter.config import load_config


@pytest.fixture(scope="module")
def default_config():
    return load_config("sinusoidal")


@pytest.mark.slow
@pytest.mark.parametrize("criterion", range(1, 10))
def test_acceptance_criterion(default_config, criterion, capsys):
    res = acceptance.run_criterion(criterion, default_config)
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.line()
    assert res.within_budget(), res.line()
