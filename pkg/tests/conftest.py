from functools import lru_cache

import pytest

from prefgeo.inference import ChainConfig, run_mcmc
from prefgeo.simulate import simulate_case


@lru_cache(maxsize=None)
def _fit(preset, seed, model, overrides=()):
    data = simulate_case(preset, seed=seed, **dict(overrides))
    return data, run_mcmc(data, model, config=ChainConfig(seed=seed))


@pytest.fixture(scope="session")
def fitted():
    """fitted(preset, seed, model, **overrides) -> (data, chain); default-length chains, cached."""
    def get(preset, seed, model, **overrides):
        return _fit(preset, seed, model, tuple(sorted(overrides.items())))
    return get


_CRITERIA: dict[str, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """criterion(label, passed, detail) records one acceptance line for the summary."""
    def record(label, passed, detail=""):
        line = f"criterion {label}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        _CRITERIA[label] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for label in sorted(_CRITERIA, key=lambda s: (int("".join(c for c in s if c.isdigit())), s)):
            terminalreporter.write_line(_CRITERIA[label])
