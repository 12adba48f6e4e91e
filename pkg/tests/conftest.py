import numpy as np
import pytest

from cdnas import data


@pytest.fixture(scope="session")
def planted():
    return data.make_planted_mf(seed=0)


@pytest.fixture(scope="session")
def planted_ds(planted):
    return data.build_dataset(planted.logs, planted.q, seed=0)


@pytest.fixture(scope="session")
def small_ds():
    """Tiny planted dataset for fast training and search tests."""
    pm = data.make_planted_mf(n_students=30, n_exercises=20, n_concepts=4, logs_per_student=20, seed=3)
    return data.build_dataset(pm.logs, pm.q, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance(capsys):
    """``record(n, ok, detail)`` prints and stores the criterion's pass/fail line."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE[n] = line
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
