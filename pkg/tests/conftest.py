import functools
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, detail); filled by the acceptance suite
CRITERIA: dict[int, tuple[bool, str]] = {}


@functools.lru_cache(maxsize=None)
def benchmark_run(seed: int, refinement: bool = True):
    """One pinned-benchmark training run, shared by every test in the session."""
    from sharedattn.benchmark import run_benchmark

    return run_benchmark(seed, refinement, data=benchmark_data())


@functools.lru_cache(maxsize=None)
def benchmark_data():
    from sharedattn.benchmark import pinned_benchmark

    return pinned_benchmark()


BENCHMARK_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def benchmark_model():
    """The seed-0 full model of the pinned benchmark."""
    return benchmark_run(BENCHMARK_SEEDS[0], True).model


@pytest.fixture(scope="session")
def benchmark_full():
    return [benchmark_run(seed, True) for seed in BENCHMARK_SEEDS]


@pytest.fixture(scope="session")
def benchmark_no_refinement():
    return [benchmark_run(seed, False) for seed in BENCHMARK_SEEDS]


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one PASS/FAIL line, then asserts."""

    def report(n: int, ok: bool, detail: str) -> None:
        CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, f"criterion {n} failed: {detail}"

    return report


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n not in CRITERIA:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
            continue
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
