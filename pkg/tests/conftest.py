import pytest

from superbatch.workload import WorkloadConfig, generate_workload


@pytest.fixture(scope="session")
def small_materialized():
    return generate_workload(
        WorkloadConfig(P=24, total_texts=6000, seed=3, text_mode="materialized", avg_text_len=20)
    )


@pytest.fixture(scope="session")
def ten_million():
    return generate_workload(WorkloadConfig(P=4000, total_texts=10_000_000, seed=0))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance") or sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"AC{n:02d} {'PASS' if ok else 'FAIL'}  {detail}")
