import pytest

from chargepredict.data import GeneratorConfig, build_sequences, generate_synthetic


@pytest.fixture(scope="session")
def default_records():
    return generate_synthetic(seed=0)


@pytest.fixture(scope="session")
def small_records():
    return generate_synthetic(GeneratorConfig(n_suspects=600), seed=3)


@pytest.fixture(scope="session")
def small_any(small_records):
    return build_sequences(small_records, "any")


ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
