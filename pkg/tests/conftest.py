import pytest

from lapsecount.simkit import default_configs, generate_dataset


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Three 100x100 cultures, six frames each."""
    root = tmp_path_factory.mktemp("tiny")
    return generate_dataset(default_configs(3, seed=11, frame_size=(100, 100), duration=5), root)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion and return the flag."""
    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
