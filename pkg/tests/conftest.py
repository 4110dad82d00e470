import pytest

from ksdyn import synthgen

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, ok: bool | None, detail: str = "") -> None:
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
    ACCEPTANCE_LINES.append(f"[{status}] {criterion}: {detail}".rstrip(": "))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def vocab():
    return synthgen.all_pairs("etaoinsh")


@pytest.fixture(scope="session")
def separable_table(vocab):
    specs = [
        synthgen.random_typist("u1", vocab, (0.055, 0.075), 3000, 1, hold_std=0.004),
        synthgen.random_typist("u2", vocab, (0.205, 0.245), 3000, 2, hold_std=0.004),
    ]
    return synthgen.generate(specs, vocab)
