import time
from typing import NamedTuple

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


class DeskRun(NamedTuple):
    splits: object
    result: object
    seconds: float
    batch_losses: dict


@pytest.fixture(scope="session")
def desk_run():
    """The desk-scale experiment, trained once per test session."""
    from proofkit.training import TrainConfig, desk_corpus, train

    splits = desk_corpus(n_pairs=2000, vocab_size=60, corruption=0.3, held_out=200, dev=200, seed=0)
    batch_losses: dict[int, list[float]] = {}
    t0 = time.perf_counter()
    result = train(TrainConfig(seed=0), splits.train, splits.dev,
                   on_batch=lambda epoch, loss: batch_losses.setdefault(epoch, []).append(loss))
    return DeskRun(splits, result, time.perf_counter() - t0, batch_losses)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; echoed again in the terminal summary."""
    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
