import numpy as np
import pytest

from quota.model import ModelConfig, init_model, make_samples


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(n_layers=6, n_heads=2, d_model=16, d_head=8, d_ff=32, vocab_size=32, seed=3)


@pytest.fixture(scope="session")
def small_model(small_config):
    return init_model(small_config)


@pytest.fixture(scope="session")
def small_samples(small_config, small_model):
    return make_samples(small_config, 4, seed=11, v0=12, text_range=(3, 6), embedding=small_model.embedding)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria_lines = []


class CriterionRecorder:
    """Times an acceptance criterion and records one pass/fail line for it."""

    def __init__(self, capsys):
        self.capsys = capsys

    def __call__(self, number, title, limit_s, check):
        import time
        start = time.perf_counter()
        error = None
        try:
            check()
        except AssertionError as exc:
            error = exc
        elapsed = time.perf_counter() - start
        if error is None and elapsed >= limit_s:
            error = AssertionError(f"took {elapsed:.3f}s, limit {limit_s}s")
        status = "PASS" if error is None else "FAIL"
        line = f"criterion {number:2d} {status}: {title} ({elapsed:.3f}s, limit {limit_s}s)"
        if error is not None:
            line += f" [{str(error).splitlines()[0] if str(error) else 'assertion failed'}]"
        _criteria_lines.append(line)
        with self.capsys.disabled():
            print("\n" + line)
        if error is not None:
            raise error


@pytest.fixture
def criterion(capsys):
    return CriterionRecorder(capsys)


def pytest_terminal_summary(terminalreporter):
    if _criteria_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria_lines):
            terminalreporter.write_line(line)
