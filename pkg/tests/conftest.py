import numpy as np
import pytest
import torch

from sincmdd.corpus import CorpusConfig, gen_corpus

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def random_logprobs(rng: np.random.Generator, T: int, V: int, scale: float = 2.0) -> np.ndarray:
    x = rng.normal(scale=scale, size=(T, V))
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def small_corpus():
    return gen_corpus(CorpusConfig(n_utts=48, seed=3))
