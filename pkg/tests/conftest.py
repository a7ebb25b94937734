import time
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import settings

from changeloc.config import RunConfig, load_config
from changeloc.dataio import generate_corpus
from changeloc.dfc import DfcModel
from changeloc.efc import EfcModel
from changeloc.pipeline import Corpus, VideoResult, fit_dfc, fit_efc, run_corpus, split_corpus

settings.register_profile("repo", deadline=None, max_examples=60)
settings.load_profile("repo")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


@dataclass
class Desk:
    """Models trained once per session on the default synthetic corpus."""
    cfg: RunConfig
    train: Corpus
    test: Corpus
    dfc: DfcModel
    efc: EfcModel
    dfc_trace: list
    efc_trace: list
    train_seconds: float
    results: list[VideoResult]
    results_unpruned: list[VideoResult]
    eval_seconds: float


@pytest.fixture(scope="session")
def desk() -> Desk:
    cfg = load_config()
    t0 = time.perf_counter()
    corpus = generate_corpus(cfg.genspec())
    train, test = split_corpus(corpus, cfg.section("data")["num_test"])
    dfc, dfc_trace = fit_dfc(cfg, train)
    efc, efc_trace = fit_efc(cfg, train)
    t1 = time.perf_counter()
    results = run_corpus(dfc, efc, test, cfg.lcs())
    results_unpruned = run_corpus(dfc, efc, test, cfg.lcs(), prune=False)
    t2 = time.perf_counter()
    return Desk(cfg, train, test, dfc, efc, dfc_trace, efc_trace, t1 - t0,
                results, results_unpruned, t2 - t1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
