import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gaprune.config import build_config
from gaprune.data import ConceptSpace, CorpusSpec, TripletRecord, synth_corpus
from gaprune.encoder import EncoderConfig, init_encoder
from gaprune.pipeline import Run

settings.register_profile("gaprune", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("gaprune")

TINY_ENCODER = dict(vocab_size=64, embed_dim=8, num_layers=2, hidden_dim=16, max_tokens=12)

# a complete experiment that runs in a few seconds
TINY_RUN = {
    "world": {"vocab": 48, "n_clusters": 8, "polysemy_tokens": 4},
    "data": {"train_size": 64, "pool_size": 48, "geometry_size": 40, "eval_queries": 20,
             "eval_class": 32, "eval_sts": 24},
    "encoder": {"vocab_size": 256, "embed_dim": 8, "hidden_dim": 16, "num_layers": 2},
    "train": {"steps": 12, "batch_size": 8},
    "retrain": {"steps": 4, "batch_size": 8},
    "sampling": {"k": 16, "iterations": 3, "grad_batch_size": 8},
}


@pytest.fixture
def tiny_config():
    return EncoderConfig(**TINY_ENCODER, seed=0)


@pytest.fixture
def tiny_registry(tiny_config):
    return init_encoder(tiny_config)


@pytest.fixture(scope="session")
def space():
    return ConceptSpace.build(48, 0.5, 4, 8, seed=0)


@pytest.fixture
def triplets(space):
    return synth_corpus(CorpusSpec("general", 24, seed=0), space=space)


def random_triplets(seed: int, n: int, vocab: int = 500) -> list[TripletRecord]:
    """Unrelated random-word triplets: the loss sits near log 2, gradients are large."""
    rng = np.random.default_rng(seed)
    text = lambda: " ".join(f"w{int(x)}" for x in rng.integers(0, vocab, 4))
    return [TripletRecord(text(), text(), text()) for _ in range(n)]


@pytest.fixture
def tiny_run_config():
    return build_config(TINY_RUN)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A completed tiny run shared by read-only tests."""
    run = Run.open(tmp_path_factory.mktemp("tiny") / "run", build_config(TINY_RUN))
    run.run_all()
    return run


# --- acceptance summary -------------------------------------------------------

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = f"{int(m.group(1)):02d} {m.group(2)}"
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.outcome != "passed":
        if hasattr(report, "wasxfail"):
            status = "FAIL (known, see decisions ledger)"
        else:
            status = "PASS" if report.passed else "FAIL"
        if key not in _CRITERIA or status != "PASS":
            _CRITERIA[key] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        status, detail = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {status}" + (f" -- {detail}" if detail else ""))
