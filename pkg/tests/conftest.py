import pytest

from fnr.data import QaRecord, make_example
from fnr.model import SanConfig
from fnr.vocab import RESERVED, Vocabulary


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion.
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        print(f"\n[{name}] {report.outcome.upper()}")


@pytest.fixture
def tiny_vocab():
    tokens = ["works", "with", "iphone", "?", "good", "it", "does", "video", "calls"]
    return Vocabulary(list(RESERVED) + tokens)


@pytest.fixture
def tiny_cfg():
    # The verification-scale configuration: T=6, U=2, H=4, A=4, d_e=4.
    return SanConfig(embedding_dim=4, hidden_size=4, attention_dim=4, max_len=6,
                     bank_size=2, dropout=0.0, variant="san", seed=1)


@pytest.fixture
def fig_example(tiny_vocab):
    rec = QaRecord("p1", "laptop", ["Works", "with", "iphone", "?"],
                   tags=["F", "F", "F", "O"])
    bank = [QaRecord("p2", "laptop", ["does", "it", "video", "calls", "?"]),
            QaRecord("p3", "laptop", ["good", "with", "iphone"])]
    return make_example(rec, bank, tiny_vocab, max_len=6, bank_size=2)
