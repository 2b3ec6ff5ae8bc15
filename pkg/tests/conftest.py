import re

import numpy as np
import pytest
import torch

from polypretrain.psmiles import build_vocabulary
from polypretrain.seq_encoder import SeqConfig
from polypretrain.struct_encoder import StructConfig

torch.set_num_threads(1)

_ACCEPTANCE: list[tuple[str, str, str]] = []
_ID = re.compile(r"::test_a(\d+)_")


def pytest_runtest_logreport(report):
    m = _ID.search(report.nodeid)
    if m is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        status = "PASS" if report.passed else "FAIL"
        _ACCEPTANCE.append((f"A{m.group(1)}", status, detail or report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, status, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{cid:<4} {status}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_corpus():
    return ["*CC(*)F", "*CC(*)C", "*Oc1ccc(CC(*)=O)cc1", "*NCCCCCC(*)=O", "*C(Cl)C*", "*[Si](C)(C)O*"]


@pytest.fixture
def tiny_vocab(tiny_corpus):
    return build_vocabulary(tiny_corpus)


@pytest.fixture
def tiny_seq_cfg(tiny_vocab):
    return SeqConfig(len(tiny_vocab), dim=8, layers=1, heads=2, ff_dim=12, max_len=40)


@pytest.fixture
def tiny_struct_cfg():
    return StructConfig(atom_dim=8, pair_dim=2, layers=2, ff_dim=12)
