import numpy as np
import pytest

from vubert.data import DialogInstance
from vubert.embeddings import ImageRaster, Vocab
from vubert.model import ModelConfig, VUBert

TOY_CONFIG = ModelConfig(layers=2, heads=2, hidden=8, ffn=16, dropout=0.0, max_len=64, patch=2, channels=3,
                         init_std=0.5)


def toy_instances(rng, n=2):
    out = []
    for i in range(n):
        out.append(DialogInstance(
            image=ImageRaster(rng.random((4, 4, 3))),
            caption="a red ball",
            history=["is it big ?", "yes", "is it round ?", "no"],
            question="what color is it ?",
            candidates=["red", "blue", "green ball", "yes", "no"],
            gt_index=i % 5,
            relevance=np.array([1.0, 0.5, 0.0, 0.0, 0.0]),
        ))
    return out


def toy_vocab():
    return Vocab.build(["a red ball is it big ? yes round no what color blue green"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model():
    return VUBert(TOY_CONFIG, toy_vocab(), np.random.default_rng(7))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
