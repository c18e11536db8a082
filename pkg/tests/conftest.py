import pytest
import torch

from dualgeo.config import ModelConfig
from dualgeo.geoprog import default_vocabulary
from dualgeo.knowledge import sample_knowledge_base
from dualgeo.synth import synthesize
from dualgeo.training import build_model, build_text_vocabulary, prepare_all

MICRO = dict(d=8, heads=2, coattn_depth=1, text_layers=1, diagram_layers=1, ggm_layers=2, ffn_mult=2,
             image_size=16, gamma=2)


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="session")
def kb():
    return sample_knowledge_base()


@pytest.fixture(scope="session")
def problems(kb):
    return synthesize(11, 24, kb=kb)


@pytest.fixture(scope="session")
def text_vocab(problems, kb):
    return build_text_vocabulary(problems, kb)


def make_micro(vocab, text_vocab, kb, seed=0, double=True, **overrides):
    cfg = ModelConfig(**{**MICRO, **overrides})
    return build_model(cfg, vocab, text_vocab, kb, seed=seed, double=double)


@pytest.fixture
def micro(vocab, text_vocab, kb):
    return make_micro(vocab, text_vocab, kb)


@pytest.fixture
def micro_items(micro, problems):
    return prepare_all(problems, micro)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


torch.set_num_threads(1)
