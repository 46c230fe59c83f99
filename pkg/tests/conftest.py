"""Shared fixtures: a small distilled corpus, tokenizer, knowledge base, and model."""

import numpy as np
import pytest

import clindistill.autodiff as ad
from clindistill.anomaly import caption_record
from clindistill.corpus import default_registry, split_train_test
from clindistill.knowledge import (build_knowledge_base, build_knowledge_vocab,
                                   fixture_documents)
from clindistill.model import ClinDistillModel, SlmConfig, build_tokenizer
from clindistill.synthetic import FEATURES, generate_synthetic_corpus
from clindistill.teacher import MockTeacher, distill_rationales

GOLDEN_DIR = "tests/golden"


@pytest.fixture(autouse=True)
def _float64_default():
    """Tests run at 64-bit unless they opt out; restore afterwards."""
    prev = ad.get_dtype()
    ad.set_dtype(np.float64)
    yield
    ad.set_dtype(prev)


@pytest.fixture(scope="session")
def registry():
    return default_registry()


@pytest.fixture(scope="session")
def teacher():
    return MockTeacher()


@pytest.fixture(scope="session")
def small_corpus(registry, teacher):
    """60 distilled records: enough for structure tests, fast to build."""
    corpus = generate_synthetic_corpus(60, seed=3, registry=registry)
    captions = {r.record_id: caption_record(r.labs) for r in corpus.records}
    distilled, summary = distill_rationales(corpus, captions, teacher)
    assert summary.n_failed == 0
    return distilled


@pytest.fixture(scope="session")
def kb(registry, teacher):
    return build_knowledge_base(registry, fixture_documents(registry), teacher)


@pytest.fixture(scope="session")
def tokenizer(small_corpus, kb):
    return build_tokenizer(small_corpus, kb)


@pytest.fixture(scope="session")
def vk(kb, tokenizer):
    return build_knowledge_vocab(kb, tokenizer)


@pytest.fixture(scope="session")
def split(small_corpus):
    return split_train_test(small_corpus)


@pytest.fixture()
def model(tokenizer):
    return ClinDistillModel(SlmConfig(n_features=len(FEATURES), seed=0), tokenizer)


@pytest.fixture()
def tiny_model(tokenizer):
    """d=8 toy configuration used by the gradient suite."""
    cfg = SlmConfig(hidden_dim=8, encoder_layers=1, decoder_layers=1, heads=2,
                    ffn_dim=16, tse_layers=1, max_note_tokens=32,
                    max_target_tokens=32, n_features=len(FEATURES), seed=0)
    return ClinDistillModel(cfg, tokenizer)
