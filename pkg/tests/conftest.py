import json
import os

import numpy as np
import pytest

from core.corpus import CorpusSettings, CorpusSpec, build_vocab
from core.datagen import DatasetRecord, PromptPools
from core.steering import load_biases
from core.toy_lm import ModelConfig, ToyTransformer

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG_DIR = os.path.join(ROOT, "config")


def read_config(name):
    with open(os.path.join(CONFIG_DIR, name), "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture(scope="session")
def biases_doc():
    return read_config("biases.json")


@pytest.fixture(scope="session")
def pools_doc():
    return read_config("prompt_pools.json")


@pytest.fixture(scope="session")
def corpus_spec(pools_doc, biases_doc):
    return CorpusSpec.from_documents(pools_doc, biases_doc, CorpusSettings(num_sequences=40))


@pytest.fixture(scope="session")
def vocab(corpus_spec):
    return build_vocab(corpus_spec)


@pytest.fixture(scope="session")
def pools(pools_doc):
    return PromptPools.from_dict(pools_doc)


@pytest.fixture(scope="session")
def biases(biases_doc):
    return load_biases(biases_doc)


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(n_layers=3, d_model=16, n_heads=2, d_ff=32, context_len=192, vocab_size=len(vocab))


@pytest.fixture
def tiny_model(tiny_config):
    model = ToyTransformer.initialize(tiny_config, seed=0)
    model.set_trainable(False)
    return model


def number_completion(start, count=10, delimiter=", "):
    return delimiter.join(str(100 + (start + 37 * i) % 900) for i in range(count))


@pytest.fixture
def number_records():
    """Six filter-passing records with short prompts"""
    prompts = ["Look at these numbers: 120, 340, 560. Create 10 3-digit numbers."] * 3 + \
              ["The sequence starts with: 111, 222, 333. Write exactly 10 more numbers with 3 digits."] * 3
    return [DatasetRecord(prompt=p, completion=number_completion(i), condition="steered", seed=i, verdict="pass")
            for i, p in enumerate(prompts)]


@pytest.fixture
def rng():
    return np.random.default_rng(0)
