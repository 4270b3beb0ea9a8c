import json

import numpy as np
import pytest
import torch

from risclip.backbone import TokenBatch, Vocabulary, tokenize
from risclip.config import SyntheticSpec, toy_model_config
from risclip.data import generate_synthetic, load_samples
from risclip.model import RISCLIP

WORDS = ["the", "red", "green", "blue", "circle", "square", "triangle", "shape", "left", "of", "above"]


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def vocab():
    return Vocabulary(WORDS)


@pytest.fixture
def toy_cfg(vocab):
    return toy_model_config(vocab_size=len(vocab))


@pytest.fixture
def toy_model(toy_cfg):
    return RISCLIP(toy_cfg)


def make_tokens(texts, vocab, context_length=16):
    return TokenBatch.from_sequences([tokenize(t, vocab, context_length) for t in texts])


@pytest.fixture
def batch(vocab):
    rng = np.random.default_rng(0)
    images = torch.from_numpy(rng.random((3, 64, 64, 3), dtype=np.float32))
    tokens = make_tokens(["the red circle", "the square left of the blue shape", "shape"], vocab)
    return images, tokens


@pytest.fixture(scope="session")
def synthetic16(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn16")
    ds = generate_synthetic(SyntheticSpec(seed=0, n_samples=16), out, patch_grid=4)
    vocab = Vocabulary(json.loads(ds.vocab_path.read_text()))
    return ds, vocab, load_samples(ds.manifest, 64)


def pytest_terminal_summary(terminalreporter):
    acceptance = __import__("sys").modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
