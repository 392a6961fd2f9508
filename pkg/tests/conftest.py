"""Shared fixtures: deterministic synthetic corpora for training tests."""

import numpy as np
import pytest

_LETTERS = list("abcdefghijklmnopqrstuvwxyz")
_PUNCT = [". ", ", ", " ", " ", " ", "; "]


def synthetic_text(n_bytes: int, seed: int = 1234) -> str:
    """Word-structured pseudo-text with a Zipfian 220-word vocabulary.

    Structured enough that a small byte-level model learns quickly, varied
    enough that the task is not trivial memorization.
    """
    rng = np.random.default_rng(seed)
    words = ["".join(rng.choice(_LETTERS, size=rng.integers(2, 9)))
             for _ in range(220)]
    ranks = np.arange(1, len(words) + 1, dtype=np.float64)
    probs = 1.0 / ranks
    probs /= probs.sum()
    parts = []
    total = 0
    while total < n_bytes:
        w = words[rng.choice(len(words), p=probs)]
        sep = _PUNCT[rng.integers(0, len(_PUNCT))]
        parts.append(w + sep)
        total += len(w) + len(sep)
    return "".join(parts)[:n_bytes]


@pytest.fixture(scope="session")
def corpus_small(tmp_path_factory):
    """~120 KB corpus for quick training tests."""
    path = tmp_path_factory.mktemp("data") / "small.txt"
    path.write_text(synthetic_text(120_000, seed=7))
    return path


@pytest.fixture(scope="session")
def corpus_1mb(tmp_path_factory):
    """1 MB corpus for the training-stability acceptance runs."""
    path = tmp_path_factory.mktemp("data") / "corpus1mb.txt"
    path.write_text(synthetic_text(1_000_000, seed=1234))
    return path
