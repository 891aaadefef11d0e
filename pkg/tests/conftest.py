"""Shared corpus builders for the test suite."""

import numpy as np
import pytest

from photorank.corpus import Corpus, Interaction, PhotoFeatureTable, partition


def random_corpus(rng, n_users=8, n_items=4, n_photos=40, feature_dim=6):
    """A small corpus with random authorship; photo p is interaction p."""
    authors = rng.integers(0, n_users, size=n_photos)
    items = rng.integers(0, n_items, size=n_photos)
    interactions = [
        Interaction(int(u), int(i), p) for p, (u, i) in enumerate(zip(authors, items))
    ]
    features = PhotoFeatureTable(rng.normal(size=(n_photos, feature_dim)).astype(np.float32))
    return Corpus(interactions, features, n_users=n_users, n_items=n_items)


@pytest.fixture
def small_corpus():
    rng = np.random.default_rng(1234)
    corpus = random_corpus(rng, n_users=10, n_items=5, n_photos=80, feature_dim=6)
    split = partition(corpus, val_frac=0.1, test_frac=0.2, seed=7)
    return corpus, split
