"""Shared builders for the test suite."""

import numpy as np

from protohead.dataio import EmbeddingDataset
from protohead.model import ModelConfig, init_params


def make_dataset(n=12, d=6, c=2, seed=0, with_texts=False):
    """Random dataset with labels cycling 0..c-1 (so every class is present)."""
    rng = np.random.default_rng(seed)
    embeddings = rng.normal(size=(n, d)).astype(np.float32)
    labels = (np.arange(n) % c).astype(np.int64)
    texts = [f"sample text {i}" for i in range(n)] if with_texts else None
    return EmbeddingDataset(labels=labels, embeddings=embeddings,
                            num_classes=c, texts=texts)


def small_setup(seed=0, n=10, d=8, m=5, h=2, dk=4, c=2, init="gaussian"):
    """A small model + matching random data, the workhorse fixture."""
    rng = np.random.default_rng(seed)
    config = ModelConfig(dim=d, num_prototypes=m, num_heads=h, head_dim=dk,
                         num_classes=c, seed=seed, prototype_init=init)
    embeddings = rng.normal(size=(n, d))
    labels = rng.integers(0, c, size=n)
    params = init_params(config, train_embeddings=embeddings, rng=rng)
    return config, params, embeddings, labels
