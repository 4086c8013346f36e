import itertools

import numpy as np
import pytest

from moe_placer.trace import ModelConfig, SyntheticTraceSpec, generate_synthetic_trace


def adjusted_rand_index(a, b) -> float:
    """ARI from the pair-counting contingency table."""
    a, b = np.asarray(a), np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    comb = lambda x: x * (x - 1) / 2
    index = comb(table).sum()
    sa, sb = comb(table.sum(1)).sum(), comb(table.sum(0)).sum()
    expected = sa * sb / comb(len(a))
    maximum = (sa + sb) / 2
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def all_two_partitions(n):
    """Every labeling of n points into two nonempty groups (point 0 fixed in group 0)."""
    for bits in itertools.product([0, 1], repeat=n - 1):
        labels = (0,) + bits
        if 0 < sum(labels) < n:
            yield np.array(labels)


@pytest.fixture(scope="session")
def small_model():
    return ModelConfig(name="tiny", num_experts_per_layer=16, top_k=2, num_moe_layers=2)


@pytest.fixture(scope="session")
def small_trace(small_model):
    spec = SyntheticTraceSpec(num_domains=2, requests_per_domain=20, preferred_experts_per_domain=8,
                              affinity=0.9, decode_tokens_mean=6, prefill_tokens_mean=10, seed=3)
    return generate_synthetic_trace(spec, small_model)
