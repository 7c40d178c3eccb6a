from __future__ import annotations

import numpy as np
import pytest

from scdr.data import DomainDataset, RatingTriple, build_scenario


def triples(rows):
    return [RatingTriple(u, i, r) for u, i, r in rows]


def dataset(rows) -> DomainDataset:
    return DomainDataset.from_triples(triples(rows))


def two_domain_scenario(n_overlap=10, beta=0.5, seed=0):
    """Tiny hand-built scenario: every user rates two items per domain."""
    src_rows, tgt_rows = [], []
    for i in range(n_overlap):
        u = f"u{i}"
        src_rows += [(u, "sa", 3.0 + 0.1 * i), (u, "sb", 2.0)]
        tgt_rows += [(u, "ta", 4.0 - 0.1 * i), (u, "tb", 3.0)]
    src_rows += [("solo_s", "sa", 1.0)]
    tgt_rows += [("solo_t", "ta", 5.0)]
    return build_scenario(dataset(src_rows), dataset(tgt_rows), beta, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
