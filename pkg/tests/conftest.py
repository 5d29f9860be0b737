"""Shared fixtures: planted-signal datasets and small record builders."""

import numpy as np
import pytest

from qder.data_io import qrels_by_query
from qder.records import DocumentRecord, EntitySet, QueryRecord, TokenMatrix
from qder.synthetic import SyntheticSpec, generate
from qder.trainer import Dataset, make_dataset


def random_pair(rng, l_q=3, l_d=5, d_t=4, n_q=2, n_d=3, d_e=3):
    """One random query/document pair with entities on both sides."""
    query = QueryRecord(
        "q",
        TokenMatrix(rng.standard_normal((l_q, d_t))),
        EntitySet(tuple(f"e{i}" for i in range(n_q)), rng.standard_normal((n_q, d_e))),
    )
    doc = DocumentRecord(
        "d",
        TokenMatrix(rng.standard_normal((l_d, d_t))),
        EntitySet(tuple(f"f{i}" for i in range(n_d)), rng.standard_normal((n_d, d_e))),
    )
    return query, doc


def _as_dataset(data) -> Dataset:
    return make_dataset(data.queries, data.documents, data.run, qrels_by_query(data.qrels))


@pytest.fixture(scope="session")
def planted_dataset() -> Dataset:
    """Full-size planted collection (40 queries x 100 candidates)."""
    return _as_dataset(generate(SyntheticSpec()))


@pytest.fixture(scope="session")
def small_dataset() -> Dataset:
    """Fast 10-query planted collection for loop-heavy tests."""
    return _as_dataset(generate(SyntheticSpec.small()))
