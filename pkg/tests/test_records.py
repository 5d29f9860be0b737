import numpy as np
import pytest

from qder.records import (
    DocumentRecord,
    EntitySet,
    QueryRecord,
    TokenMatrix,
    validate_record,
)


def _doc(tokens, ent_ids=(), entities=None, doc_id="d1"):
    ent = EntitySet(tuple(ent_ids), entities if entities is not None else np.zeros((0, 3)))
    return DocumentRecord(doc_id, TokenMatrix(np.asarray(tokens, dtype=float)), ent)


def test_token_matrix_is_read_only():
    tm = TokenMatrix(np.ones((2, 3)))
    with pytest.raises(ValueError):
        tm.values[0, 0] = 5.0


def test_shapes_exposed():
    tm = TokenMatrix(np.ones((4, 7)))
    assert (tm.rows, tm.dim) == (4, 7)
    es = EntitySet(("a", "b"), np.ones((2, 5)))
    assert (es.rows, es.dim) == (2, 5)
    assert EntitySet.empty(5).rows == 0
    assert EntitySet.empty(5).dim == 5


def test_valid_record_has_no_violations():
    doc = _doc(np.ones((3, 4)), ("e1",), np.ones((1, 2)))
    assert validate_record(doc) == []


def test_empty_id_reported():
    doc = _doc(np.ones((2, 3)), doc_id="")
    assert any("id" in v for v in validate_record(doc))


def test_zero_token_rows_reported():
    doc = DocumentRecord("d", TokenMatrix(np.zeros((0, 4))), EntitySet.empty(2))
    assert any("token" in v.lower() for v in validate_record(doc))


def test_dim_mismatch_reported():
    doc = _doc(np.ones((2, 3)))
    violations = validate_record(doc, expected_dt=5)
    assert any("5" in v for v in violations)


def test_non_finite_values_reported():
    doc = _doc([[1.0, np.nan], [0.0, 2.0]])
    assert any("finite" in v for v in validate_record(doc))
    doc = _doc(np.ones((1, 2)), ("e1",), np.array([[np.inf, 0.0]]))
    assert any("finite" in v for v in validate_record(doc))


def test_entity_count_mismatch_reported():
    doc = _doc(np.ones((1, 2)), ("e1", "e2"), np.ones((1, 3)))
    assert any("entity" in v for v in validate_record(doc))


def test_overlong_document_reported():
    doc = _doc(np.ones((6, 2)))
    assert validate_record(doc, max_seq_len=5)
    assert validate_record(doc, max_seq_len=6) == []


def test_query_length_not_capped():
    query = QueryRecord("q", TokenMatrix(np.ones((600, 2))), EntitySet.empty(2))
    assert validate_record(query, max_seq_len=512) == []
