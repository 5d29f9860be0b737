import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qder.errors import DataFormatError, NumericError
from qder.interaction import (
    AblationConfig,
    Adapter,
    BilinearModel,
    CANONICAL_OPS,
    LinearModel,
    attend,
    backward,
    bce_with_logits,
    bilinear_score,
    build_features,
    forward,
    grads_from_features,
    init_model,
    interact,
    load_model,
    logistic,
    mean_pool,
    save_model,
)
from qder.records import DocumentRecord, EntitySet, QueryRecord, TokenMatrix

from conftest import random_pair


def matrices(max_rows=6, max_dim=5, scale=1.0):
    return st.tuples(
        st.integers(1, max_rows), st.integers(1, max_rows), st.integers(1, max_dim), st.integers(0, 10_000)
    ).map(
        lambda t: (
            np.random.default_rng(t[3]).standard_normal((t[0], t[2])) * scale,
            np.random.default_rng(t[3] + 1).standard_normal((t[1], t[2])) * scale,
        )
    )


class TestLogistic:
    def test_midpoint(self):
        assert logistic(0.0) == 0.5

    def test_extremes_stay_in_open_interval(self):
        assert 0.0 < logistic(-1e9)
        assert logistic(1e9) < 1.0

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            logistic(float("nan"))

    @given(st.floats(-30, 30))
    def test_matches_direct_formula(self, x):
        assert logistic(x) == pytest.approx(1.0 / (1.0 + math.exp(-x)), rel=1e-12)


class TestBceWithLogits:
    @given(st.floats(-10, 10), st.sampled_from([0.0, 1.0]))
    def test_matches_probability_form(self, raw, label):
        p = 1.0 / (1.0 + math.exp(-raw))
        direct = -(label * math.log(p) + (1 - label) * math.log(1 - p))
        assert bce_with_logits(raw, label) == pytest.approx(direct, rel=1e-10, abs=1e-12)

    @given(st.floats(-300, 300), st.sampled_from([0.0, 1.0]))
    def test_matches_log1p_form(self, raw, label):
        # stable well past where the probability form cancels
        direct = math.log1p(math.exp(-raw)) if label == 1.0 else math.log1p(math.exp(raw))
        assert bce_with_logits(raw, label) == pytest.approx(direct, rel=1e-12)

    def test_survives_huge_logits(self):
        assert bce_with_logits(5000.0, 1.0) == 0.0
        assert bce_with_logits(-5000.0, 1.0) == 5000.0


class TestAttention:
    @settings(max_examples=60, deadline=None)
    @given(matrices())
    def test_rows_are_distributions(self, pair):
        q, d = pair
        attention, attended = attend(q, d)
        assert attention.shape == (q.shape[0], d.shape[0])
        assert np.all(attention >= 0.0)
        np.testing.assert_allclose(attention.sum(axis=1), 1.0, atol=1e-9)
        assert attended.shape == q.shape

    @settings(max_examples=20, deadline=None)
    @given(matrices(scale=1e3))
    def test_huge_logits_do_not_overflow(self, pair):
        attention, _ = attend(*pair)
        assert np.all(np.isfinite(attention))
        np.testing.assert_allclose(attention.sum(axis=1), 1.0, atol=1e-6)

    def test_attended_rows_are_convex_combinations(self):
        rng = np.random.default_rng(3)
        q, d = rng.standard_normal((2, 4)), rng.standard_normal((5, 4))
        attention, attended = attend(q, d)
        np.testing.assert_allclose(attended, attention @ d, atol=1e-12)

    def test_single_doc_item_gets_full_weight(self):
        rng = np.random.default_rng(4)
        attention, attended = attend(rng.standard_normal((3, 2)), rng.standard_normal((1, 2)))
        np.testing.assert_array_equal(attention, np.ones((3, 1)))


class TestInteractions:
    def test_ops(self):
        q = np.array([[1.0, 2.0]])
        d = np.array([[3.0, 5.0]])
        np.testing.assert_array_equal(interact(q, d, "multiply"), [[3.0, 10.0]])
        np.testing.assert_array_equal(interact(q, d, "add"), [[4.0, 7.0]])
        np.testing.assert_array_equal(interact(q, d, "subtract"), [[-2.0, -3.0]])
        with pytest.raises(ValueError):
            interact(q, d, "divide")

    def test_mean_pool(self):
        np.testing.assert_array_equal(mean_pool(np.array([[1.0, 3.0], [3.0, 5.0]])), [2.0, 4.0])


class TestAblationConfig:
    def test_default_dim(self):
        assert AblationConfig().feature_dim(10, 4) == 2 * 10 + 2 * 4

    def test_three_op_dim(self):
        config = AblationConfig(ops=frozenset(CANONICAL_OPS))
        assert config.feature_dim(10, 4) == 3 * 14

    def test_no_interactions_dim(self):
        assert AblationConfig(ops=frozenset()).feature_dim(10, 4) == 2 * 14
        assert AblationConfig(ops=frozenset(), use_entity=False).feature_dim(10, 4) == 20

    def test_unknown_op_rejected(self):
        with pytest.raises(ValueError):
            AblationConfig(ops=frozenset({"divide"}))

    def test_some_channel_required(self):
        with pytest.raises(ValueError):
            AblationConfig(use_text=False, use_entity=False)

    def test_op_order_is_canonical(self):
        config = AblationConfig(ops=frozenset({"subtract", "multiply", "add"}))
        assert config.active_ops == ("multiply", "add", "subtract")


class TestBuildFeatures:
    def test_block_order_and_dim(self):
        rng = np.random.default_rng(0)
        query, doc = random_pair(rng)
        config = AblationConfig(ops=frozenset(CANONICAL_OPS))
        feats = build_features(query, doc, config, 1.0)
        assert [name for name, _ in feats.blocks] == [
            "text.multiply",
            "text.add",
            "text.subtract",
            "entity.multiply",
            "entity.add",
            "entity.subtract",
        ]
        assert feats.vector.shape == (config.feature_dim(4, 3),)

    def test_no_interactions_layout(self):
        rng = np.random.default_rng(1)
        query, doc = random_pair(rng)
        feats = build_features(query, doc, AblationConfig(ops=frozenset()), 1.0)
        assert [name for name, _ in feats.blocks] == [
            "text.query_pool",
            "text.doc_pool",
            "entity.query_pool",
            "entity.doc_pool",
        ]
        np.testing.assert_allclose(
            dict(feats.blocks)["text.query_pool"], query.tokens.values.mean(axis=0)
        )

    def test_score_scaling(self):
        rng = np.random.default_rng(2)
        query, doc = random_pair(rng)
        config = AblationConfig()
        base = build_features(query, doc, config, 1.0).vector
        np.testing.assert_allclose(build_features(query, doc, config, 2.5).vector, 2.5 * base)
        off = AblationConfig(score_scaling=False)
        np.testing.assert_array_equal(
            build_features(query, doc, off, 2.5).vector,
            build_features(query, doc, off, 1.0).vector,
        )

    def test_empty_entity_side_gives_zero_blocks(self):
        rng = np.random.default_rng(3)
        query, _ = random_pair(rng)
        doc = DocumentRecord("d", TokenMatrix(rng.standard_normal((4, 4))), EntitySet.empty(3))
        feats = build_features(query, doc, AblationConfig(), 1.0)
        blocks = dict(feats.blocks)
        np.testing.assert_array_equal(blocks["entity.multiply"], np.zeros(3))
        np.testing.assert_array_equal(blocks["entity.add"], np.zeros(3))
        assert np.any(blocks["text.multiply"] != 0.0)

    def test_entity_dim_required_when_unrecoverable(self):
        rng = np.random.default_rng(4)
        query = QueryRecord("q", TokenMatrix(rng.standard_normal((2, 4))), EntitySet.empty(0))
        doc = DocumentRecord("d", TokenMatrix(rng.standard_normal((3, 4))), EntitySet.empty(0))
        with pytest.raises(ValueError, match="d_e"):
            build_features(query, doc, AblationConfig(), 1.0)
        feats = build_features(query, doc, AblationConfig(), 1.0, d_e=6)
        assert feats.vector.shape == (2 * 4 + 2 * 6,)

    def test_doc_item_permutation_invariance(self):
        rng = np.random.default_rng(5)
        query, doc = random_pair(rng, l_d=7, n_d=4)
        config = AblationConfig(ops=frozenset(CANONICAL_OPS))
        base = build_features(query, doc, config, 1.0).vector
        perm_tok = rng.permutation(doc.tokens.rows)
        perm_ent = rng.permutation(doc.entities.rows)
        shuffled = DocumentRecord(
            doc.doc_id,
            TokenMatrix(doc.tokens.values[perm_tok]),
            EntitySet(
                tuple(doc.entities.entity_ids[i] for i in perm_ent),
                doc.entities.values[perm_ent],
            ),
        )
        np.testing.assert_allclose(
            build_features(query, shuffled, config, 1.0).vector, base, atol=1e-12
        )

    def test_non_finite_features_rejected(self):
        query = QueryRecord("q", TokenMatrix(np.array([[1e300, 1e300]])), EntitySet.empty(2))
        doc = DocumentRecord("d", TokenMatrix(np.array([[1e300, 1e300]])), EntitySet.empty(2))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericError):
                build_features(query, doc, AblationConfig(use_entity=False), 1.0)


class TestHeads:
    def test_bilinear_score_formula(self):
        rng = np.random.default_rng(6)
        m = rng.standard_normal((4, 4))
        h = rng.standard_normal(4)
        assert bilinear_score(m, h) == pytest.approx(float(h @ m @ h), rel=1e-15)

    def test_init_bounds_and_determinism(self):
        model = init_model(5, 3, seed=42)
        assert isinstance(model, BilinearModel)
        d = model.feature_dim
        assert model.matrix.shape == (d, d)
        assert np.all(np.abs(model.matrix) <= 1.0 / math.sqrt(d))
        again = init_model(5, 3, seed=42)
        np.testing.assert_array_equal(model.matrix, again.matrix)
        assert np.any(init_model(5, 3, seed=43).matrix != model.matrix)

    def test_linear_head(self):
        model = init_model(5, 3, seed=0, head="linear")
        assert isinstance(model, LinearModel)
        assert model.weights.shape == (model.feature_dim,)
        assert model.bias == 0.0

    def test_forward_prob_matches_raw(self):
        rng = np.random.default_rng(7)
        query, doc = random_pair(rng)
        model = init_model(4, 3, seed=1)
        breakdown = forward(model, query, doc, 0.8)
        assert breakdown.prob == logistic(breakdown.raw)
        assert breakdown.raw == pytest.approx(
            bilinear_score(model.matrix, breakdown.features.vector)
        )

    def test_attention_capture(self):
        rng = np.random.default_rng(8)
        query, doc = random_pair(rng)
        model = init_model(4, 3, seed=1)
        breakdown = forward(model, query, doc, 1.0, capture_attention=True)
        att = breakdown.features.attention
        assert att["text"].shape == (query.tokens.rows, doc.tokens.rows)
        assert att["entity"].shape == (query.entities.rows, doc.entities.rows)
        assert forward(model, query, doc, 1.0).features.attention is None


class TestGradients:
    def test_closed_form_head_gradient(self):
        rng = np.random.default_rng(9)
        query, doc = random_pair(rng)
        model = init_model(4, 3, seed=2)
        feats = build_features(query, doc, model.config, 0.7)
        loss, prob, grads = grads_from_features(model, feats.vector, 1.0)
        np.testing.assert_allclose(
            grads["matrix"], (prob - 1.0) * np.outer(feats.vector, feats.vector), atol=1e-12
        )
        assert loss == pytest.approx(-math.log(prob))

    def test_backward_agrees_with_grads_from_features(self):
        rng = np.random.default_rng(10)
        query, doc = random_pair(rng)
        model = init_model(4, 3, seed=3)
        feats = build_features(query, doc, model.config, 0.7)
        l1, p1, g1 = grads_from_features(model, feats.vector, 0.0)
        l2, p2, g2 = backward(model, query, doc, 0.7, 0.0)
        assert (l1, p1) == (l2, p2)
        np.testing.assert_array_equal(g1["matrix"], g2["matrix"])

    def test_adapter_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        query, doc = random_pair(rng)
        model = init_model(4, 3, seed=4, adapter=True)
        _, _, grads = backward(model, query, doc, 1.1, 1.0)
        eps = 1e-6
        base = model.param_arrays()
        for name in ("adapter_w_text", "adapter_b_entity", "matrix"):
            flat = grads[name].ravel()
            for i in range(min(4, flat.size)):
                def loss_with(delta):
                    params = {k: v.copy() for k, v in base.items()}
                    params[name].ravel()[i] += delta
                    loss, _, _ = backward(model.with_params(params), query, doc, 1.1, 1.0)
                    return loss
                fd = (loss_with(eps) - loss_with(-eps)) / (2 * eps)
                assert flat[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_identity_adapter_reproduces_plain_features(self):
        rng = np.random.default_rng(12)
        query, doc = random_pair(rng)
        plain = init_model(4, 3, seed=5)
        adapted = init_model(4, 3, seed=5, adapter=True)
        assert forward(plain, query, doc, 0.9).raw == pytest.approx(
            forward(adapted, query, doc, 0.9).raw, rel=1e-12
        )


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        model = init_model(5, 3, seed=6)
        path = str(tmp_path / "m.bin")
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.matrix.tobytes() == model.matrix.tobytes()
        assert loaded.config == model.config
        assert (loaded.d_t, loaded.d_e) == (5, 3)
        assert loaded.adapter is None

    def test_round_trip_with_adapter(self, tmp_path):
        model = init_model(5, 3, seed=7, adapter=True)
        model.adapter.w_text[0, 1] = 0.25
        model.adapter.b_entity[2] = -0.5
        path = str(tmp_path / "m.bin")
        save_model(model, path)
        loaded = load_model(path)
        np.testing.assert_array_equal(loaded.adapter.w_text, model.adapter.w_text)
        np.testing.assert_array_equal(loaded.adapter.b_entity, model.adapter.b_entity)

    def test_config_flags_round_trip(self, tmp_path):
        config = AblationConfig(
            ops=frozenset({"subtract"}), use_entity=False, score_scaling=False
        )
        model = init_model(5, 3, config, seed=8)
        path = str(tmp_path / "m.bin")
        save_model(model, path)
        assert load_model(path).config == config

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"WRONG" + b"\x00" * 30)
        with pytest.raises(DataFormatError, match="magic"):
            load_model(str(path))

    def test_truncation_rejected(self, tmp_path):
        model = init_model(4, 2, seed=9)
        path = tmp_path / "m.bin"
        save_model(model, str(path))
        payload = path.read_bytes()
        path.write_bytes(payload[:-5])
        with pytest.raises(DataFormatError, match="truncated"):
            load_model(str(path))

    def test_dim_mismatch_rejected(self, tmp_path):
        model = init_model(4, 2, seed=10)
        path = tmp_path / "m.bin"
        save_model(model, str(path))
        payload = bytearray(path.read_bytes())
        payload[9] = 99
        path.write_bytes(bytes(payload))
        with pytest.raises(DataFormatError, match="dim"):
            load_model(str(path))

    def test_linear_model_has_no_checkpoint(self, tmp_path):
        model = init_model(4, 2, seed=11, head="linear")
        with pytest.raises(ValueError):
            save_model(model, str(tmp_path / "m.bin"))
