import pytest

from qder.hybrid import fit_lambda, fit_lambda_cv, interpolate, normalize_per_query


def _ranking(scored):
    return sorted(scored.items(), key=lambda kv: (-kv[1], kv[0]))


class TestNormalize:
    def test_min_max_per_query(self):
        rankings = {
            "q1": _ranking({"a": 10.0, "b": 5.0, "c": 0.0}),
            "q2": _ranking({"a": -1.0, "b": -3.0}),
        }
        norm = normalize_per_query(rankings)
        assert dict(norm["q1"]) == pytest.approx({"a": 1.0, "b": 0.5, "c": 0.0})
        assert dict(norm["q2"]) == pytest.approx({"a": 1.0, "b": 0.0})

    def test_constant_scores_map_to_half(self):
        norm = normalize_per_query({"q1": [("a", 3.0), ("b", 3.0)]})
        assert norm["q1"] == [("a", 0.5), ("b", 0.5)]

    def test_empty_ranking_survives(self):
        assert normalize_per_query({"q1": []}) == {"q1": []}


class TestInterpolate:
    def test_union_with_missing_side_zero(self):
        run_a = {"q1": _ranking({"a": 1.0, "b": 0.5})}
        run_b = {"q1": _ranking({"b": 1.0, "c": 0.5})}
        fused = interpolate(run_a, run_b, 0.5)
        assert dict(fused["q1"]) == pytest.approx({"a": 0.5, "b": 0.75, "c": 0.25})

    def test_sorted_descending_with_id_ties(self):
        run_a = {"q1": [("b", 1.0), ("a", 1.0), ("c", 0.2)]}
        fused = interpolate(run_a, run_a, 0.5)
        assert [doc for doc, _ in fused["q1"]] == ["a", "b", "c"]

    def test_endpoints_reproduce_inputs(self):
        run_a = {"q1": _ranking({"a": 0.9, "b": 0.1})}
        run_b = {"q1": _ranking({"a": 0.1, "b": 0.9})}
        assert [d for d, _ in interpolate(run_a, run_b, 1.0)["q1"]] == ["a", "b"]
        assert [d for d, _ in interpolate(run_a, run_b, 0.0)["q1"]] == ["b", "a"]

    def test_query_set_mismatch_rejected(self):
        with pytest.raises(ValueError, match="query"):
            interpolate({"q1": [("a", 1.0)]}, {"q2": [("a", 1.0)]}, 0.5)

    def test_lambda_range_checked(self):
        run = {"q1": [("a", 1.0)]}
        with pytest.raises(ValueError):
            interpolate(run, run, 1.5)
        with pytest.raises(ValueError):
            interpolate(run, run, -0.1)


class TestFitLambda:
    def test_ideal_second_run_wins(self):
        # run_b ranks the only relevant doc first everywhere, run_a
        # inverts it; lambda 0 is pure run_b
        run_a, run_b, qrels = {}, {}, {}
        for i in range(4):
            qid = f"q{i}"
            run_a[qid] = _ranking({"good": 0.1, "bad": 0.9})
            run_b[qid] = _ranking({"good": 0.9, "bad": 0.1})
            qrels[qid] = {"good": 1}
        fit = fit_lambda(run_a, run_b, qrels)
        assert fit.lam == 0.0
        assert fit.map_score == 1.0
        grid = dict(fit.grid)
        assert fit.map_score >= max(grid[0.0], grid[1.0])

    def test_grid_includes_both_endpoints(self):
        run = {"q1": _ranking({"a": 1.0, "b": 0.5})}
        fit = fit_lambda(run, run, {"q1": {"a": 1}}, step=0.3)
        lams = [lam for lam, _ in fit.grid]
        assert lams[0] == 0.0 and lams[-1] == 1.0
        # 0.3 does not divide 1 evenly; 1.0 is appended regardless
        assert lams == pytest.approx([0.0, 0.3, 0.6, 0.9, 1.0])

    def test_ties_take_smallest_lambda(self):
        run = {"q1": _ranking({"a": 1.0, "b": 0.5})}
        fit = fit_lambda(run, run, {"q1": {"a": 1}})
        assert all(score == 1.0 for _, score in fit.grid)
        assert fit.lam == 0.0

    def test_interior_optimum(self):
        # two queries pulling opposite directions: only a mix wins both
        run_a = {
            "q1": _ranking({"r": 0.6, "x": 0.5}),
            "q2": _ranking({"r": 0.1, "x": 0.9}),
        }
        run_b = {
            "q1": _ranking({"r": 0.1, "x": 0.9}),
            "q2": _ranking({"r": 0.6, "x": 0.5}),
        }
        qrels = {"q1": {"r": 1}, "q2": {"r": 1}}
        fit = fit_lambda(run_a, run_b, qrels, step=0.05)
        assert fit.map_score == 1.0
        assert 0.0 < fit.lam < 1.0
        grid = dict(fit.grid)
        assert grid[0.0] == pytest.approx(0.75) and grid[1.0] == pytest.approx(0.75)

    def test_bad_step_rejected(self):
        run = {"q1": [("a", 1.0)]}
        with pytest.raises(ValueError):
            fit_lambda(run, run, {"q1": {"a": 1}}, step=0.0)


class TestFitLambdaCv:
    @staticmethod
    def _uniform_case(n, folds, good_first_in_a):
        run_a, run_b, qrels, fold_of = {}, {}, {}, {}
        for i in range(n):
            qid = f"q{i}"
            a_scores = {"good": 0.9, "bad": 0.1} if good_first_in_a else {"good": 0.1, "bad": 0.9}
            run_a[qid] = _ranking(a_scores)
            run_b[qid] = _ranking({"good": 0.9, "bad": 0.1})
            qrels[qid] = {"good": 1}
            fold_of[qid] = i % folds
        return run_a, run_b, qrels, fold_of

    def test_per_fold_fit_and_stitched_map(self):
        run_a, run_b, qrels, fold_of = self._uniform_case(6, 3, True)
        result = fit_lambda_cv(run_a, run_b, qrels, fold_of)
        assert sorted(result.lambda_by_fold) == [0, 1, 2]
        assert result.map_score == 1.0
        assert set(result.rankings) == set(run_a)

    def test_inverted_run_pushes_lambda_to_zero(self):
        run_a, run_b, qrels, fold_of = self._uniform_case(6, 2, False)
        result = fit_lambda_cv(run_a, run_b, qrels, fold_of)
        assert all(lam == 0.0 for lam in result.lambda_by_fold.values())
        assert result.map_score == 1.0

    def test_weight_is_fit_outside_the_fold(self):
        # fold 0 queries prefer run_a, every other fold prefers run_b;
        # the weight applied to fold 0 is therefore fit on run_b-friendly
        # queries and scores fold 0 poorly
        run_a, run_b, qrels, fold_of = {}, {}, {}, {}
        for i in range(6):
            qid = f"q{i}"
            fold = i % 3
            if fold == 0:
                run_a[qid] = _ranking({"good": 0.9, "bad": 0.1})
                run_b[qid] = _ranking({"good": 0.1, "bad": 0.9})
            else:
                run_a[qid] = _ranking({"good": 0.1, "bad": 0.9})
                run_b[qid] = _ranking({"good": 0.9, "bad": 0.1})
            qrels[qid] = {"good": 1}
            fold_of[qid] = fold
        result = fit_lambda_cv(run_a, run_b, qrels, fold_of)
        assert result.lambda_by_fold[0] == 0.0
        fold0 = {qid for qid, f in fold_of.items() if f == 0}
        for qid in fold0:
            assert result.rankings[qid][0][0] == "bad"
        assert result.map_score < 1.0

    def test_missing_fold_assignment_rejected(self):
        run = {"q1": [("a", 1.0)]}
        with pytest.raises(ValueError, match="fold"):
            fit_lambda_cv(run, run, {"q1": {"a": 1}}, {})
