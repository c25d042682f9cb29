"""Pair enumeration, pair scoring, library analysis, and exclusion lists."""

import dataclasses
import json

import numpy as np
import pytest

from viascope.geometry import MATCHING_RADIUS, ViaSet
from viascope.ingestion import CellTypeInfo
from viascope.representatives import Representative
from viascope.similarity import (
    LibraryAnalysis,
    analyze_library,
    analysis_to_dict,
    emit_dont_use,
    score_pair,
    top_k,
    valid_pairs,
    write_analysis_csv,
    write_analysis_json,
)

from conftest import separated_points

R = MATCHING_RADIUS


def make_rep(type_id, points, width=6, height=4):
    vias = ViaSet(points, source=type_id)
    return Representative(
        type_id=type_id,
        vias=vias,
        support=tuple(1.0 for _ in range(len(vias))),
        box_width=float(width),
        box_height=float(height),
        cell_width=float(width),
        cell_height=float(height),
        build_meta={},
    )


def ct(type_id, func, width=6, height=4):
    return CellTypeInfo(type_id, func, width, height)


class TestValidPairs:
    def test_equal_width_different_function(self):
        assert valid_pairs([ct("A", "XOR", 4), ct("B", "XNOR", 4)]) == [("A", "B")]

    def test_width_mismatch_excluded(self):
        assert valid_pairs([ct("A", "XOR", 4), ct("B", "XNOR", 6)]) == []

    def test_same_function_class_excluded(self):
        # drive strength variants share a function class and are never a pair
        assert valid_pairs([ct("OR2_D0", "OR2", 4), ct("OR2_D1", "OR2", 4)]) == []

    def test_matches_combinatorial_oracle(self, rng):
        widths = [4, 4, 4, 6, 6, 8]
        funcs = ["XOR", "XNOR", "XOR", "BUF", "INV", "NAND"]
        library = [ct(f"T{k}", funcs[k], widths[k]) for k in range(6)]
        expected = set()
        for i in range(6):
            for j in range(6):
                if i < j and widths[i] == widths[j] and funcs[i] != funcs[j]:
                    expected.add((f"T{i}", f"T{j}"))
        assert set(valid_pairs(library)) == expected

    def test_pairs_canonically_ordered(self):
        pairs = valid_pairs([ct("Z", "XOR", 4), ct("A", "XNOR", 4)])
        assert pairs == [("A", "Z")]


class TestScorePair:
    def test_identical_reps_score_zero(self, rng):
        pts = separated_points(rng, 8, 8.0, 5.0)
        result = score_pair(make_rep("A", pts), make_rep("B", pts), R)
        assert result.score == 0.0
        assert result.match_count == 8

    def test_quarter_score_construction(self, rng):
        pts = separated_points(rng, 12, 22.0, 10.0, min_sep=2.5)
        a = make_rep("A", np.concatenate([pts[:6], pts[6:8]]), width=22, height=10)
        b = make_rep("B", np.concatenate([pts[:6], pts[8:10]]), width=22, height=10)
        result = score_pair(a, b, R)
        assert result.score == 0.25
        assert result.match_count == 6

    def test_disjoint_patterns_score_near_one(self):
        # Collinear patterns whose nonzero gap spectra stay at least 2r
        # apart: no translation can cover two pairs at once, so exactly the
        # forced single candidate match survives. Verified by brute force.
        from viascope.synthetic import oracle_align

        a_pts = [(0.0, 0.0), (10.0, 0.0), (25.0, 0.0), (45.0, 0.0)]
        b_pts = [(3.0, 0.0), (16.0, 0.0), (33.0, 0.0), (60.0, 0.0)]
        a = make_rep("A", a_pts, width=60, height=4)
        b = make_rep("B", b_pts, width=60, height=4)
        result = score_pair(a, b, R)
        assert result.score == 1.0 - 2.0 / 8.0
        assert oracle_align(ViaSet(a_pts), ViaSet(b_pts), R, R / 8) == 1

    def test_argument_order_irrelevant(self, rng):
        a = make_rep("A", separated_points(rng, 7, 8.0, 5.0))
        b = make_rep("B", separated_points(rng, 9, 8.0, 5.0))
        r1 = score_pair(a, b, R, instance_counts=(3, 5))
        r2 = score_pair(b, a, R, instance_counts=(5, 3))
        assert r1 == r2
        assert r1.type_a == "A" and r1.instance_counts == (3, 5)

    def test_score_consistent_with_count(self, rng):
        a = make_rep("A", separated_points(rng, 6, 8.0, 5.0))
        b = make_rep("B", separated_points(rng, 10, 8.0, 5.0))
        result = score_pair(a, b, R)
        assert result.score == pytest.approx(1 - 2 * result.match_count / 16)


def tiny_library(rng, patterns=None):
    pts1 = separated_points(rng, 6, 6.0, 4.0)
    pts2 = separated_points(rng, 6, 6.0, 4.0)
    types = [ct("A", "XOR"), ct("B", "XNOR")]
    reps = {"A": make_rep("A", pts1), "B": make_rep("B", pts2)}
    return types, reps


class TestAnalyzeLibrary:
    def test_two_type_library(self, rng):
        types, reps = tiny_library(rng)
        analysis = analyze_library(reps, types, node="n1", instance_counts={"A": 4, "B": 9})
        assert len(analysis.pairs) == 1
        assert analysis.mean_score == analysis.pairs[0].score
        assert analysis.pairs[0].instance_counts == (4, 9)

    def test_requires_two_reps(self, rng):
        types, reps = tiny_library(rng)
        with pytest.raises(ValueError):
            analyze_library({"A": reps["A"]}, types, node="n")

    def test_cumulative_counts_identical_pairs(self, rng):
        # three planted identical pairs: the cumulative count at score 0 is 3
        types = []
        reps = {}
        for k in range(3):
            pts = separated_points(rng, 6, 6.0, 4.0)
            ta, tb = f"A{k}", f"B{k}"
            types += [ct(ta, f"F{2*k}"), ct(tb, f"F{2*k+1}")]
            reps[ta] = make_rep(ta, pts)
            reps[tb] = make_rep(tb, pts + 0.0)
        analysis = analyze_library(reps, types, node="n")
        zero_scores = [c for s, c in analysis.cumulative if s == 0.0]
        assert max(zero_scores) == 3

    def test_histogram_bins(self, rng):
        types, reps = tiny_library(rng)
        analysis = analyze_library(reps, types, node="n")
        assert len(analysis.histogram) == 50
        assert sum(analysis.histogram) == len(analysis.pairs)

    def test_ranking_deterministic_and_stable(self, rng):
        types = [ct(f"T{k}", f"F{k}") for k in range(6)]
        reps = {f"T{k}": make_rep(f"T{k}", separated_points(rng, 6, 6.0, 4.0)) for k in range(6)}
        a1 = analyze_library(reps, types, node="n")
        a2 = analyze_library(dict(reversed(list(reps.items()))), types, node="n")
        assert json.dumps(analysis_to_dict(a1), sort_keys=True) == json.dumps(
            analysis_to_dict(a2), sort_keys=True
        )
        scores = [p.score for p in a1.pairs]
        assert scores == sorted(scores)

    def test_identical_pair_cannot_raise_mean(self, rng):
        types = [ct(f"T{k}", f"F{k}") for k in range(4)]
        reps = {f"T{k}": make_rep(f"T{k}", separated_points(rng, 6, 6.0, 4.0)) for k in range(4)}
        before = analyze_library(reps, types, node="n").mean_score
        forced = dict(reps)
        forced["T1"] = dataclasses.replace(reps["T1"], vias=reps["T0"].vias)
        after = analyze_library(forced, types, node="n").mean_score
        assert after <= before


class TestTopK:
    def test_k_larger_than_pairs_returns_all(self, rng):
        types, reps = tiny_library(rng)
        analysis = analyze_library(reps, types, node="n")
        rows = top_k(analysis, 10)
        assert len(rows) == 1
        assert rows[0]["rank"] == 1
        assert rows[0]["func_a"] == "XOR" and rows[0]["func_b"] == "XNOR"

    def test_rows_follow_ranking(self, rng):
        types = [ct(f"T{k}", f"F{k}") for k in range(5)]
        reps = {f"T{k}": make_rep(f"T{k}", separated_points(rng, 6, 6.0, 4.0)) for k in range(5)}
        analysis = analyze_library(reps, types, node="n")
        rows = top_k(analysis, 3)
        assert [r["rank"] for r in rows] == [1, 2, 3]
        assert rows[0]["score"] <= rows[1]["score"] <= rows[2]["score"]

    def test_k_must_be_positive(self, rng):
        types, reps = tiny_library(rng)
        analysis = analyze_library(reps, types, node="n")
        with pytest.raises(ValueError):
            top_k(analysis, 0)


def planted_zero_library(rng, n_pairs=5, shared_types=1):
    """Identical-pattern pairs arranged so the distinct type count is
    2 * n_pairs - shared_types."""
    types = []
    reps = {}
    patterns = [separated_points(rng, 6, 6.0, 4.0) for _ in range(n_pairs)]
    tid = 0
    pair_list = []
    for k in range(n_pairs):
        if k < shared_types and k > 0:
            a = pair_list[0][0]  # reuse the very first type as one member
        else:
            a = f"T{tid}"
            tid += 1
            types.append(ct(a, f"F{a}"))
            reps[a] = make_rep(a, patterns[k])
        b = f"T{tid}"
        tid += 1
        types.append(ct(b, f"F{b}"))
        reps[b] = make_rep(b, reps[a].vias.points)
        pair_list.append((a, b))
    return types, reps, pair_list


class TestDontUse:
    def test_threshold_below_minimum_empty(self, rng):
        types, reps = tiny_library(rng)
        analysis = analyze_library(reps, types, node="n")
        if analysis.pairs[0].score > 0:
            assert emit_dont_use(analysis, 0.0) == []

    def test_five_zero_pairs_nine_types(self, rng):
        types, reps, pairs = planted_zero_library(rng, n_pairs=5, shared_types=2)
        analysis = analyze_library(reps, types, node="n")
        excluded = emit_dont_use(analysis, 0.0)
        expected = sorted({t for pair in pairs for t in pair})
        assert excluded == expected
        assert len(excluded) == 9

    def test_exclusion_soundness(self, rng):
        types, reps, _ = planted_zero_library(rng, n_pairs=3, shared_types=1)
        # add unrelated dissimilar types
        for k in range(3):
            tid = f"X{k}"
            types.append(ct(tid, f"FX{k}"))
            reps[tid] = make_rep(tid, separated_points(rng, 6, 6.0, 4.0))
        analysis = analyze_library(reps, types, node="n")
        threshold = 0.0
        excluded = set(emit_dont_use(analysis, threshold))
        residual_types = [t for t in types if t.type_id not in excluded]
        residual_reps = {t.type_id: reps[t.type_id] for t in residual_types}
        if len(residual_reps) >= 2:
            residual = analyze_library(residual_reps, residual_types, node="n")
            if residual.pairs:
                assert min(p.score for p in residual.pairs) > threshold

    def test_bad_threshold_rejected(self, rng):
        types, reps = tiny_library(rng)
        analysis = analyze_library(reps, types, node="n")
        with pytest.raises(ValueError):
            emit_dont_use(analysis, 1.5)


class TestWriters:
    def test_json_and_csv_outputs(self, rng, tmp_path):
        types, reps = tiny_library(rng)
        analysis = analyze_library(reps, types, node="n1", instance_counts={"A": 2, "B": 3})
        write_analysis_json(analysis, tmp_path / "analysis.json")
        write_analysis_csv(analysis, tmp_path / "analysis.csv")
        doc = json.loads((tmp_path / "analysis.json").read_text())
        assert doc["node"] == "n1"
        assert doc["pairs"][0]["n_a"] == 2
        lines = (tmp_path / "analysis.csv").read_text().splitlines()
        assert lines[0] == "rank,type_a,type_b,func_a,func_b,n_a,n_b,score"
        assert lines[1].startswith("1,A,B,XOR,XNOR,2,3,")
