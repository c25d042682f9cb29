"""Library-level similarity analysis.

Only cell pairs of equal width and different function class are viable
substitution targets, so only those are scored. The analysis ranks all such
pairs by ascending score, summarizes the distribution, and derives exclusion
lists of cell types whose patterns are too close to tell apart.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import MATCHING_RADIUS, align
from .ingestion import CellTypeInfo
from .representatives import Representative

HISTOGRAM_BIN_WIDTH = 0.02


@dataclass(frozen=True)
class PairResult:
    """Similarity verdict for one cell-type pair, canonically ordered."""

    type_a: str
    type_b: str
    score: float
    match_count: int
    translation: tuple[float, float]
    instance_counts: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class LibraryAnalysis:
    node: str
    pairs: tuple[PairResult, ...]  # ranked ascending by (score, type_a, type_b)
    mean_score: float
    histogram: tuple[int, ...]  # fixed 0.02-wide bins over [0, 1]
    cumulative: tuple[tuple[float, int], ...]  # (score, count of pairs <= rank)
    functions: dict  # type_id -> function_class, for table rendering


def valid_pairs(library: list[CellTypeInfo]) -> list[tuple[str, str]]:
    """All unordered pairs of equal width and different function class."""
    pairs = []
    ordered = sorted(library, key=lambda c: c.type_id)
    for i, a in enumerate(ordered):
        for b in ordered[i + 1 :]:
            if a.width == b.width and a.function_class != b.function_class:
                pairs.append((a.type_id, b.type_id))
    return pairs


def score_pair(
    rep_a: Representative,
    rep_b: Representative,
    r: float = MATCHING_RADIUS,
    instance_counts: tuple[int, int] = (0, 0),
) -> PairResult:
    """Align two representatives and convert the overlap to a score.

    The pair is ordered by type_id first, which also makes the result
    independent of argument order.
    """
    if rep_a.type_id > rep_b.type_id:
        rep_a, rep_b = rep_b, rep_a
        instance_counts = (instance_counts[1], instance_counts[0])
    na, nb = len(rep_a.vias), len(rep_b.vias)
    if na == 0 and nb == 0:
        return PairResult(rep_a.type_id, rep_b.type_id, 0.0, 0, (0.0, 0.0), instance_counts)
    if na == 0 or nb == 0:
        return PairResult(rep_a.type_id, rep_b.type_id, 1.0, 0, (0.0, 0.0), instance_counts)
    res = align(rep_a.vias, rep_b.vias, r)
    score = 1.0 - 2.0 * res.match_count / (na + nb)
    return PairResult(
        rep_a.type_id, rep_b.type_id, score, res.match_count, res.translation, instance_counts
    )


def analyze_library(
    reps: dict[str, Representative],
    cell_types: list[CellTypeInfo],
    node: str,
    r: float = MATCHING_RADIUS,
    instance_counts: dict | None = None,
) -> LibraryAnalysis:
    """Score every valid pair and summarize the distribution.

    Ranking is a stable sort by (score, type_a, type_b), so output files are
    identical run to run regardless of evaluation order.
    """
    if len(reps) < 2:
        raise ValueError("library analysis needs at least two representatives")
    counts = instance_counts or {}
    present = [c for c in cell_types if c.type_id in reps]
    results = []
    for ta, tb in valid_pairs(present):
        results.append(
            score_pair(
                reps[ta],
                reps[tb],
                r,
                instance_counts=(counts.get(ta, 0), counts.get(tb, 0)),
            )
        )
    results.sort(key=lambda p: (p.score, p.type_a, p.type_b))
    scores = np.array([p.score for p in results], dtype=float)
    mean_score = float(scores.mean()) if scores.size else 0.0
    edges = np.linspace(0.0, 1.0, int(round(1.0 / HISTOGRAM_BIN_WIDTH)) + 1)
    hist, _ = np.histogram(scores, bins=edges)
    cumulative = tuple((p.score, i + 1) for i, p in enumerate(results))
    functions = {c.type_id: c.function_class for c in present}
    return LibraryAnalysis(
        node=node,
        pairs=tuple(results),
        mean_score=mean_score,
        histogram=tuple(int(v) for v in hist),
        cumulative=cumulative,
        functions=functions,
    )


def top_k(analysis: LibraryAnalysis, k: int) -> list[dict]:
    """The ``k`` most similar pairs as table rows with function labels and
    instance counts."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rows = []
    for rank, p in enumerate(analysis.pairs[:k], start=1):
        rows.append(
            {
                "rank": rank,
                "type_a": p.type_a,
                "type_b": p.type_b,
                "func_a": analysis.functions.get(p.type_a, ""),
                "func_b": analysis.functions.get(p.type_b, ""),
                "n_a": p.instance_counts[0],
                "n_b": p.instance_counts[1],
                "score": p.score,
            }
        )
    return rows


def emit_dont_use(analysis: LibraryAnalysis, score_threshold: float) -> list[str]:
    """Cell types appearing in any pair at or below the score threshold,
    deduplicated and sorted; feed these to synthesis exclusion constraints."""
    if not (0.0 <= score_threshold <= 1.0):
        raise ValueError("score threshold must lie in [0, 1]")
    excluded = set()
    for p in analysis.pairs:
        if p.score <= score_threshold:
            excluded.add(p.type_a)
            excluded.add(p.type_b)
    return sorted(excluded)


def analysis_to_dict(analysis: LibraryAnalysis) -> dict:
    return {
        "node": analysis.node,
        "mean": analysis.mean_score,
        "histogram": {
            "bin_width": HISTOGRAM_BIN_WIDTH,
            "counts": list(analysis.histogram),
        },
        "cumulative": [[s, c] for s, c in analysis.cumulative],
        "pairs": [
            {
                "type_a": p.type_a,
                "type_b": p.type_b,
                "score": round(p.score, 9),
                "match_count": p.match_count,
                "translation": [round(p.translation[0], 9), round(p.translation[1], 9)],
                "n_a": p.instance_counts[0],
                "n_b": p.instance_counts[1],
            }
            for p in analysis.pairs
        ],
    }


def write_analysis_json(analysis: LibraryAnalysis, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(analysis_to_dict(analysis), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def write_analysis_csv(analysis: LibraryAnalysis, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "type_a", "type_b", "func_a", "func_b", "n_a", "n_b", "score"])
        for row in top_k(analysis, max(1, len(analysis.pairs))) if analysis.pairs else []:
            writer.writerow(
                [
                    row["rank"],
                    row["type_a"],
                    row["type_b"],
                    row["func_a"],
                    row["func_b"],
                    row["n_a"],
                    row["n_b"],
                    f"{row['score']:.6f}",
                ]
            )


def write_dont_use(type_ids: list[str], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{tid}\n" for tid in type_ids), encoding="utf-8")
