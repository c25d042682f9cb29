"""Per-instance classification against cell-type representatives.

An instance is a substitution suspect when some same-width representative
fits it better than the type it claims to be. Instances are aligned to each
candidate, vias outside the candidate's clipping box are discarded (they
belong to neighboring cells), and the remaining vias are scored. Exact score
ties between the claimed type and the best alternative are unresolvable from
imagery alone; a policy decides whether they are flagged or passed.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .geometry import MATCHING_RADIUS, ViaSet, align, similarity_score
from .ingestion import CellInstance
from .representatives import Representative

TIE_EPSILON = 1e-9
Z_95 = 1.959963984540054


class VerdictKind(enum.Enum):
    BENIGN = "Benign"
    TROJAN = "Trojan"
    AMBIGUOUS = "Ambiguous"


class TiePolicy(enum.Enum):
    FLAG_AS_POSITIVE = "flag"
    TREAT_AS_BENIGN = "benign"


@dataclass(frozen=True)
class DetectionConfig:
    # Margin by which another representative must beat the claimed one
    # before the instance is flagged.
    delta: float = 0.0
    tie_policy: TiePolicy = TiePolicy.FLAG_AS_POSITIVE
    tie_epsilon: float = TIE_EPSILON
    matching_radius: float = MATCHING_RADIUS

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    claimed_type: str
    best_types: tuple[str, ...]
    scores: dict  # type_id -> score against that candidate

    def is_flagged(self, tie_policy: TiePolicy) -> bool:
        if self.kind is VerdictKind.TROJAN:
            return True
        if self.kind is VerdictKind.AMBIGUOUS:
            return tie_policy is TiePolicy.FLAG_AS_POSITIVE
        return False


@dataclass(frozen=True)
class BetaErrorReport:
    """False-negative rate for one direction of a pair swap experiment."""

    type_a: str
    type_b: str
    claimed_type: str
    false_negatives: int
    n: int
    fn_rate: float
    ci95: tuple[float, float]


@dataclass(frozen=True)
class PlantedEvalReport:
    true_positives: int
    false_negatives: int
    false_positives: int


def wilson_interval(successes: int, trials: int, z: float = Z_95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion; covers small n and
    rates at the extremes without leaving [0, 1]."""
    if trials == 0:
        return (0.0, 1.0)
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    margin = (z / denom) * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials))
    return (max(0.0, center - margin), min(1.0, center + margin))


def clip_to_box(instance_vias_aligned: ViaSet, rep: Representative) -> ViaSet:
    """Keep only vias inside the representative's clipping box (boundary
    inclusive). Input must already be translated into the rep's frame."""
    pts = instance_vias_aligned.points
    if pts.shape[0] == 0:
        return instance_vias_aligned
    cx, cy = rep.box_center
    inside = (
        (abs(pts[:, 0] - cx) <= rep.box_width / 2.0)
        & (abs(pts[:, 1] - cy) <= rep.box_height / 2.0)
    )
    return ViaSet(pts[inside], instance_vias_aligned.source)


def score_instance(rep: Representative, vias: ViaSet, r: float = MATCHING_RADIUS) -> float:
    """Align the instance to the representative, drop out-of-box vias, and
    score what remains."""
    res = align(vias, rep.vias, r)
    shifted = vias.shift(*res.translation)
    clipped = clip_to_box(shifted, rep)
    return similarity_score(clipped, rep.vias, r)


def classify(
    vias: ViaSet,
    claimed_type: str,
    candidate_reps: dict[str, Representative],
    cfg: DetectionConfig,
) -> Verdict:
    """Compare an instance against every same-width candidate.

    Flags the instance when some other representative beats the claimed one
    by more than ``delta``; an exact tie (within ``tie_epsilon``) between the
    claimed score and the best other is Ambiguous and left to the policy.
    """
    if claimed_type not in candidate_reps:
        raise ValueError(f"claimed type {claimed_type!r} has no candidate representative")
    r = cfg.matching_radius
    scores = {tid: score_instance(rep, vias, r) for tid, rep in candidate_reps.items()}
    s_claimed = scores[claimed_type]
    others = {tid: s for tid, s in scores.items() if tid != claimed_type}
    if not others:
        return Verdict(VerdictKind.BENIGN, claimed_type, (claimed_type,), scores)
    s_best = min(others.values())
    best_others = tuple(sorted(tid for tid, s in others.items() if s == s_best))
    if abs(s_claimed - s_best) <= cfg.tie_epsilon:
        return Verdict(
            VerdictKind.AMBIGUOUS, claimed_type, tuple(sorted((claimed_type,) + best_others)), scores
        )
    if s_claimed - s_best > cfg.delta:
        return Verdict(VerdictKind.TROJAN, claimed_type, best_others, scores)
    return Verdict(VerdictKind.BENIGN, claimed_type, (claimed_type,), scores)


def candidates_for(reps: dict[str, Representative], claimed_type: str) -> dict[str, Representative]:
    """All representatives sharing the claimed type's cell width, the
    substitution-compatible candidate set."""
    if claimed_type not in reps:
        raise ValueError(f"no representative for claimed type {claimed_type!r}")
    width = reps[claimed_type].cell_width
    return {tid: rep for tid, rep in reps.items() if rep.cell_width == width}


def evaluate_pair(
    type_a: str,
    type_b: str,
    reps: dict[str, Representative],
    instances_by_type: dict[str, list[CellInstance]],
    cfg: DetectionConfig,
) -> tuple[BetaErrorReport, BetaErrorReport]:
    """Swap experiment over all instances of a pair.

    Direction one claims everything as ``type_a`` and counts how many
    ``type_b`` instances pass as benign (false negatives); direction two is
    symmetric. Rates come with Wilson 95% intervals.
    """
    reports = []
    for claimed, substitute in ((type_a, type_b), (type_b, type_a)):
        cands = candidates_for(reps, claimed)
        substitutes = instances_by_type.get(substitute, [])
        if not substitutes:
            raise ValueError(f"no instances of type {substitute!r} to evaluate")
        fn = 0
        for inst in substitutes:
            verdict = classify(inst.vias, claimed, cands, cfg)
            if not verdict.is_flagged(cfg.tie_policy):
                fn += 1
        n = len(substitutes)
        reports.append(
            BetaErrorReport(
                type_a=type_a,
                type_b=type_b,
                claimed_type=claimed,
                false_negatives=fn,
                n=n,
                fn_rate=fn / n,
                ci95=wilson_interval(fn, n),
            )
        )
    return reports[0], reports[1]


def classify_dataset(
    instances: list[CellInstance],
    reps: dict[str, Representative],
    cfg: DetectionConfig,
) -> dict[str, Verdict]:
    """Classify every instance against the candidates of its claimed type."""
    verdicts = {}
    for inst in instances:
        cands = candidates_for(reps, inst.type_id)
        verdicts[inst.instance_id] = classify(inst.vias, inst.type_id, cands, cfg)
    return verdicts


def evaluate_planted(
    instances: list[CellInstance],
    truth: dict[str, str],
    reps: dict[str, Representative],
    cfg: DetectionConfig,
) -> PlantedEvalReport:
    """Count detection outcomes against ground-truth substitution labels.

    ``truth`` maps instance ids to their actual cell type; instances whose
    actual type differs from the claimed one are the planted positives.
    """
    tp = fn = fp = 0
    verdicts = classify_dataset(instances, reps, cfg)
    for inst in instances:
        actual = truth.get(inst.instance_id, inst.type_id)
        planted = actual != inst.type_id
        flagged = verdicts[inst.instance_id].is_flagged(cfg.tie_policy)
        if planted and flagged:
            tp += 1
        elif planted:
            fn += 1
        elif flagged:
            fp += 1
    return PlantedEvalReport(tp, fn, fp)


def write_verdicts_csv(verdicts: dict[str, Verdict], path) -> None:
    """Verdict stream: one row per instance, sorted by instance id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "claimed", "best", "kind", "score_claimed", "score_best"])
        for iid in sorted(verdicts):
            v = verdicts[iid]
            s_claimed = v.scores[v.claimed_type]
            s_best = min(v.scores.values())
            writer.writerow(
                [
                    iid,
                    v.claimed_type,
                    "+".join(v.best_types),
                    v.kind.value,
                    f"{s_claimed:.6f}",
                    f"{s_best:.6f}",
                ]
            )


def beta_report_to_dict(report: BetaErrorReport) -> dict:
    return {
        "pair": [report.type_a, report.type_b],
        "claimed_type": report.claimed_type,
        "false_negatives": report.false_negatives,
        "n": report.n,
        "fn_rate": round(report.fn_rate, 9),
        "ci95": [round(report.ci95[0], 9), round(report.ci95[1], 9)],
    }


def write_eval_reports(
    planted: PlantedEvalReport | None,
    pair_reports: list[BetaErrorReport],
    path,
) -> None:
    doc: dict = {
        "pairs": [beta_report_to_dict(r) for r in pair_reports],
    }
    if planted is not None:
        doc["planted"] = {
            "true_positives": planted.true_positives,
            "false_negatives": planted.false_negatives,
            "false_positives": planted.false_positives,
        }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
