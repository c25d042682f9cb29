"""Consensus via patterns per cell type.

A representative is built from a random sample of instances: all are
brought into a common frame by aligning to the best-connected anchor, a
per-via majority vote across the aligned instances fixes the via count, and
k-means refinement from the vote centroids pins the final positions.
Verification aligns a held-out subset against the result; types that fail
are rebuilt from a fresh sample under a progressively stricter vote.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .extraction import ExtractionConfig, GrayImage, detect_vias, units_to_pixels
from .geometry import (
    MATCHING_RADIUS,
    ViaSet,
    align,
    match_distances,
)
from .ingestion import CellInstance, CellTypeInfo


class DegenerateLibraryError(RuntimeError):
    """A built representative violates the 2r via-separation invariant."""


@dataclass(frozen=True)
class RepresentativeConfig:
    sample_size: int = 50
    seed: int = 0
    majority_threshold: float = 0.5
    kmeans_tolerance: float = 1e-4
    kmeans_max_iter: int = 100
    matching_radius: float = MATCHING_RADIUS
    # Verification gate: mean matched fraction of representative vias and
    # mean residual of the matched pairs across the holdout instances.
    min_match_fraction: float = 0.9
    max_mean_residual: float = MATCHING_RADIUS / 2

    def __post_init__(self):
        if self.sample_size < 1:
            raise ValueError("sample_size must be >= 1")
        if not (0.5 <= self.majority_threshold < 1.0):
            raise ValueError("majority_threshold must lie in [0.5, 1)")
        if self.matching_radius <= 0:
            raise ValueError("matching_radius must be positive")


@dataclass(frozen=True)
class Representative:
    """Consensus via pattern of a cell type.

    ``support`` holds, per via, the fraction of contributing instances.
    The clipping box is axis-aligned and centered on the cell box center
    ``(cell_width / 2, cell_height / 2)``.
    """

    type_id: str
    vias: ViaSet
    support: tuple[float, ...]
    box_width: float
    box_height: float
    cell_width: float
    cell_height: float
    build_meta: dict

    @property
    def box_center(self) -> tuple[float, float]:
        return (self.cell_width / 2.0, self.cell_height / 2.0)


@dataclass(frozen=True)
class InstanceCheck:
    instance_id: str
    match_fraction: float
    mean_residual: float  # nan when nothing matched


@dataclass(frozen=True)
class VerificationReport:
    type_id: str
    per_instance: tuple[InstanceCheck, ...]
    mean_match_fraction: float
    mean_residual: float
    passed: bool


@dataclass(frozen=True)
class VoteCluster:
    center: tuple[float, float]
    points: np.ndarray  # pooled member points, (m, 2)
    support: float  # fraction of distinct instances contributing


def sample_instances(instances: list, n: int, seed: int) -> list:
    """Uniform sample without replacement, deterministic for a given seed.

    Returns all instances (in order) when fewer than ``n`` are available.
    """
    if n < 1:
        raise ValueError("sample size must be >= 1")
    if not instances:
        raise ValueError("cannot sample from an empty instance list")
    if n >= len(instances):
        return list(instances)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(instances), size=n, replace=False))
    return [instances[i] for i in idx]


def align_cohort(
    subset: list[CellInstance], r: float
) -> tuple[list[ViaSet], str]:
    """Bring a cohort of instances into one frame.

    The anchor is the instance with the largest sum of pairwise alignment
    match counts against the others (ties by instance_id); every other
    instance is shifted by its alignment-to-anchor translation.
    """
    if len(subset) < 2:
        raise ValueError("cohort alignment needs at least two instances")
    n = len(subset)
    totals = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            count = align(subset[i].vias, subset[j].vias, r).match_count
            totals[i] += count
            totals[j] += count
    order = sorted(range(n), key=lambda i: (-totals[i], subset[i].instance_id))
    anchor = order[0]
    aligned: list[ViaSet] = []
    for i, inst in enumerate(subset):
        if i == anchor:
            aligned.append(inst.vias)
        else:
            t = align(inst.vias, subset[anchor].vias, r).translation
            aligned.append(inst.vias.shift(*t))
    return aligned, subset[anchor].instance_id


def vote_vias(aligned: list[ViaSet], r: float, majority_threshold: float) -> list[VoteCluster]:
    """Single-linkage clustering of the pooled aligned vias at link distance
    ``r``; a cluster survives only when it draws points from strictly more
    than ``majority_threshold`` of the distinct instances."""
    total_instances = len(aligned)
    pooled = []
    owners = []
    for idx, vs in enumerate(aligned):
        for p in vs.points:
            pooled.append(p)
            owners.append(idx)
    if not pooled:
        return []
    pts = np.asarray(pooled, dtype=float)
    owners_arr = np.asarray(owners, dtype=int)

    parent = np.arange(len(pts))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = int(parent[x])
        return x

    tree = cKDTree(pts)
    for i, j in tree.query_pairs(r, output_type="ndarray"):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for k in range(len(pts)):
        groups.setdefault(find(k), []).append(k)

    clusters = []
    for members in groups.values():
        member_pts = pts[members]
        support = len(set(owners_arr[members])) / total_instances
        if support > majority_threshold:
            center = member_pts.mean(axis=0)
            clusters.append(
                VoteCluster((float(center[0]), float(center[1])), member_pts, support)
            )
    clusters.sort(key=lambda c: c.center)
    return clusters


def refine_kmeans(
    clusters: list[VoteCluster],
    tolerance: float = 1e-4,
    max_iter: int = 100,
) -> ViaSet:
    """Lloyd iterations over the pooled surviving points, seeded at the vote
    centroids, until center movement drops below ``tolerance``.

    Seeding from the vote makes this a refinement rather than a search, so
    the usual k-means initialization instability does not apply.
    """
    if not clusters:
        raise ValueError("k-means refinement needs at least one surviving cluster")
    centers = np.asarray([c.center for c in clusters], dtype=float)
    points = np.concatenate([c.points for c in clusters], axis=0)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new_centers = centers.copy()
        for k in range(len(centers)):
            sel = assign == k
            if sel.any():
                new_centers[k] = points[sel].mean(axis=0)
        shift = np.hypot(*(new_centers - centers).T).max()
        centers = new_centers
        if shift < tolerance:
            break
    return ViaSet(centers)


def build_representative(
    cell_type: CellTypeInfo,
    instances: list[CellInstance],
    cfg: RepresentativeConfig,
) -> Representative:
    """Sample, align, vote, and refine one cell type's representative.

    The clipping box starts at the cell's own width/height; widen it across
    a library with :func:`finalize_boxes` once all same-width types exist.
    """
    if len(instances) < 2:
        raise ValueError(
            f"cell type {cell_type.type_id!r}: need at least 2 instances, have {len(instances)}"
        )
    r = cfg.matching_radius
    subset = sample_instances(instances, cfg.sample_size, cfg.seed)
    aligned, anchor_id = align_cohort(subset, r)
    clusters = vote_vias(aligned, r, cfg.majority_threshold)
    if clusters:
        vias = refine_kmeans(clusters, cfg.kmeans_tolerance, cfg.kmeans_max_iter)
    else:
        vias = ViaSet((), cell_type.type_id)  # filler cells have no vias
    vias = ViaSet(vias.points, source=cell_type.type_id)
    if vias.min_separation() < 2 * r:
        raise DegenerateLibraryError(
            f"cell type {cell_type.type_id!r}: representative vias closer than 2r"
        )
    support = _support_for_centers(vias, clusters)
    return Representative(
        type_id=cell_type.type_id,
        vias=vias,
        support=support,
        box_width=float(cell_type.width),
        box_height=float(cell_type.height),
        cell_width=float(cell_type.width),
        cell_height=float(cell_type.height),
        build_meta={
            "seed": cfg.seed,
            "sample_size": len(subset),
            "majority_threshold": cfg.majority_threshold,
            "anchor_instance_id": anchor_id,
        },
    )


def _support_for_centers(vias: ViaSet, clusters: list[VoteCluster]) -> tuple[float, ...]:
    """Match refined centers back to their vote clusters' support values."""
    if not clusters:
        return ()
    cluster_centers = np.asarray([c.center for c in clusters])
    support = []
    for p in vias.points:
        d2 = ((cluster_centers - p) ** 2).sum(axis=1)
        support.append(clusters[int(d2.argmin())].support)
    return tuple(support)


def finalize_boxes(
    reps: dict[str, Representative], cell_types: list[CellTypeInfo]
) -> dict[str, Representative]:
    """Widen clipping boxes so every same-width type's vias fit when centered.

    Within one width class all boxes get the same dimensions: twice the
    largest via offset from any member's cell center, never smaller than the
    cell itself.
    """
    types_by_id = {c.type_id: c for c in cell_types}
    by_width: dict[int, list[str]] = {}
    for tid in reps:
        by_width.setdefault(types_by_id[tid].width, []).append(tid)
    out = dict(reps)
    for width, tids in by_width.items():
        half_w = 0.0
        half_h = 0.0
        for tid in tids:
            rep = reps[tid]
            if len(rep.vias) == 0:
                continue
            cx, cy = rep.box_center
            half_w = max(half_w, float(np.abs(rep.vias.points[:, 0] - cx).max()))
            half_h = max(half_h, float(np.abs(rep.vias.points[:, 1] - cy).max()))
        for tid in tids:
            rep = reps[tid]
            out[tid] = replace(
                rep,
                box_width=max(rep.cell_width, 2 * half_w),
                box_height=max(rep.cell_height, 2 * half_h),
            )
    return out


def verify_representative(
    rep: Representative,
    holdout_instances: list[CellInstance],
    cfg: RepresentativeConfig,
) -> VerificationReport:
    """Align held-out instances against the representative and check that
    the matched fraction and residuals stay within the configured gate."""
    r = cfg.matching_radius
    checks = []
    fractions = []
    residuals = []
    for inst in holdout_instances:
        if len(rep.vias) == 0:
            frac = 1.0 if len(inst.vias) == 0 else 0.0
            checks.append(InstanceCheck(inst.instance_id, frac, float("nan")))
            fractions.append(frac)
            continue
        res = align(inst.vias, rep.vias, r)
        frac = res.match_count / len(rep.vias)
        dists = match_distances(inst.vias, rep.vias, res)
        mean_res = float(dists.mean()) if dists.size else float("nan")
        checks.append(InstanceCheck(inst.instance_id, frac, mean_res))
        fractions.append(frac)
        if dists.size:
            residuals.append(mean_res)
    mean_frac = float(np.mean(fractions)) if fractions else 0.0
    mean_res = float(np.mean(residuals)) if residuals else float("nan")
    if len(rep.vias) == 0:
        passed = mean_frac >= cfg.min_match_fraction
    else:
        passed = (
            mean_frac >= cfg.min_match_fraction
            and math.isfinite(mean_res)
            and mean_res <= cfg.max_mean_residual
        )
    return VerificationReport(rep.type_id, tuple(checks), mean_frac, mean_res, passed)


def stricter_config(cfg: RepresentativeConfig, attempt: int) -> RepresentativeConfig:
    """Rebuild schedule: fresh seed per attempt, vote threshold stepping up
    by 0.1 per attempt and capped at 0.9."""
    if attempt < 1:
        raise ValueError("attempt must be >= 1")
    return replace(
        cfg,
        seed=cfg.seed + attempt,
        majority_threshold=min(0.5 + 0.1 * attempt, 0.9),
    )


def rebuild_stricter(
    cell_type: CellTypeInfo,
    instances: list[CellInstance],
    cfg: RepresentativeConfig,
    attempt: int,
) -> Representative:
    rep = build_representative(cell_type, instances, stricter_config(cfg, attempt))
    meta = dict(rep.build_meta)
    meta["attempt"] = attempt
    return replace(rep, build_meta=meta)


def render_overlay(
    rep: Representative,
    instance_image: GrayImage,
    cfg: ExtractionConfig,
    r: float = MATCHING_RADIUS,
) -> GrayImage:
    """Draw the representative's vias as outlined circles of radius ``r`` on
    the instance image, at the aligned translation. Deterministic pixels."""
    canvas = instance_image.data.copy()
    if len(rep.vias) == 0:
        return GrayImage(canvas)
    detected = detect_vias(instance_image, cfg)
    t = align(rep.vias, detected, r).translation
    centers_px = units_to_pixels(rep.vias.points + t, cfg)
    radius_px = r * cfg.pixels_per_unit
    h, w = canvas.shape
    for cx, cy in centers_px:
        x0 = max(0, int(math.floor(cx - radius_px - 1)))
        x1 = min(w, int(math.ceil(cx + radius_px + 2)))
        y0 = max(0, int(math.floor(cy - radius_px - 1)))
        y1 = min(h, int(math.ceil(cy + radius_px + 2)))
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dist = np.hypot(xx - cx, yy - cy)
        ring = np.abs(dist - radius_px) <= 0.6
        canvas[y0:y1, x0:x1][ring] = 255
    return GrayImage(canvas)


def save_representatives(reps: dict[str, Representative], path) -> None:
    """Persist a library's representatives as one JSON document."""
    doc = {}
    for tid in sorted(reps):
        rep = reps[tid]
        meta = dict(rep.build_meta)
        meta["cell"] = [rep.cell_width, rep.cell_height]
        doc[tid] = {
            "vias": [[round(float(x), 9), round(float(y), 9)] for x, y in rep.vias.points],
            "support": [round(float(s), 9) for s in rep.support],
            "box": [rep.box_width, rep.box_height],
            "build_meta": meta,
        }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_representatives(path) -> dict[str, Representative]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"representative store not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    reps = {}
    for tid, entry in doc.items():
        meta = dict(entry["build_meta"])
        cell_w, cell_h = meta.pop("cell")
        reps[tid] = Representative(
            type_id=tid,
            vias=ViaSet(entry["vias"], source=tid),
            support=tuple(entry["support"]),
            box_width=float(entry["box"][0]),
            box_height=float(entry["box"][1]),
            cell_width=float(cell_w),
            cell_height=float(cell_h),
            build_meta=meta,
        )
    return reps
