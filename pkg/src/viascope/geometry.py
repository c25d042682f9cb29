"""Point-set primitives for via patterns: canonical orientation, exhaustive
translation alignment, and the via-overlap similarity score.

All coordinates are expressed in node units (the minimum feature spacing of
the technology node). Two vias match when their Euclidean distance is
strictly below the matching radius, fixed at half a unit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

MATCHING_RADIUS = 0.5  # node units, half of one unit


class Orientation(enum.Enum):
    """Cell placement orientation.

    The four placements are the identity, a 180 degree rotation, a mirror
    about the horizontal axis, and the composition of both. Each map is an
    involution about the cell box center, so applying the same map twice is
    the identity.
    """

    R0 = "R0"
    R180 = "R180"
    MX = "MX"
    MX_R180 = "MX_R180"


class ViaSet:
    """An immutable set of via centers stored in canonical order.

    Points are kept as an ``(n, 2)`` float array sorted by ``(x, y)`` so that
    structurally equal sets compare equal regardless of construction order.
    ``source`` is a provenance tag (instance id or representative id) and does
    not participate in equality.
    """

    def __init__(self, points=(), source: str = ""):
        pts = np.asarray(points, dtype=float)
        if pts.size == 0:
            pts = np.empty((0, 2), dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(1, -1)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"via points must be (n, 2), got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("via coordinates must be finite")
        order = np.lexsort((pts[:, 1], pts[:, 0]))
        pts = np.ascontiguousarray(pts[order])
        pts.setflags(write=False)
        self.points = pts
        self.source = source

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, ViaSet):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    def __hash__(self) -> int:
        return hash((self.points.shape[0], self.points.tobytes()))

    def __repr__(self) -> str:
        return f"ViaSet({len(self)} vias, source={self.source!r})"

    def shift(self, dx: float, dy: float) -> "ViaSet":
        return ViaSet(self.points + (float(dx), float(dy)), self.source)

    def min_separation(self) -> float:
        """Smallest pairwise distance; inf for fewer than two points."""
        if len(self) < 2:
            return float("inf")
        d = self.points[:, None, :] - self.points[None, :, :]
        dist = np.hypot(d[..., 0], d[..., 1])
        np.fill_diagonal(dist, np.inf)
        return float(dist.min())

    def sort_key(self) -> tuple:
        """Deterministic total order on via sets, used to canonicalize pair
        order before alignment so scores are exactly symmetric."""
        return (len(self), self.points.tobytes())


@dataclass(frozen=True)
class AlignmentResult:
    """Outcome of matching two via sets at one translation.

    ``matched_pairs`` is a one-to-one list of (index in a, index in b);
    every matched pair lies strictly within the matching radius after
    translating the first set.
    """

    translation: tuple[float, float]
    matched_pairs: tuple[tuple[int, int], ...]
    match_count: int


@dataclass(frozen=True)
class NodeConfig:
    """Technology node parameters.

    The matching radius is half of one unit by definition and is validated
    rather than configurable.
    """

    name: str
    unit_length_nm: float
    pixels_per_unit: float
    matching_radius: float = MATCHING_RADIUS

    def __post_init__(self):
        if self.unit_length_nm <= 0:
            raise ValueError("unit_length_nm must be positive")
        if self.pixels_per_unit <= 0:
            raise ValueError("pixels_per_unit must be positive")
        if self.matching_radius != MATCHING_RADIUS:
            raise ValueError("matching_radius is fixed at half a unit (0.5)")


def apply_orientation(points, orientation: Orientation, box_width: float, box_height: float) -> np.ndarray:
    """Map points by the given orientation about the box center."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    w, h = float(box_width), float(box_height)
    if orientation is Orientation.R0:
        return pts.copy()
    if orientation is Orientation.R180:
        return np.column_stack([w - pts[:, 0], h - pts[:, 1]])
    if orientation is Orientation.MX:
        return np.column_stack([pts[:, 0], h - pts[:, 1]])
    if orientation is Orientation.MX_R180:
        return np.column_stack([w - pts[:, 0], pts[:, 1]])
    raise ValueError(f"unknown orientation {orientation!r}")


def canonicalize(
    vias: ViaSet,
    orientation: Orientation,
    box_width: float,
    box_height: float,
    tolerance: float | None = None,
) -> ViaSet:
    """Undo a placement orientation, returning the pattern in canonical frame.

    Points must lie within ``[0, box_width] x [0, box_height]``, up to
    ``tolerance`` (defaults to the matching radius). Crops taken with a
    safety margin carry neighbor vias outside the cell box; callers pass a
    correspondingly larger tolerance for those.
    """
    tol = MATCHING_RADIUS if tolerance is None else float(tolerance)
    pts = vias.points
    if len(vias):
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        if lo[0] < -tol or lo[1] < -tol or hi[0] > box_width + tol or hi[1] > box_height + tol:
            raise ValueError(
                f"via outside [0, {box_width}] x [0, {box_height}] beyond tolerance {tol}"
            )
    # Every orientation map is an involution, so the inverse is the map itself.
    return ViaSet(apply_orientation(pts, orientation, box_width, box_height), vias.source)


def candidate_translations(a: ViaSet, b: ViaSet, dedup_cell: float) -> np.ndarray:
    """All translations that bring at least one via of ``a`` onto one of ``b``.

    Returns the pairwise difference vectors ``b_j - a_i`` as an ``(k, 2)``
    array, deduplicated onto a square grid of side ``dedup_cell`` (keeping the
    lexicographically smallest vector in each grid cell). ``dedup_cell <= 0``
    disables deduplication. Empty input yields an empty array.
    """
    if len(a) == 0 or len(b) == 0:
        return np.empty((0, 2), dtype=float)
    diffs = (b.points[None, :, :] - a.points[:, None, :]).reshape(-1, 2)
    order = np.lexsort((diffs[:, 1], diffs[:, 0]))
    diffs = diffs[order]
    if dedup_cell > 0:
        keys = np.round(diffs / dedup_cell).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        diffs = diffs[np.sort(first)]
    return diffs


def _greedy_count(d2: np.ndarray, r2: float) -> int:
    """Size of the greedy nearest-pair matching on a squared-distance matrix."""
    ii, jj = np.nonzero(d2 < r2)
    if ii.size == 0:
        return 0
    order = np.lexsort((jj, ii, d2[ii, jj]))
    used_a = np.zeros(d2.shape[0], dtype=bool)
    used_b = np.zeros(d2.shape[1], dtype=bool)
    count = 0
    for k in order:
        i, j = ii[k], jj[k]
        if not used_a[i] and not used_b[j]:
            used_a[i] = True
            used_b[j] = True
            count += 1
    return count


def match_vias(a: ViaSet, b: ViaSet, translation, r: float) -> AlignmentResult:
    """Greedily match ``a`` shifted by ``translation`` against ``b``.

    Candidate pairs are taken in order of increasing post-translation
    distance (ties by index order) and accepted while both endpoints are
    unmatched and the distance is strictly below ``r``. When both sets keep
    all pairwise separations at or above ``2 r`` the within-radius pairs are
    already one-to-one, so the greedy result equals the maximum matching.
    """
    if r <= 0:
        raise ValueError("matching radius must be positive")
    t = (float(translation[0]), float(translation[1]))
    if len(a) == 0 or len(b) == 0:
        return AlignmentResult(t, (), 0)
    shifted = a.points + t
    dx = shifted[:, None, 0] - b.points[None, :, 0]
    dy = shifted[:, None, 1] - b.points[None, :, 1]
    d2 = dx * dx + dy * dy
    r2 = r * r
    ii, jj = np.nonzero(d2 < r2)
    if ii.size == 0:
        return AlignmentResult(t, (), 0)
    order = np.lexsort((jj, ii, d2[ii, jj]))
    used_a = np.zeros(len(a), dtype=bool)
    used_b = np.zeros(len(b), dtype=bool)
    pairs: list[tuple[int, int]] = []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if not used_a[i] and not used_b[j]:
            used_a[i] = True
            used_b[j] = True
            pairs.append((i, j))
    return AlignmentResult(t, tuple(pairs), len(pairs))


def _candidate_match_counts(A: np.ndarray, B: np.ndarray, T: np.ndarray, r: float) -> np.ndarray:
    """Greedy match counts for every candidate translation, vectorized.

    When no via sees more than one counterpart within radius (the common
    case under 2r separation) the count is just the number of within-radius
    pairs; only degenerate candidates fall back to the explicit greedy loop.
    """
    r2 = r * r
    counts = np.empty(len(T), dtype=np.int64)
    # Chunk so the (chunk, |A|, |B|) distance tensor stays small.
    chunk = max(1, int(4_000_000 / max(1, A.shape[0] * B.shape[0])))
    for s in range(0, len(T), chunk):
        t = T[s : s + chunk]
        shifted = A[None, :, :] + t[:, None, :]
        diff = shifted[:, :, None, :] - B[None, None, :, :]
        d2 = np.einsum("kijc,kijc->kij", diff, diff)
        within = d2 < r2
        simple = (within.sum(axis=2) <= 1).all(axis=1) & (within.sum(axis=1) <= 1).all(axis=1)
        c = within.sum(axis=(1, 2)).astype(np.int64)
        for k in np.flatnonzero(~simple):
            c[k] = _greedy_count(d2[k], r2)
        counts[s : s + chunk] = c
    return counts


def align(a: ViaSet, b: ViaSet, r: float, dedup_cell: float | None = None) -> AlignmentResult:
    """Best translation of ``a`` onto ``b`` over all via-coincidence candidates.

    Every pairwise difference vector is tried (after grid deduplication,
    default cell ``r / 4``) and the translation with the maximum match count
    wins; ties break by smallest squared norm, then lexicographic (dx, dy).
    Either set empty yields translation (0, 0) with zero matches.
    """
    if r <= 0:
        raise ValueError("matching radius must be positive")
    if len(a) == 0 or len(b) == 0:
        return AlignmentResult((0.0, 0.0), (), 0)
    cell = r / 4.0 if dedup_cell is None else dedup_cell
    T = candidate_translations(a, b, cell)
    counts = _candidate_match_counts(a.points, b.points, T, r)
    norm2 = T[:, 0] * T[:, 0] + T[:, 1] * T[:, 1]
    best = int(np.lexsort((T[:, 1], T[:, 0], norm2, -counts))[0])
    return match_vias(a, b, (T[best, 0], T[best, 1]), r)


def match_distances(a: ViaSet, b: ViaSet, result: AlignmentResult) -> np.ndarray:
    """Post-translation distances of the matched pairs of ``result``."""
    if not result.matched_pairs:
        return np.empty(0, dtype=float)
    ij = np.asarray(result.matched_pairs, dtype=int)
    pa = a.points[ij[:, 0]] + result.translation
    pb = b.points[ij[:, 1]]
    return np.hypot(pa[:, 0] - pb[:, 0], pa[:, 1] - pb[:, 1])


def similarity_score(a: ViaSet, b: ViaSet, r: float) -> float:
    """Dissimilarity of two via sets in [0, 1].

    One minus the fraction of matched vias relative to the total via count
    of both sets at the best alignment: 0 means every via pairs up within
    the matching radius, 1 means nothing matches. The pair is ordered by a
    deterministic set key before alignment so the score is exactly
    symmetric. Conventions for degenerate input: both sets empty scores 0,
    exactly one empty scores 1.
    """
    na, nb = len(a), len(b)
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return 1.0
    first, second = (a, b) if a.sort_key() <= b.sort_key() else (b, a)
    res = align(first, second, r)
    return 1.0 - 2.0 * res.match_count / (na + nb)
