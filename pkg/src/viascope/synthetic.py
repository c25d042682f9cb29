"""Seeded synthetic libraries, rendered datasets, and brute-force oracles.

Everything here is deterministic in the seed: ground-truth via patterns with
controlled pairwise similarity, point-level noisy instances, rendered tile
images with manifests and truth files, and a dense-grid alignment oracle used
to cross-check the production alignment search.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .extraction import GrayImage
from .geometry import MATCHING_RADIUS, NodeConfig, Orientation, ViaSet, apply_orientation
from .ingestion import (
    CellInstance,
    CellTypeInfo,
    DatasetManifest,
    InstanceRecord,
    TileRef,
    save_manifest,
)

# Blob peaks sit ``contrast_margin`` gray levels above the fixed-threshold
# detector's default binarize level, so the margin directly controls how much
# headroom that detector gets.
REFERENCE_THRESHOLD = 128
BACKGROUND_LEVEL = 40.0
BLOB_SIGMA_UNITS = 0.2
MARGIN_UNITS = 1.0

_FUNCTION_NAMES = (
    "XOR", "XNOR", "BUF", "INV", "NAND", "NOR",
    "AOI", "OAI", "TIEH", "TIEL", "EDF", "EDFQ",
)


@dataclass(frozen=True)
class SynthLibrarySpec:
    """Recipe for a ground-truth cell library.

    ``planted_pairs`` lists (index i, index j, target score); a target of 0
    copies the pattern exactly, a positive target shares just enough vias
    for the analytic score to land on it. All types of one width class get
    the same via count, so every same-width pair compares patterns of equal
    size.

    Patterns must keep pairwise via separations of at least 2r so that
    within-radius matching stays unambiguous; the default leaves extra slack
    beyond that floor since vote clusters and estimated centers wander under
    noise.
    """

    seed: int = 0
    type_count: int = 8
    vias_min: int = 4
    vias_max: int = 16
    width_classes: tuple[int, ...] = (8, 11, 14, 17)
    cell_height: int = 5
    planted_pairs: tuple[tuple[int, int, float], ...] = ()
    min_separation: float = 1.4
    edge_margin: float = 0.5
    min_cross_score: float = 0.3

    def __post_init__(self):
        if self.type_count < 1:
            raise ValueError("type_count must be >= 1")
        if not (1 <= self.vias_min <= self.vias_max):
            raise ValueError("via count range must satisfy 1 <= min <= max")
        if self.min_separation < 2 * MATCHING_RADIUS:
            raise ValueError("min_separation must be at least 2r")
        for i, j, s in self.planted_pairs:
            if not (0 <= i < self.type_count and 0 <= j < self.type_count and i != j):
                raise ValueError(f"planted pair ({i}, {j}) out of range")
            if not (s == 0.0 or 0.0 < s <= 1.0):
                raise ValueError(f"planted target score {s} outside {{0}} U (0, 1]")


@dataclass(frozen=True)
class NoiseSpec:
    """Instance-level corruption model.

    ``spurious_rate`` is the expected number of extra vias per cell
    (Poisson); ``offset_range`` bounds the uniform bounding-box placement
    error per axis, in units.
    """

    jitter_sigma: float = 0.0
    dropout_prob: float = 0.0
    spurious_rate: float = 0.0
    intensity_noise_sigma: float = 0.0
    offset_range: float = 0.0
    contrast_margin: float = 100.0

    def __post_init__(self):
        if min(
            self.jitter_sigma,
            self.dropout_prob,
            self.spurious_rate,
            self.intensity_noise_sigma,
            self.offset_range,
            self.contrast_margin,
        ) < 0:
            raise ValueError("noise parameters must be nonnegative")
        if self.dropout_prob >= 1:
            raise ValueError("dropout_prob must be < 1")


CLEAN_NOISE = NoiseSpec()


@dataclass(frozen=True)
class SynthLibrary:
    spec: SynthLibrarySpec
    cell_types: tuple[CellTypeInfo, ...]
    patterns: dict  # type_id -> ViaSet (ground truth, canonical frame)

    def pattern(self, type_id: str) -> ViaSet:
        return self.patterns[type_id]

    def cell_type(self, type_id: str) -> CellTypeInfo:
        return next(c for c in self.cell_types if c.type_id == type_id)


class InfeasibleSpecError(ValueError):
    """The requested library cannot be realized (density, separation, or
    planted-score constraints failed repeatedly)."""


def _sample_pattern(
    rng: np.random.Generator,
    n: int,
    width: float,
    height: float,
    margin: float,
    min_sep: float,
    avoid: np.ndarray | None = None,
    max_tries: int = 4000,
) -> np.ndarray | None:
    """Dart-throwing sampler: n points with pairwise (and optional external)
    separation, inside the margin-inset cell box. None when it stalls."""
    lo = np.array([margin, margin])
    hi = np.array([width - margin, height - margin])
    if np.any(hi <= lo):
        return None
    pts: list[np.ndarray] = []
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > max_tries:
            return None
        cand = rng.uniform(lo, hi)
        ok = all(np.hypot(*(cand - p)) >= min_sep for p in pts)
        if ok and avoid is not None and len(avoid):
            ok = bool(np.hypot(*(cand - avoid).T).min() >= min_sep)
        if ok:
            pts.append(cand)
    return np.asarray(pts)


def _pattern_offenders(
    lib_patterns: dict[str, np.ndarray],
    types: list[CellTypeInfo],
    planted: dict[frozenset, float],
    spec: SynthLibrarySpec,
    r: float,
) -> list[str]:
    """Type ids whose patterns violate a planted target or the cross-score
    floor, judged by the dense-grid oracle."""
    by_id = {c.type_id: c for c in types}
    ids = sorted(lib_patterns)
    offenders: list[str] = []
    for i, ta in enumerate(ids):
        for tb in ids[i + 1 :]:
            if by_id[ta].width != by_id[tb].width:
                continue
            va, vb = ViaSet(lib_patterns[ta]), ViaSet(lib_patterns[tb])
            count = oracle_align(va, vb, r, r / 8)
            score = 1.0 - 2.0 * count / (len(va) + len(vb))
            key = frozenset((ta, tb))
            if key in planted:
                granularity = 2.0 / (len(va) + len(vb))
                if abs(score - planted[key]) > granularity / 2 + 1e-9:
                    offenders.append(tb)
            elif score <= spec.min_cross_score:
                offenders.append(tb)
    return offenders


def gen_library(spec: SynthLibrarySpec) -> SynthLibrary:
    """Generate a ground-truth library; deterministic in the seed.

    Planted pairs are realized exactly (target 0 copies the pattern; a
    positive target shares the right number of vias, with the fresh ones
    separated from the whole source pattern so nothing extra lines up).
    Every other same-width pair must score above the cross-score floor per
    the dense-grid oracle; offending types are resampled from fresh
    substreams until the library verifies.
    """
    r = spec.min_separation / 2.0
    n_classes = len(spec.width_classes)
    class_of = [i % n_classes for i in range(spec.type_count)]
    for i, j, _ in spec.planted_pairs:
        class_of[j] = class_of[i]

    # One via count per width class, capped by what dart throwing can pack.
    meta_rng = np.random.default_rng((spec.seed, 0))
    counts = []
    for w in spec.width_classes:
        area_w = w - 2 * spec.edge_margin
        area_h = spec.cell_height - 2 * spec.edge_margin
        feasible = int(0.5 * (area_w * area_h) / (spec.min_separation**2)) + 1
        if feasible < spec.vias_min:
            raise InfeasibleSpecError(
                f"width {w}: cannot place {spec.vias_min} vias at separation "
                f"{spec.min_separation} in a {area_w:.1f} x {area_h:.1f} box"
            )
        counts.append(int(meta_rng.integers(spec.vias_min, min(spec.vias_max, feasible) + 1)))

    types = []
    for i in range(spec.type_count):
        width = spec.width_classes[class_of[i]]
        name = _FUNCTION_NAMES[i % len(_FUNCTION_NAMES)]
        suffix = str(i // len(_FUNCTION_NAMES)) if i >= len(_FUNCTION_NAMES) else ""
        types.append(
            CellTypeInfo(
                type_id=f"CT{i:02d}",
                function_class=f"{name}{suffix}",
                width=int(width),
                height=int(spec.cell_height),
            )
        )
    index_of = {ct.type_id: i for i, ct in enumerate(types)}

    planted_by_target: dict[frozenset, float] = {
        frozenset((types[i].type_id, types[j].type_id)): s for i, j, s in spec.planted_pairs
    }
    source_of = {}
    for i, j, s in spec.planted_pairs:
        child, src = types[j].type_id, types[i].type_id
        if child in source_of:
            raise InfeasibleSpecError(f"type index {j} is the copy side of two planted pairs")
        if src in {types[jj].type_id for _, jj, _ in spec.planted_pairs}:
            raise InfeasibleSpecError("chained planted pairs are not supported")
        source_of[child] = (src, s)

    def sample_type(ct: CellTypeInfo, draw: int, patterns: dict) -> np.ndarray | None:
        rng = np.random.default_rng((spec.seed, 1, index_of[ct.type_id], draw))
        n = counts[class_of[index_of[ct.type_id]]]
        if ct.type_id in source_of:
            src_id, target = source_of[ct.type_id]
            base = patterns[src_id]
            if target == 0.0:
                return base.copy()
            shared = int(round(n * (1.0 - target)))
            pick = np.sort(rng.choice(n, size=shared, replace=False)) if shared else np.empty(0, int)
            fresh = _sample_pattern(
                rng, n - shared, ct.width, ct.height, spec.edge_margin,
                spec.min_separation, avoid=base,
            )
            if fresh is None:
                return None
            return np.concatenate([base[pick], fresh]) if shared else fresh
        return _sample_pattern(rng, n, ct.width, ct.height, spec.edge_margin, spec.min_separation)

    # Children regenerate after (and whenever) their source does.
    build_order = sorted(types, key=lambda c: (c.type_id in source_of, index_of[c.type_id]))
    patterns: dict[str, np.ndarray] = {}
    draws = {ct.type_id: 0 for ct in types}
    pending = {ct.type_id for ct in types}
    for _ in range(256):
        for ct in build_order:
            if ct.type_id not in pending:
                continue
            pat = None
            while pat is None and draws[ct.type_id] < 200:
                pat = sample_type(ct, draws[ct.type_id], patterns)
                draws[ct.type_id] += 1
            if pat is None:
                raise InfeasibleSpecError(
                    f"cannot place {counts[class_of[index_of[ct.type_id]]]} vias for "
                    f"{ct.type_id} at separation {spec.min_separation}"
                )
            patterns[ct.type_id] = pat
        offenders = _pattern_offenders(patterns, types, planted_by_target, spec, r)
        if not offenders:
            return SynthLibrary(
                spec=spec,
                cell_types=tuple(types),
                patterns={tid: ViaSet(p, source=tid) for tid, p in patterns.items()},
            )
        pending = set(offenders)
        for child, (src, _) in source_of.items():
            if src in pending:
                pending.add(child)
    raise InfeasibleSpecError(
        f"could not realize library spec (seed {spec.seed}, {spec.type_count} types, "
        f"planted {list(spec.planted_pairs)}): cross-score floor kept failing"
    )


_ORIENTATION_SIGNS = {
    Orientation.R0: (1.0, 1.0),
    Orientation.R180: (-1.0, -1.0),
    Orientation.MX: (1.0, -1.0),
    Orientation.MX_R180: (-1.0, 1.0),
}


def perturb_pattern(
    pattern: ViaSet,
    cell: CellTypeInfo,
    noise: NoiseSpec,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply jitter, dropout, and spurious vias to a ground-truth pattern.

    Returns (all via positions, surviving true via positions), both in the
    canonical cell frame.
    """
    pts = pattern.points
    n = len(pts)
    keep = rng.random(n) >= noise.dropout_prob if n else np.zeros(0, bool)
    jitter = rng.normal(0.0, noise.jitter_sigma, (n, 2)) if noise.jitter_sigma > 0 else np.zeros((n, 2))
    survivors = pts[keep] + jitter[keep]
    k_spur = int(rng.poisson(noise.spurious_rate)) if noise.spurious_rate > 0 else 0
    if k_spur:
        lo = (-MARGIN_UNITS, -MARGIN_UNITS)
        hi = (cell.width + MARGIN_UNITS, cell.height + MARGIN_UNITS)
        spurious = rng.uniform(lo, hi, (k_spur, 2))
        observed = np.concatenate([survivors, spurious]) if len(survivors) else spurious
    else:
        observed = survivors
    return observed, survivors


def make_point_instance(
    library: SynthLibrary,
    type_id: str,
    noise: NoiseSpec,
    rng: np.random.Generator,
    instance_id: str,
) -> CellInstance:
    """A noisy point-level instance in canonical frame (no rendering)."""
    cell = library.cell_type(type_id)
    observed, _ = perturb_pattern(library.pattern(type_id), cell, noise, rng)
    if noise.offset_range > 0:
        observed = observed + rng.uniform(-noise.offset_range, noise.offset_range, 2)
    return CellInstance(instance_id, type_id, ViaSet(observed, source=instance_id))


def make_point_instances(
    library: SynthLibrary,
    type_id: str,
    count: int,
    noise: NoiseSpec,
    seed: int,
    id_prefix: str = "",
) -> list[CellInstance]:
    """Batch of point-level instances with per-instance derived rng streams."""
    out = []
    type_key = _stable_hash(type_id)
    for k in range(count):
        rng = np.random.default_rng((seed, type_key, k))
        out.append(
            make_point_instance(library, type_id, noise, rng, f"{id_prefix}{type_id}_{k:04d}")
        )
    return out


def _stable_hash(text: str) -> int:
    val = 0
    for ch in text:
        val = (val * 131 + ord(ch)) % (2**31)
    return val


@dataclass(frozen=True)
class RenderedInstance:
    image: GrayImage  # cell plus margins
    bbox: tuple[int, int, int, int]  # cell box inside the image, pixels
    truth_vias: ViaSet  # surviving true vias, canonical frame


def render_instance(
    pattern: ViaSet,
    cell: CellTypeInfo,
    noise: NoiseSpec,
    orientation: Orientation,
    rng: np.random.Generator,
    pixels_per_unit: float = 10.0,
) -> RenderedInstance:
    """Draw one instance as bright radial blobs over a noisy background.

    Via positions are jittered and dropped per the noise spec, the whole
    cell content shifts by a sampled bounding-box placement error, and the
    requested orientation is applied. Truth records the surviving via
    positions mapped back to the canonical frame.
    """
    ppu = pixels_per_unit
    observed, survivors = perturb_pattern(pattern, cell, noise, rng)
    offset = (
        rng.uniform(-noise.offset_range, noise.offset_range, 2)
        if noise.offset_range > 0
        else np.zeros(2)
    )
    placed = apply_orientation(observed, orientation, cell.width, cell.height) + offset

    wpx = int(round((cell.width + 2 * MARGIN_UNITS) * ppu))
    hpx = int(round((cell.height + 2 * MARGIN_UNITS) * ppu))
    canvas = np.full((hpx, wpx), BACKGROUND_LEVEL, dtype=float)

    peak = REFERENCE_THRESHOLD + noise.contrast_margin
    amplitude = peak - BACKGROUND_LEVEL
    sigma_px = BLOB_SIGMA_UNITS * ppu
    reach = int(math.ceil(3.5 * sigma_px))
    for vx, vy in placed:
        cx = (vx + MARGIN_UNITS) * ppu
        cy = (vy + MARGIN_UNITS) * ppu
        x0, x1 = max(0, int(cx) - reach), min(wpx, int(cx) + reach + 1)
        y0, y1 = max(0, int(cy) - reach), min(hpx, int(cy) + reach + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        canvas[y0:y1, x0:x1] += amplitude * np.exp(
            -((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma_px**2)
        )
    if noise.intensity_noise_sigma > 0:
        canvas += rng.normal(0.0, noise.intensity_noise_sigma, canvas.shape)
    image = GrayImage(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))

    sx, sy = _ORIENTATION_SIGNS[orientation]
    truth = survivors + np.array([sx * offset[0], sy * offset[1]])
    margin_px = int(round(MARGIN_UNITS * ppu))
    bbox = (margin_px, margin_px, int(round(cell.width * ppu)), int(round(cell.height * ppu)))
    return RenderedInstance(image, bbox, ViaSet(truth))


@dataclass(frozen=True)
class SynthDataset:
    manifest: DatasetManifest
    truth: dict  # instance_id -> {"true_type": ..., "vias": [[x, y], ...]}
    library: SynthLibrary
    out_dir: Path


def gen_dataset(
    spec: SynthLibrarySpec,
    noise: NoiseSpec,
    instances_per_type: int,
    planted_swaps: tuple[tuple[str, str], ...],
    out_dir,
    pixels_per_unit: float = 10.0,
    slots_per_tile: int = 100,
) -> SynthDataset:
    """Write a full on-disk dataset: tiles, manifest, and truth file.

    Each (claimed, actual) entry in ``planted_swaps`` converts one instance
    of the claimed type into a substitution: its manifest record keeps the
    claimed type while the rendered pattern (and the truth file) carry the
    actual one. Swapped types must share a width.
    """
    out_dir = Path(out_dir)
    library = gen_library(spec)
    by_id = {c.type_id: c for c in library.cell_types}
    ppu = pixels_per_unit

    plan: list[tuple[str, str, str]] = []  # (instance_id, claimed, actual)
    for ct in library.cell_types:
        for k in range(instances_per_type):
            plan.append((f"{ct.type_id}_{k:04d}", ct.type_id, ct.type_id))
    swap_rng = np.random.default_rng((spec.seed, 7))
    swapped: set[int] = set()
    for claimed, actual in planted_swaps:
        if claimed not in by_id or actual not in by_id:
            raise ValueError(f"swap references unknown type: {claimed!r} -> {actual!r}")
        if by_id[claimed].width != by_id[actual].width:
            raise ValueError(
                f"swap {claimed!r} -> {actual!r}: widths differ, substitution impossible"
            )
        pool = [
            idx
            for idx, (_, c, a) in enumerate(plan)
            if c == claimed and a == claimed and idx not in swapped
        ]
        if not pool:
            raise ValueError(f"no remaining instances of {claimed!r} to swap")
        idx = int(swap_rng.choice(pool))
        swapped.add(idx)
        plan[idx] = (plan[idx][0], claimed, actual)

    max_width = max(c.width for c in library.cell_types)
    slot_w = int(round((max_width + 2 * MARGIN_UNITS) * ppu))
    slot_h = int(round((spec.cell_height + 2 * MARGIN_UNITS) * ppu))
    cols = int(math.ceil(math.sqrt(slots_per_tile)))
    rows = int(math.ceil(slots_per_tile / cols))
    n_tiles = int(math.ceil(len(plan) / slots_per_tile))

    orient_values = list(Orientation)
    tiles = []
    records = []
    truth: dict[str, dict] = {}
    tile_dir = out_dir / "tiles"
    tile_dir.mkdir(parents=True, exist_ok=True)
    for t in range(n_tiles):
        canvas = np.full((rows * slot_h, cols * slot_w), int(round(BACKGROUND_LEVEL)), dtype=np.uint8)
        for s in range(slots_per_tile):
            gidx = t * slots_per_tile + s
            if gidx >= len(plan):
                break
            instance_id, claimed, actual = plan[gidx]
            rng = np.random.default_rng((spec.seed, 2, gidx))
            orientation = orient_values[int(rng.integers(len(orient_values)))]
            rendered = render_instance(
                library.pattern(actual), by_id[actual], noise, orientation, rng, ppu
            )
            ry, rx = divmod(s, cols)
            oy, ox = ry * slot_h, rx * slot_w
            block = rendered.image.data
            canvas[oy : oy + block.shape[0], ox : ox + block.shape[1]] = block
            bx, by_, bw, bh = rendered.bbox
            records.append(
                InstanceRecord(
                    instance_id=instance_id,
                    type_id=claimed,
                    tile_id=f"tile{t:03d}",
                    bbox=(ox + bx, oy + by_, bw, bh),
                    orientation=orientation,
                )
            )
            truth[instance_id] = {
                "true_type": actual,
                "vias": [[round(float(x), 6), round(float(y), 6)] for x, y in rendered.truth_vias.points],
            }
        tile_path = f"tiles/tile{t:03d}.png"
        GrayImage(canvas).save(out_dir / tile_path)
        tiles.append(TileRef(f"tile{t:03d}", tile_path))

    node = NodeConfig(name=f"synth{spec.seed}", unit_length_nm=100.0, pixels_per_unit=ppu)
    manifest = DatasetManifest(
        node=node,
        tiles=tuple(tiles),
        cell_types=library.cell_types,
        instances=tuple(records),
        base_dir=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    (out_dir / "truth.json").write_text(
        json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return SynthDataset(manifest, truth, library, out_dir)


def load_truth(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def oracle_align(a: ViaSet, b: ViaSet, r: float, grid_step: float) -> int:
    """Best match count over a dense translation grid, via exact matching.

    The grid spans the bounding box of all pairwise differences (the
    Minkowski difference of the two sets) expanded by the radius, and the
    exact difference vectors are evaluated as well, so the production
    alignment can never legitimately exceed this bound. Match counts use
    maximum-cardinality bipartite matching, independent of the greedy
    production matcher. Refuses sets beyond 20 points; this is a
    small-instance verification tool.
    """
    if grid_step > r / 8 + 1e-12:
        raise ValueError("oracle grid step must be at most r / 8")
    if len(a) > 20 or len(b) > 20:
        raise ValueError("oracle_align is limited to sets of at most 20 points")
    if len(a) == 0 or len(b) == 0:
        return 0
    na, nb = len(a), len(b)
    diffs = (b.points[None, :, :] - a.points[:, None, :]).reshape(-1, 2)
    lo = diffs.min(axis=0) - r
    hi = diffs.max(axis=0) + r
    gx = np.arange(lo[0], hi[0] + grid_step, grid_step)
    gy = np.arange(lo[1], hi[1] + grid_step, grid_step)
    mx, my = np.meshgrid(gx, gy)
    T = np.concatenate([np.column_stack([mx.ravel(), my.ravel()]), diffs])

    # A translation t matches pair (i, j) exactly when t lies within r of the
    # difference vector b_j - a_i, so counting reduces to distances between
    # translations and the difference cloud. When both sets keep pairwise
    # separations of at least 2r no via can see two partners, every
    # within-radius pair set is a matching, and the count is just the number
    # of nearby difference vectors; otherwise degenerate translations fall
    # back to exact maximum-cardinality matching.
    r2 = r * r
    separated = a.min_separation() >= 2 * r and b.min_separation() >= 2 * r
    best = 0
    chunk = max(1, int(6_000_000 / max(1, na * nb)))
    for s in range(0, len(T), chunk):
        t = T[s : s + chunk]
        d2 = (t[:, 0:1] - diffs[None, :, 0]) ** 2 + (t[:, 1:2] - diffs[None, :, 1]) ** 2
        within = d2 < r2
        counts = within.sum(axis=1)
        if not separated:
            cube = within.reshape(len(t), na, nb)
            simple = (cube.sum(axis=2) <= 1).all(axis=1) & (cube.sum(axis=1) <= 1).all(axis=1)
            for k in np.flatnonzero(~simple):
                graph = csr_matrix(cube[k])
                matching = maximum_bipartite_matching(graph, perm_type="column")
                counts[k] = int((matching != -1).sum())
        chunk_best = int(counts.max()) if len(counts) else 0
        best = max(best, chunk_best)
    return best
