"""Command-line pipeline with stage-wise file caching.

Stages write their artifacts under the output directory and skip work when
the artifact already exists (pass ``--force`` to redo). All outputs are
deterministic for a fixed config and seed, independent of the worker count:
work items are mapped in a stable order and every file is assembled from
sorted collections.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 verification
failures present.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from pathlib import Path

from .detection import (
    DetectionConfig,
    TiePolicy,
    classify,
    candidates_for,
    evaluate_pair,
    evaluate_planted,
    write_eval_reports,
    write_verdicts_csv,
)
from .extraction import ExtractionConfig, GrayImage
from .ingestion import (
    CellInstance,
    DatasetManifest,
    ManifestError,
    TileCache,
    crop_instance,
    default_margin_px,
    extract_instance,
    group_by_type,
    load_manifest,
    load_via_cache,
    write_via_cache,
)
from .representatives import (
    DegenerateLibraryError,
    RepresentativeConfig,
    build_representative,
    finalize_boxes,
    load_representatives,
    render_overlay,
    rebuild_stricter,
    sample_instances,
    save_representatives,
    verify_representative,
)
from .similarity import (
    analyze_library,
    emit_dont_use,
    top_k,
    write_analysis_csv,
    write_analysis_json,
    write_dont_use,
)
from .synthetic import NoiseSpec, SynthLibrarySpec, gen_dataset, load_truth

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    manifest: Path
    out: Path
    workers: int = 1
    seed: int = 0
    force: bool = False
    extraction: ExtractionConfig = ExtractionConfig()
    reps: RepresentativeConfig = RepresentativeConfig()
    detection: DetectionConfig = DetectionConfig()
    dont_use_threshold: float = 0.0
    top: int = 10
    overlays: bool = False


def parse_config_file(path) -> dict:
    """Flat key = value config; values parse as JSON literals, bare words as
    strings, '#' starts a comment."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        value = value.strip()
        try:
            out[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            out[key.strip()] = value
    return out


def _build_run_config(args) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(parse_config_file(args.config))

    def pick(key, flag_value, default):
        if flag_value is not None:
            return flag_value
        return values.get(key, default)

    manifest = pick("manifest", getattr(args, "manifest", None), None)
    if manifest is None:
        raise ConfigError("no manifest given (flag --manifest or config key 'manifest')")
    out = pick("out", getattr(args, "out", None), "out")
    seed = int(pick("seed", getattr(args, "seed", None), 0))
    tie = str(pick("detect.tie_policy", getattr(args, "tie_policy", None), "flag"))
    try:
        tie_policy = TiePolicy(tie)
    except ValueError:
        raise ConfigError(f"unknown tie policy {tie!r} (use 'flag' or 'benign')") from None
    try:
        extraction = ExtractionConfig(
            method=str(pick("extraction.method", getattr(args, "method", None), "threshold")),
            binarize_threshold=int(values.get("extraction.binarize_threshold", 128)),
            erosion_radius=int(values.get("extraction.erosion_radius", 1)),
            min_blob_area=int(values.get("extraction.min_blob_area", 4)),
            persistence_threshold=int(values.get("extraction.persistence_threshold", 50)),
        )
        reps = RepresentativeConfig(
            sample_size=int(values.get("reps.sample_size", 50)),
            seed=int(values.get("reps.seed", seed)),
            majority_threshold=float(values.get("reps.majority_threshold", 0.5)),
            min_match_fraction=float(values.get("reps.min_match_fraction", 0.9)),
            max_mean_residual=float(values.get("reps.max_mean_residual", 0.25)),
        )
        detection = DetectionConfig(
            delta=float(pick("detect.delta", getattr(args, "delta", None), 0.0)),
            tie_policy=tie_policy,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        manifest=Path(manifest),
        out=Path(out),
        workers=max(1, int(pick("workers", getattr(args, "workers", None), 1))),
        seed=seed,
        force=bool(getattr(args, "force", False)),
        extraction=extraction,
        reps=reps,
        detection=detection,
        dont_use_threshold=float(
            pick("analyze.dont_use_threshold", getattr(args, "threshold", None), 0.0)
        ),
        top=int(pick("analyze.top", getattr(args, "top", None), 10)),
        overlays=bool(getattr(args, "overlays", False)),
    )


def _map_ordered(fn, items, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ----- extract ---------------------------------------------------------------


def _extract_tile(tile_id: str, manifest: DatasetManifest, cfg: ExtractionConfig):
    """Extract every instance of one tile; returns (results, errors)."""
    results = []
    errors = []
    tiles = TileCache()
    for rec in manifest.instances:
        if rec.tile_id != tile_id:
            continue
        try:
            results.append(extract_instance(manifest, rec, cfg, tiles=tiles))
        except (ValueError, OSError) as exc:
            errors.append({"instance_id": rec.instance_id, "error": str(exc)})
    return results, errors


def cmd_extract(cfg: RunConfig) -> int:
    manifest = load_manifest(cfg.manifest)
    out_csv = cfg.out / "vias.csv"
    if out_csv.exists() and not cfg.force:
        print(f"extract: {out_csv} exists, skipping (use --force to redo)")
        return EXIT_OK
    tile_ids = sorted({t.tile_id for t in manifest.tiles})
    worker = partial(_extract_tile, manifest=manifest, cfg=cfg.extraction)
    chunks = _map_ordered(worker, tile_ids, cfg.workers)
    by_id = {}
    errors = []
    for results, errs in chunks:
        errors.extend(errs)
        for inst in results:
            by_id[inst.instance_id] = inst
    ordered = [by_id[r.instance_id] for r in manifest.instances if r.instance_id in by_id]
    write_via_cache(ordered, out_csv)
    if errors:
        errors.sort(key=lambda e: e["instance_id"])
        (cfg.out / "extract_errors.json").write_text(
            json.dumps(errors, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        print(f"extract: {len(errors)} instance(s) failed, see extract_errors.json")
        return EXIT_DATA
    print(f"extract: wrote {out_csv} ({len(ordered)} instances)")
    return EXIT_OK


# ----- build-reps / verify-reps ----------------------------------------------


def _build_one_type(type_id: str, manifest: DatasetManifest, by_type: dict, cfg: RepresentativeConfig):
    return build_representative(manifest.cell_type(type_id), by_type[type_id], cfg)


def cmd_build_reps(cfg: RunConfig) -> int:
    manifest = load_manifest(cfg.manifest)
    out_json = cfg.out / "reps.json"
    if out_json.exists() and not cfg.force:
        print(f"build-reps: {out_json} exists, skipping (use --force to redo)")
        return EXIT_OK
    instances = load_via_cache(manifest, cfg.out / "vias.csv")
    by_type = group_by_type(instances)
    type_ids = sorted(by_type)
    for tid in type_ids:
        if len(by_type[tid]) < 2:
            print(f"build-reps: cell type {tid!r} has fewer than 2 instances")
            return EXIT_DATA
    worker = partial(_build_one_type, manifest=manifest, by_type=by_type, cfg=cfg.reps)
    built = _map_ordered(worker, type_ids, cfg.workers)
    reps = finalize_boxes(dict(zip(type_ids, built)), list(manifest.cell_types))
    save_representatives(reps, out_json)
    print(f"build-reps: wrote {out_json} ({len(reps)} cell types)")
    return EXIT_OK


def _holdout_for(instances: list[CellInstance], cfg: RepresentativeConfig) -> list[CellInstance]:
    sampled = {inst.instance_id for inst in sample_instances(instances, cfg.sample_size, cfg.seed)}
    holdout = [inst for inst in instances if inst.instance_id not in sampled]
    return holdout if holdout else list(instances)


def cmd_verify_reps(cfg: RunConfig, rejects_file: Path | None) -> int:
    manifest = load_manifest(cfg.manifest)
    reps_path = cfg.out / "reps.json"
    reps = load_representatives(reps_path)
    instances = load_via_cache(manifest, cfg.out / "vias.csv")
    by_type = group_by_type(instances)

    if rejects_file is not None:
        rejected = [
            line.strip()
            for line in Path(rejects_file).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        for tid in rejected:
            if tid not in reps:
                print(f"verify-reps: rejected type {tid!r} has no representative")
                return EXIT_DATA
            attempt = int(reps[tid].build_meta.get("attempt", 0)) + 1
            reps[tid] = rebuild_stricter(
                manifest.cell_type(tid), by_type[tid], cfg.reps, attempt
            )
            print(f"verify-reps: rebuilt {tid} (attempt {attempt})")
        reps = finalize_boxes(reps, list(manifest.cell_types))
        save_representatives(reps, reps_path)

    reports = {}
    failures = []
    for tid in sorted(reps):
        report = verify_representative(reps[tid], _holdout_for(by_type[tid], cfg.reps), cfg.reps)
        reports[tid] = report
        if not report.passed:
            failures.append(tid)
    doc = {
        tid: {
            "passed": rep.passed,
            "mean_match_fraction": round(rep.mean_match_fraction, 9),
            "mean_residual": None if rep.mean_residual != rep.mean_residual else round(rep.mean_residual, 9),
            "instances": [
                {
                    "instance_id": c.instance_id,
                    "match_fraction": round(c.match_fraction, 9),
                    "mean_residual": None if c.mean_residual != c.mean_residual else round(c.mean_residual, 9),
                }
                for c in rep.per_instance
            ],
        }
        for tid, rep in reports.items()
    }
    (cfg.out / "verify.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    if cfg.overlays:
        overlay_dir = cfg.out / "overlays"
        tiles = TileCache()
        margin = default_margin_px(manifest.node)
        for tid in sorted(reps):
            recs = manifest.instances_of(tid)
            if not recs:
                continue
            rec = recs[0]
            crop = crop_instance(tiles.get(manifest.tile_path(rec.tile_id)), rec, margin)
            ecfg = replace(
                cfg.extraction,
                pixels_per_unit=manifest.node.pixels_per_unit,
                origin_offset=(rec.bbox[0] - crop.origin[0], rec.bbox[1] - crop.origin[1]),
            )
            overlay = render_overlay(reps[tid], crop.image, ecfg)
            overlay.save(overlay_dir / f"{tid}_overlay_{rec.instance_id}.png")

    if failures:
        print(f"verify-reps: {len(failures)} type(s) failed verification: {', '.join(failures)}")
        return EXIT_VERIFY
    print(f"verify-reps: all {len(reports)} representatives passed")
    return EXIT_OK


# ----- analyze / dont-use -----------------------------------------------------


def cmd_analyze(cfg: RunConfig) -> int:
    manifest = load_manifest(cfg.manifest)
    out_json = cfg.out / "analysis.json"
    if out_json.exists() and not cfg.force:
        print(f"analyze: {out_json} exists, skipping (use --force to redo)")
        return EXIT_OK
    reps = load_representatives(cfg.out / "reps.json")
    counts: dict[str, int] = {}
    for rec in manifest.instances:
        counts[rec.type_id] = counts.get(rec.type_id, 0) + 1
    analysis = analyze_library(
        reps,
        list(manifest.cell_types),
        node=manifest.node.name,
        r=manifest.node.matching_radius,
        instance_counts=counts,
    )
    write_analysis_json(analysis, out_json)
    write_analysis_csv(analysis, cfg.out / "analysis.csv")
    rows = top_k(analysis, min(cfg.top, max(1, len(analysis.pairs)))) if analysis.pairs else []
    (cfg.out / f"top{cfg.top}.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"analyze: {len(analysis.pairs)} valid pairs, mean score {analysis.mean_score:.4f}")
    return EXIT_OK


def cmd_dont_use(cfg: RunConfig) -> int:
    analysis_path = cfg.out / "analysis.json"
    if not analysis_path.is_file():
        print("dont-use: run analyze first (analysis.json missing)")
        return EXIT_DATA
    doc = json.loads(analysis_path.read_text(encoding="utf-8"))
    excluded = set()
    for pair in doc["pairs"]:
        if pair["score"] <= cfg.dont_use_threshold:
            excluded.add(pair["type_a"])
            excluded.add(pair["type_b"])
    listing = sorted(excluded)
    write_dont_use(listing, cfg.out / "dont_use.txt")
    print(f"dont-use: {len(listing)} cell type(s) at threshold {cfg.dont_use_threshold}")
    return EXIT_OK


# ----- detect / eval ----------------------------------------------------------


def _classify_chunk(chunk: list[CellInstance], reps: dict, dcfg: DetectionConfig):
    results = []
    errors = []
    for inst in chunk:
        try:
            cands = candidates_for(reps, inst.type_id)
            results.append((inst.instance_id, classify(inst.vias, inst.type_id, cands, dcfg)))
        except ValueError as exc:
            errors.append({"instance_id": inst.instance_id, "error": str(exc)})
    return results, errors


def _chunked(items: list, n_chunks: int) -> list[list]:
    size = max(1, (len(items) + n_chunks - 1) // n_chunks)
    return [items[i : i + size] for i in range(0, len(items), size)]


def cmd_detect(cfg: RunConfig) -> int:
    manifest = load_manifest(cfg.manifest)
    out_csv = cfg.out / "verdicts.csv"
    if out_csv.exists() and not cfg.force:
        print(f"detect: {out_csv} exists, skipping (use --force to redo)")
        return EXIT_OK
    reps = load_representatives(cfg.out / "reps.json")
    instances = load_via_cache(manifest, cfg.out / "vias.csv")
    worker = partial(_classify_chunk, reps=reps, dcfg=cfg.detection)
    chunks = _map_ordered(worker, _chunked(instances, cfg.workers * 4), cfg.workers)
    verdicts = {}
    errors = []
    for results, errs in chunks:
        errors.extend(errs)
        for iid, verdict in results:
            verdicts[iid] = verdict
    write_verdicts_csv(verdicts, out_csv)
    if errors:
        errors.sort(key=lambda e: e["instance_id"])
        (cfg.out / "detect_errors.json").write_text(
            json.dumps(errors, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        print(f"detect: {len(errors)} instance(s) failed, see detect_errors.json")
        return EXIT_DATA
    flagged = sum(1 for v in verdicts.values() if v.is_flagged(cfg.detection.tie_policy))
    print(f"detect: wrote {out_csv} ({flagged} flagged of {len(verdicts)})")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, truth_path: Path) -> int:
    manifest = load_manifest(cfg.manifest)
    reps = load_representatives(cfg.out / "reps.json")
    instances = load_via_cache(manifest, cfg.out / "vias.csv")
    truth_doc = load_truth(truth_path)
    truth = {iid: entry["true_type"] for iid, entry in truth_doc.items()}

    planted = evaluate_planted(instances, truth, reps, cfg.detection)

    counts: dict[str, int] = {}
    for rec in manifest.instances:
        counts[rec.type_id] = counts.get(rec.type_id, 0) + 1
    analysis = analyze_library(
        reps,
        list(manifest.cell_types),
        node=manifest.node.name,
        r=manifest.node.matching_radius,
        instance_counts=counts,
    )
    by_type = group_by_type(instances)
    pair_reports = []
    for pair in analysis.pairs[: cfg.top]:
        if by_type.get(pair.type_a) and by_type.get(pair.type_b):
            d1, d2 = evaluate_pair(
                pair.type_a, pair.type_b, reps, by_type, cfg.detection
            )
            pair_reports.extend([d1, d2])
    write_eval_reports(planted, pair_reports, cfg.out / "eval.json")
    print(
        f"eval: TP {planted.true_positives}, FN {planted.false_negatives}, "
        f"FP {planted.false_positives}; {len(pair_reports)} pair reports"
    )
    return EXIT_OK


# ----- gen-synthetic ----------------------------------------------------------


def _parse_planted(text: str) -> tuple[int, int, float]:
    try:
        i, j, s = text.split(":")
        return int(i), int(j), float(s)
    except ValueError:
        raise ConfigError(f"bad --planted-pair {text!r}, expected I:J:SCORE") from None


def _parse_swap(text: str) -> tuple[str, str]:
    parts = text.split(":")
    if len(parts) != 2:
        raise ConfigError(f"bad --swap {text!r}, expected CLAIMED:ACTUAL")
    return parts[0], parts[1]


def cmd_gen_synthetic(args) -> int:
    out = Path(args.out)
    if (out / "manifest.json").exists() and not args.force:
        print(f"gen-synthetic: {out / 'manifest.json'} exists, skipping (use --force to redo)")
        return EXIT_OK
    spec_kwargs = {}
    if args.min_separation is not None:
        spec_kwargs["min_separation"] = args.min_separation
    try:
        spec = SynthLibrarySpec(
            seed=args.seed,
            type_count=args.types,
            vias_min=args.vias_min,
            vias_max=args.vias_max,
            planted_pairs=tuple(_parse_planted(p) for p in args.planted_pair),
            **spec_kwargs,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    noise = NoiseSpec(
        jitter_sigma=args.jitter,
        dropout_prob=args.dropout,
        spurious_rate=args.spurious,
        intensity_noise_sigma=args.intensity_noise,
        offset_range=args.offset,
        contrast_margin=args.contrast,
    )
    dataset = gen_dataset(
        spec,
        noise,
        instances_per_type=args.instances_per_type,
        planted_swaps=tuple(_parse_swap(s) for s in args.swap),
        out_dir=out,
    )
    print(
        f"gen-synthetic: {len(dataset.manifest.instances)} instances of "
        f"{len(dataset.library.cell_types)} types in {len(dataset.manifest.tiles)} tile(s) -> {out}"
    )
    return EXIT_OK


# ----- argument parsing --------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(sub):
    sub.add_argument("--config", type=Path, default=None, help="key = value config file")
    sub.add_argument("--manifest", type=Path, default=None)
    sub.add_argument("--out", type=Path, default=None, help="artifact directory")
    sub.add_argument("--workers", type=int, default=None)
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--force", action="store_true", help="redo even if outputs exist")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="viascope", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="detect vias for every instance into vias.csv")
    _add_common(p)
    p.add_argument("--method", choices=["threshold", "persistence"], default=None)

    p = sub.add_parser("build-reps", help="build per-type representatives")
    _add_common(p)

    p = sub.add_parser("verify-reps", help="verify representatives against holdout instances")
    _add_common(p)
    p.add_argument("--rejects", type=Path, default=None, help="type ids to rebuild, one per line")
    p.add_argument("--overlays", action="store_true", help="write overlay PNGs for review")

    p = sub.add_parser("analyze", help="score all valid cell-type pairs")
    _add_common(p)
    p.add_argument("--top", type=int, default=None, help="rows in the top-pairs table")

    p = sub.add_parser("dont-use", help="emit exclusion list from the analysis")
    _add_common(p)
    p.add_argument("--threshold", type=float, default=None, help="max score to exclude")

    p = sub.add_parser("detect", help="classify every instance against its claimed type")
    _add_common(p)
    p.add_argument("--delta", type=float, default=None, help="required score margin to flag")
    p.add_argument("--tie-policy", choices=["flag", "benign"], default=None)

    p = sub.add_parser("eval", help="evaluate against ground-truth substitution labels")
    _add_common(p)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--top", type=int, default=None, help="most-similar pairs to report on")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--tie-policy", choices=["flag", "benign"], default=None)

    p = sub.add_parser("gen-synthetic", help="generate a seeded synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.add_argument("--types", type=int, default=8)
    p.add_argument("--instances-per-type", type=int, default=20)
    p.add_argument("--vias-min", type=int, default=4)
    p.add_argument("--vias-max", type=int, default=16)
    p.add_argument("--planted-pair", action="append", default=[], metavar="I:J:SCORE")
    p.add_argument("--swap", action="append", default=[], metavar="CLAIMED:ACTUAL")
    p.add_argument("--jitter", type=float, default=0.0625)
    p.add_argument("--dropout", type=float, default=0.05)
    p.add_argument("--spurious", type=float, default=0.05)
    p.add_argument("--intensity-noise", type=float, default=2.0)
    p.add_argument("--offset", type=float, default=0.25)
    p.add_argument("--contrast", type=float, default=100.0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-synthetic":
            return cmd_gen_synthetic(args)
        cfg = _build_run_config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        if args.command == "extract":
            return cmd_extract(cfg)
        if args.command == "build-reps":
            return cmd_build_reps(cfg)
        if args.command == "verify-reps":
            return cmd_verify_reps(cfg, args.rejects)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        if args.command == "dont-use":
            return cmd_dont_use(cfg)
        if args.command == "detect":
            return cmd_detect(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.truth)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ManifestError, DegenerateLibraryError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
