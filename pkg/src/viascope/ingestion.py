"""Dataset manifests, instance cropping, and canonical via extraction.

A manifest is a single JSON document describing the technology node, the
tile images, the cell-type catalog, and the instance placements. Extracted
via sets live in local cell coordinates anchored at the un-margined
bounding-box corner, so neighbor vias picked up through the safety margin
carry negative or beyond-width coordinates and are easy to recognize
downstream.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .extraction import ExtractionConfig, GrayImage, detect_vias, with_origin
from .geometry import MATCHING_RADIUS, NodeConfig, Orientation, ViaSet, canonicalize


class ManifestError(ValueError):
    """Base class for manifest loading problems."""


class ManifestSchemaError(ManifestError):
    """The document does not match the expected structure."""


class DanglingReferenceError(ManifestError):
    """An instance references a tile or cell type that does not exist."""


@dataclass(frozen=True)
class CellTypeInfo:
    """Catalog entry for one cell type.

    Drive-strength variants of the same logic share one ``function_class``,
    so they never count as an interchangeable pair. ``width`` and ``height``
    are in unit multiples.
    """

    type_id: str
    function_class: str
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ManifestSchemaError(
                f"cell type {self.type_id!r}: width and height must be >= 1"
            )


@dataclass(frozen=True)
class TileRef:
    tile_id: str
    image_path: str


@dataclass(frozen=True)
class InstanceRecord:
    instance_id: str
    type_id: str
    tile_id: str
    bbox: tuple[int, int, int, int]  # x, y, w, h in tile pixels
    orientation: Orientation


@dataclass(frozen=True)
class CellInstance:
    """One cell instance's vias in canonical orientation, local unit coords."""

    instance_id: str
    type_id: str
    vias: ViaSet


@dataclass(frozen=True)
class DatasetManifest:
    node: NodeConfig
    tiles: tuple[TileRef, ...]
    cell_types: tuple[CellTypeInfo, ...]
    instances: tuple[InstanceRecord, ...]
    base_dir: Path = field(default_factory=Path, compare=False)

    def __post_init__(self):
        tiles = {t.tile_id: t for t in self.tiles}
        types = {c.type_id: c for c in self.cell_types}
        if len(tiles) != len(self.tiles):
            raise ManifestSchemaError("duplicate tile_id in manifest")
        if len(types) != len(self.cell_types):
            raise ManifestSchemaError("duplicate type_id in manifest")
        seen = set()
        for rec in self.instances:
            if rec.instance_id in seen:
                raise ManifestSchemaError(f"duplicate instance_id {rec.instance_id!r}")
            seen.add(rec.instance_id)
            if rec.tile_id not in tiles:
                raise DanglingReferenceError(
                    f"instance {rec.instance_id!r} references unknown tile {rec.tile_id!r}"
                )
            if rec.type_id not in types:
                raise DanglingReferenceError(
                    f"instance {rec.instance_id!r} references unknown cell type {rec.type_id!r}"
                )
        object.__setattr__(self, "_tiles_by_id", tiles)
        object.__setattr__(self, "_types_by_id", types)

    def tile(self, tile_id: str) -> TileRef:
        return self._tiles_by_id[tile_id]

    def tile_path(self, tile_id: str) -> Path:
        return self.base_dir / self._tiles_by_id[tile_id].image_path

    def cell_type(self, type_id: str) -> CellTypeInfo:
        return self._types_by_id[type_id]

    def instances_of(self, type_id: str) -> list[InstanceRecord]:
        return [r for r in self.instances if r.type_id == type_id]


def _expect(obj: dict, key: str, kind, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ManifestSchemaError(f"{where}: missing key {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ManifestSchemaError(f"{where}: key {key!r} must be {names}")
    return value


def manifest_from_dict(doc: dict, base_dir: Path | str = ".") -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ManifestSchemaError("manifest root must be a JSON object")
    node_doc = _expect(doc, "node", dict, "manifest")
    node = NodeConfig(
        name=_expect(node_doc, "name", str, "node"),
        unit_length_nm=float(_expect(node_doc, "unit_length_nm", (int, float), "node")),
        pixels_per_unit=float(_expect(node_doc, "pixels_per_unit", (int, float), "node")),
        matching_radius=float(node_doc.get("matching_radius", MATCHING_RADIUS)),
    )
    tiles = []
    for t in _expect(doc, "tiles", list, "manifest"):
        tiles.append(
            TileRef(
                tile_id=_expect(t, "tile_id", str, "tile"),
                image_path=_expect(t, "image_path", str, "tile"),
            )
        )
    cell_types = []
    for c in _expect(doc, "cell_types", list, "manifest"):
        cell_types.append(
            CellTypeInfo(
                type_id=_expect(c, "type_id", str, "cell_type"),
                function_class=_expect(c, "function_class", str, "cell_type"),
                width=int(_expect(c, "width", int, "cell_type")),
                height=int(_expect(c, "height", int, "cell_type")),
            )
        )
    instances = []
    for r in _expect(doc, "instances", list, "manifest"):
        iid = _expect(r, "instance_id", str, "instance")
        bbox = _expect(r, "bbox", list, f"instance {iid!r}")
        if len(bbox) != 4 or not all(isinstance(v, int) for v in bbox):
            raise ManifestSchemaError(f"instance {iid!r}: bbox must be [x, y, w, h] integers")
        orient = _expect(r, "orientation", str, f"instance {iid!r}")
        try:
            orientation = Orientation[orient]
        except KeyError:
            raise ManifestSchemaError(
                f"instance {iid!r}: unknown orientation {orient!r}"
            ) from None
        instances.append(
            InstanceRecord(
                instance_id=iid,
                type_id=_expect(r, "type_id", str, f"instance {iid!r}"),
                tile_id=_expect(r, "tile_id", str, f"instance {iid!r}"),
                bbox=tuple(bbox),
                orientation=orientation,
            )
        )
    return DatasetManifest(
        node=node,
        tiles=tuple(tiles),
        cell_types=tuple(cell_types),
        instances=tuple(instances),
        base_dir=Path(base_dir),
    )


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "node": {
            "name": manifest.node.name,
            "unit_length_nm": manifest.node.unit_length_nm,
            "matching_radius": manifest.node.matching_radius,
            "pixels_per_unit": manifest.node.pixels_per_unit,
        },
        "tiles": [{"tile_id": t.tile_id, "image_path": t.image_path} for t in manifest.tiles],
        "cell_types": [
            {
                "type_id": c.type_id,
                "function_class": c.function_class,
                "width": c.width,
                "height": c.height,
            }
            for c in manifest.cell_types
        ],
        "instances": [
            {
                "instance_id": r.instance_id,
                "type_id": r.type_id,
                "tile_id": r.tile_id,
                "bbox": list(r.bbox),
                "orientation": r.orientation.name,
            }
            for r in manifest.instances
        ],
    }


def load_manifest(path) -> DatasetManifest:
    """Load and validate a manifest; paths inside resolve relative to it."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestSchemaError(f"{path}: invalid JSON ({exc})") from exc
    return manifest_from_dict(doc, base_dir=path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


@dataclass(frozen=True)
class Crop:
    """A margin-expanded sub-image plus its origin in tile pixels."""

    image: GrayImage
    origin: tuple[int, int]


def crop_instance(tile: GrayImage, record: InstanceRecord, margin: int) -> Crop:
    """Cut the instance bounding box expanded by ``margin``, clamped to the
    tile. The effective origin is recorded so pixel-to-unit mapping stays
    exact after clamping."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    x, y, w, h = record.bbox
    if w <= 0 or h <= 0:
        raise ValueError(f"instance {record.instance_id!r}: empty bbox")
    if x + w <= 0 or y + h <= 0 or x >= tile.width or y >= tile.height:
        raise ValueError(f"instance {record.instance_id!r}: bbox fully outside tile")
    x0 = max(0, x - margin)
    y0 = max(0, y - margin)
    x1 = min(tile.width, x + w + margin)
    y1 = min(tile.height, y + h + margin)
    return Crop(GrayImage(tile.data[y0:y1, x0:x1].copy()), (x0, y0))


class TileCache:
    """Read-only image cache shared across per-instance extraction."""

    def __init__(self):
        self._images: dict[Path, GrayImage] = {}

    def get(self, path) -> GrayImage:
        path = Path(path)
        if path not in self._images:
            self._images[path] = GrayImage.load(path)
        return self._images[path]


def default_margin_px(node: NodeConfig) -> int:
    """Safety margin of one unit, in pixels."""
    return int(round(node.pixels_per_unit))


def extract_instance(
    manifest: DatasetManifest,
    record: InstanceRecord,
    extraction_cfg: ExtractionConfig,
    margin_px: int | None = None,
    tiles: TileCache | None = None,
) -> CellInstance:
    """Crop, detect, and canonicalize one instance.

    The returned vias are in local cell coordinates (origin at the
    un-margined bbox corner) with the placement orientation undone using the
    cell type's width/height box.
    """
    node = manifest.node
    margin = default_margin_px(node) if margin_px is None else margin_px
    tile_img = (tiles or TileCache()).get(manifest.tile_path(record.tile_id))
    crop = crop_instance(tile_img, record, margin)
    cfg = with_origin(
        extraction_cfg,
        (record.bbox[0] - crop.origin[0], record.bbox[1] - crop.origin[1]),
        pixels_per_unit=node.pixels_per_unit,
    )
    vias = detect_vias(crop.image, cfg, source=record.instance_id)
    ct = manifest.cell_type(record.type_id)
    tol = margin / node.pixels_per_unit + node.matching_radius
    canonical = canonicalize(vias, record.orientation, ct.width, ct.height, tolerance=tol)
    return CellInstance(record.instance_id, record.type_id, canonical)


def write_via_cache(instances: list[CellInstance], path) -> None:
    """Write extracted via sets as CSV: one row per via, 6-decimal coords."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "type_id", "x", "y"])
        for inst in instances:
            for x, y in inst.vias.points:
                writer.writerow([inst.instance_id, inst.type_id, f"{x:.6f}", f"{y:.6f}"])


def load_via_cache(manifest: DatasetManifest, path) -> list[CellInstance]:
    """Rebuild CellInstances from a via cache.

    Every manifest instance is returned; instances without rows come back
    with an empty via set. Rows naming unknown instances are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"via cache not found: {path}")
    known = {r.instance_id: r.type_id for r in manifest.instances}
    points: dict[str, list[tuple[float, float]]] = {}
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["instance_id", "type_id", "x", "y"]:
            raise ManifestSchemaError(f"{path}: unexpected via cache header {header}")
        for row in reader:
            if len(row) != 4:
                raise ManifestSchemaError(f"{path}: malformed row {row}")
            iid = row[0]
            if iid not in known:
                raise DanglingReferenceError(f"{path}: unknown instance {iid!r}")
            points.setdefault(iid, []).append((float(row[2]), float(row[3])))
    return [
        CellInstance(r.instance_id, r.type_id, ViaSet(points.get(r.instance_id, ()), r.instance_id))
        for r in manifest.instances
    ]


def group_by_type(instances: list[CellInstance]) -> dict[str, list[CellInstance]]:
    grouped: dict[str, list[CellInstance]] = {}
    for inst in instances:
        grouped.setdefault(inst.type_id, []).append(inst)
    return grouped
