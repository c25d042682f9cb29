"""Manifest handling, cropping, canonical extraction, and the via cache."""

import json

import numpy as np
import pytest

from viascope.extraction import ExtractionConfig, GrayImage
from viascope.geometry import MATCHING_RADIUS, Orientation, ViaSet, align
from viascope.ingestion import (
    CellInstance,
    DanglingReferenceError,
    InstanceRecord,
    ManifestSchemaError,
    TileCache,
    crop_instance,
    extract_instance,
    group_by_type,
    load_manifest,
    load_via_cache,
    manifest_from_dict,
    manifest_to_dict,
    save_manifest,
    write_via_cache,
)
from viascope.synthetic import NoiseSpec, render_instance
from viascope.ingestion import CellTypeInfo


def manifest_doc(n_tiles=2):
    return {
        "node": {"name": "synth", "unit_length_nm": 100.0, "pixels_per_unit": 10.0},
        "tiles": [
            {"tile_id": f"t{i}", "image_path": f"tiles/t{i}.png"} for i in range(n_tiles)
        ],
        "cell_types": [
            {"type_id": "A", "function_class": "XOR", "width": 4, "height": 3},
            {"type_id": "B", "function_class": "XNOR", "width": 4, "height": 3},
        ],
        "instances": [
            {
                "instance_id": "i0",
                "type_id": "A",
                "tile_id": "t0",
                "bbox": [10, 10, 40, 30],
                "orientation": "R0",
            },
            {
                "instance_id": "i1",
                "type_id": "B",
                "tile_id": "t1" if n_tiles > 1 else "t0",
                "bbox": [5, 5, 40, 30],
                "orientation": "MX_R180",
            },
        ],
    }


class TestManifest:
    def test_loads_two_tiles(self):
        m = manifest_from_dict(manifest_doc())
        assert len(m.tiles) == 2
        assert m.cell_type("A").function_class == "XOR"

    def test_dangling_tile_names_offender(self):
        doc = manifest_doc()
        doc["instances"][0]["tile_id"] = "ghost"
        with pytest.raises(DanglingReferenceError, match="ghost"):
            manifest_from_dict(doc)

    def test_dangling_type_names_offender(self):
        doc = manifest_doc()
        doc["instances"][1]["type_id"] = "Z9"
        with pytest.raises(DanglingReferenceError, match="Z9"):
            manifest_from_dict(doc)

    def test_duplicate_instance_rejected(self):
        doc = manifest_doc()
        doc["instances"].append(dict(doc["instances"][0]))
        with pytest.raises(ManifestSchemaError, match="duplicate"):
            manifest_from_dict(doc)

    def test_bad_orientation_rejected(self):
        doc = manifest_doc()
        doc["instances"][0]["orientation"] = "R90"
        with pytest.raises(ManifestSchemaError, match="R90"):
            manifest_from_dict(doc)

    def test_missing_key_rejected(self):
        doc = manifest_doc()
        del doc["instances"][0]["bbox"]
        with pytest.raises(ManifestSchemaError, match="bbox"):
            manifest_from_dict(doc)

    def test_round_trip_identical(self, tmp_path):
        m = manifest_from_dict(manifest_doc())
        save_manifest(m, tmp_path / "m.json")
        reloaded = load_manifest(tmp_path / "m.json")
        assert manifest_to_dict(reloaded) == manifest_to_dict(m)
        # serialized form is stable too
        save_manifest(reloaded, tmp_path / "m2.json")
        assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        (tmp_path / "bad.json").write_text("{nope")
        with pytest.raises(ManifestSchemaError):
            load_manifest(tmp_path / "bad.json")


class TestCrop:
    def tile(self):
        return GrayImage(np.arange(50 * 80, dtype=np.int64).reshape(50, 80) % 251)

    def record(self, bbox):
        return InstanceRecord("i", "A", "t", bbox, Orientation.R0)

    def test_exact_crop_without_margin(self):
        crop = crop_instance(self.tile(), self.record((10, 10, 20, 20)), 0)
        assert (crop.image.width, crop.image.height) == (20, 20)
        assert crop.origin == (10, 10)

    def test_corner_clamped(self):
        crop = crop_instance(self.tile(), self.record((0, 0, 10, 10)), 5)
        assert crop.origin == (0, 0)
        assert (crop.image.width, crop.image.height) == (15, 15)

    def test_margin_expands_both_sides(self):
        crop = crop_instance(self.tile(), self.record((10, 10, 20, 20)), 3)
        assert crop.origin == (7, 7)
        assert (crop.image.width, crop.image.height) == (26, 26)

    def test_pixels_preserved(self):
        tile = self.tile()
        crop = crop_instance(tile, self.record((10, 5, 20, 20)), 2)
        assert np.array_equal(crop.image.data, tile.data[3:27, 8:32])

    def test_fully_outside_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            crop_instance(self.tile(), self.record((100, 10, 20, 20)), 3)

    def test_negative_margin_rejected(self):
        with pytest.raises(ValueError):
            crop_instance(self.tile(), self.record((10, 10, 20, 20)), -1)


def synth_single_cell_manifest(tmp_path, orientation, pattern, noise=NoiseSpec()):
    """Render one instance into a one-tile dataset on disk."""
    ct = CellTypeInfo("A", "XOR", 6, 4)
    rng = np.random.default_rng(11)
    rendered = render_instance(ViaSet(pattern), ct, noise, orientation, rng, 10.0)
    tile_path = tmp_path / "tiles" / "t0.png"
    rendered.image.save(tile_path)
    doc = {
        "node": {"name": "synth", "unit_length_nm": 100.0, "pixels_per_unit": 10.0},
        "tiles": [{"tile_id": "t0", "image_path": "tiles/t0.png"}],
        "cell_types": [
            {"type_id": "A", "function_class": "XOR", "width": 6, "height": 4}
        ],
        "instances": [
            {
                "instance_id": "i0",
                "type_id": "A",
                "tile_id": "t0",
                "bbox": list(rendered.bbox),
                "orientation": orientation.name,
            }
        ],
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return load_manifest(path)


PATTERN = np.array([(1.0, 1.0), (2.5, 1.2), (4.2, 2.0), (1.5, 3.0), (5.0, 3.2)])


class TestExtractInstance:
    def test_clean_instance_recovers_pattern(self, tmp_path):
        m = synth_single_cell_manifest(tmp_path, Orientation.R0, PATTERN)
        inst = extract_instance(m, m.instances[0], ExtractionConfig())
        assert len(inst.vias) == len(PATTERN)
        assert np.allclose(inst.vias.points, ViaSet(PATTERN).points, atol=0.05)

    def test_orientation_consistency(self, tmp_path):
        # The same pattern rendered in all four orientations canonicalizes to
        # the same via set, within localization tolerance r/4.
        canonicals = []
        for orientation in Orientation:
            sub = tmp_path / orientation.name
            sub.mkdir()
            m = synth_single_cell_manifest(sub, orientation, PATTERN)
            inst = extract_instance(m, m.instances[0], ExtractionConfig())
            canonicals.append(inst.vias)
        for vs in canonicals[1:]:
            assert len(vs) == len(canonicals[0])
            res = align(vs, canonicals[0], MATCHING_RADIUS)
            assert res.match_count == len(vs)
            assert np.hypot(*res.translation) < MATCHING_RADIUS / 4

    def test_empty_filler_cell(self, tmp_path):
        m = synth_single_cell_manifest(tmp_path, Orientation.R0, np.empty((0, 2)))
        inst = extract_instance(m, m.instances[0], ExtractionConfig())
        assert len(inst.vias) == 0

    def test_source_tagged_with_instance_id(self, tmp_path):
        m = synth_single_cell_manifest(tmp_path, Orientation.R0, PATTERN)
        inst = extract_instance(m, m.instances[0], ExtractionConfig(), tiles=TileCache())
        assert inst.vias.source == "i0"


class TestViaCache:
    def make_instances(self):
        return [
            CellInstance("i0", "A", ViaSet([(0.1234564, 1.25), (2.5, 0.75)], "i0")),
            CellInstance("i1", "B", ViaSet((), "i1")),
            CellInstance("i2", "A", ViaSet([(4.0, 2.0)], "i2")),
        ]

    def manifest(self):
        doc = manifest_doc()
        doc["instances"] = [
            {"instance_id": f"i{k}", "type_id": t, "tile_id": "t0",
             "bbox": [0, 0, 10, 10], "orientation": "R0"}
            for k, t in enumerate(["A", "B", "A"])
        ]
        return manifest_from_dict(doc)

    def test_round_trip(self, tmp_path):
        instances = self.make_instances()
        write_via_cache(instances, tmp_path / "vias.csv")
        loaded = load_via_cache(self.manifest(), tmp_path / "vias.csv")
        assert [i.instance_id for i in loaded] == ["i0", "i1", "i2"]
        assert len(loaded[1].vias) == 0
        for orig, back in zip(instances, loaded):
            if len(orig.vias):
                assert np.allclose(back.vias.points, orig.vias.points, atol=5e-7)

    def test_header_and_decimals(self, tmp_path):
        write_via_cache(self.make_instances(), tmp_path / "vias.csv")
        lines = (tmp_path / "vias.csv").read_text().splitlines()
        assert lines[0] == "instance_id,type_id,x,y"
        assert lines[1] == "i0,A,0.123456,1.250000"

    def test_unknown_instance_rejected(self, tmp_path):
        (tmp_path / "vias.csv").write_text(
            "instance_id,type_id,x,y\nghost,A,1.0,1.0\n"
        )
        with pytest.raises(DanglingReferenceError, match="ghost"):
            load_via_cache(self.manifest(), tmp_path / "vias.csv")

    def test_missing_cache(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_via_cache(self.manifest(), tmp_path / "vias.csv")

    def test_group_by_type(self):
        grouped = group_by_type(self.make_instances())
        assert sorted(grouped) == ["A", "B"]
        assert [i.instance_id for i in grouped["A"]] == ["i0", "i2"]
