import json

import numpy as np
import pytest
import torch
from PIL import Image

from zsad.data import (
    DatasetManifest,
    ManifestEntry,
    PreprocessSpec,
    export_overlay,
    export_results,
    load_mask,
    preprocess,
    scan_dataset,
    validation_report,
)
from zsad.errors import DataError
from zsad.synthetic import make_synthetic_dataset


def write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


class TestScanDataset:
    def test_synthetic_mvtec_layout(self, tmp_path):
        manifest = make_synthetic_dataset(tmp_path / "data", n_images=8, seed=3)
        assert len(manifest.entries) == 8
        labels = sorted(e.label for e in manifest.entries)
        assert labels == [0, 0, 0, 0, 1, 1, 1, 1]
        for entry in manifest.entries:
            if entry.label == 1:
                assert entry.mask_path is not None
                assert entry.flagged is None
            else:
                assert entry.mask_path is None
        assert not manifest.localization_only

    def test_missing_root_rejected(self, tmp_path):
        with pytest.raises(DataError, match="does not exist"):
            scan_dataset(tmp_path / "nope")

    def test_empty_root_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(DataError, match="no images"):
            scan_dataset(tmp_path / "empty")

    def test_anomalous_without_mask_flagged(self, tmp_path):
        root = tmp_path / "ds"
        write_png(root / "cat" / "test" / "crack" / "000.png", np.zeros((8, 8)))
        manifest = scan_dataset(root)
        assert manifest.entries[0].flagged == "anomalous image without mask"
        assert validation_report(manifest) == [
            f"{manifest.entries[0].image_path}: anomalous image without mask"]
        assert manifest.localization_only

    def test_flat_with_masks_layout(self, tmp_path):
        root = tmp_path / "widgets"
        write_png(root / "good" / "a.png", np.zeros((8, 8)))
        write_png(root / "bad" / "b.png", np.full((8, 8), 200))
        write_png(root / "masks" / "b.png", np.full((8, 8), 255))
        manifest = scan_dataset(root, layout="flat-with-masks")
        assert [e.label for e in manifest.entries] == [0, 1]
        assert manifest.entries[1].mask_path.endswith("masks/b.png")
        assert all(e.category == "widgets" for e in manifest.entries)

    def test_unknown_layout_rejected(self, tmp_path):
        (tmp_path / "x").mkdir()
        with pytest.raises(DataError, match="unknown layout"):
            scan_dataset(tmp_path / "x", layout="exotic")


class TestManifestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        manifest = DatasetManifest("demo", [
            ManifestEntry("a.png", "cat", "test", 0),
            ManifestEntry("b.png", "cat", "test", 1, mask_path="m.png"),
            ManifestEntry("c.png", "cat", "train", 1, flagged="anomalous image without mask"),
        ])
        path = tmp_path / "manifest.jsonl"
        manifest.save(path)
        loaded = DatasetManifest.load(path)
        assert loaded == manifest

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(DataError, match="empty"):
            DatasetManifest.load(path)

    def test_headerless_file_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"image_path": "a.png"}) + "\n")
        with pytest.raises(DataError, match="header"):
            DatasetManifest.load(path)


class TestPreprocess:
    def test_output_shape_and_original_size(self, tmp_path):
        path = tmp_path / "img.png"
        write_png(path, np.random.default_rng(0).integers(0, 255, (20, 30, 3)))
        spec = PreprocessSpec(resize=(16, 16))
        tensor, original = preprocess(path, spec)
        assert tensor.shape == (3, 16, 16)
        assert tensor.dtype == torch.float32
        assert original == (20, 30)

    def test_normalization_values(self):
        image = Image.new("RGB", (4, 4), (255, 255, 255))
        spec = PreprocessSpec(resize=(4, 4), mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
        tensor, _ = preprocess(image, spec)
        assert torch.allclose(tensor, torch.full((3, 4, 4), 2.0))

    def test_undecodable_image_rejected(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"not an image")
        with pytest.raises(DataError, match="cannot decode"):
            preprocess(path, PreprocessSpec())


class TestLoadMask:
    def test_binarization(self, tmp_path):
        path = tmp_path / "m.png"
        write_png(path, np.array([[0, 255], [127, 128]]))
        mask = load_mask(path, (2, 2))
        assert mask.tolist() == [[0.0, 1.0], [0.0, 1.0]]

    def test_nearest_resize_stays_binary(self, tmp_path):
        path = tmp_path / "m.png"
        rng = np.random.default_rng(2)
        write_png(path, rng.choice([0, 255], size=(9, 9)))
        mask = load_mask(path, (32, 32))
        assert set(mask.unique().tolist()) <= {0.0, 1.0}
        assert mask.shape == (32, 32)


class TestExportResults:
    def report(self):
        return {
            "dataset": "demo",
            "categories": {"a": {"image_auroc": 1.0, "pixel_aupro": None}},
            "mean": {"image_auroc": 1.0, "pixel_aupro": None},
            "footnotes": {"pixel_aupro": ["a"]},
        }

    def test_records_and_explicit_nulls(self, tmp_path):
        path = export_results(self.report(), tmp_path, metadata={"seed": 111})
        records = [json.loads(l) for l in path.read_text().splitlines()]
        assert records[0] == {"record": "metadata", "seed": 111}
        metric_rows = [r for r in records if r["record"] == "metric"]
        by_key = {(r["category"], r["metric"]): r["value"] for r in metric_rows}
        assert by_key[("a", "image_auroc")] == 1.0
        assert by_key[("a", "pixel_aupro")] is None
        assert by_key[("__mean__", "image_auroc")] == 1.0
        footnotes = [r for r in records if r["record"] == "footnote"]
        assert footnotes == [{"record": "footnote", "dataset": "demo",
                              "metric": "pixel_aupro", "excluded_categories": ["a"]}]

    def test_deterministic_bytes(self, tmp_path):
        p1 = export_results(self.report(), tmp_path / "one", metadata={"seed": 1})
        p2 = export_results(self.report(), tmp_path / "two", metadata={"seed": 1})
        assert p1.read_bytes() == p2.read_bytes()


class TestExportOverlay:
    def test_zero_map_reproduces_input(self, tmp_path):
        rng = np.random.default_rng(5)
        base = rng.integers(0, 255, (10, 10, 3)).astype(np.uint8)
        image = Image.fromarray(base)
        out = export_overlay(image, np.zeros((10, 10)), tmp_path / "o.png")
        assert np.array_equal(np.asarray(Image.open(out)), base)

    def test_mask_edge_drawn_magenta(self, tmp_path):
        image = Image.new("RGB", (8, 8), (10, 10, 10))
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:6, 2:6] = True
        out = export_overlay(image, np.zeros((8, 8)), tmp_path / "o.png", mask=mask)
        pixels = np.asarray(Image.open(out))
        assert tuple(pixels[2, 2]) == (255, 0, 255)  # border of the region
        assert tuple(pixels[0, 0]) == (10, 10, 10)  # background untouched

    def test_out_of_range_map_rejected(self, tmp_path):
        image = Image.new("RGB", (4, 4))
        with pytest.raises(DataError, match=r"\[0, 1\]"):
            export_overlay(image, np.full((4, 4), 1.5), tmp_path / "o.png")

    def test_shape_mismatch_rejected(self, tmp_path):
        image = Image.new("RGB", (4, 4))
        with pytest.raises(DataError, match="does not match"):
            export_overlay(image, np.zeros((5, 5)), tmp_path / "o.png")

    def test_deterministic_output(self, tmp_path):
        rng = np.random.default_rng(8)
        image = Image.fromarray(rng.integers(0, 255, (12, 12, 3)).astype(np.uint8))
        amap = rng.random((12, 12))
        p1 = export_overlay(image, amap, tmp_path / "a.png")
        p2 = export_overlay(image, amap, tmp_path / "b.png")
        assert p1.read_bytes() == p2.read_bytes()
