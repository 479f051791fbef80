"""Manifest loading, benchmark parsing, preprocessing, iteration order."""

import json

import numpy as np
import pytest
from PIL import Image

from cirmask.backbone import StubBackbone
from cirmask.data import (ingest_manifest, iter_batches, load_pairs,
                          load_triplets, preprocess_image)
from cirmask.errors import ConfigError, InvalidInputError
from cirmask.fixtures import generate_pair_fixture, render_shape
from cirmask.tagging import get_tagger


def write_image(path, size=8, seed=0):
    rng = np.random.default_rng(seed)
    Image.fromarray(rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)).save(path)


class TestLoadPairs:
    def test_all_readable(self, tmp_path):
        for i in range(3):
            write_image(tmp_path / f"{i}.png", seed=i)
        manifest = tmp_path / "m.tsv"
        manifest.write_text("\n".join(f"caption {i}\t{i}.png" for i in range(3)) + "\n")
        ds = load_pairs(manifest)
        assert len(ds) == 3 and not ds.drops

    def test_broken_path_counted(self, tmp_path):
        write_image(tmp_path / "0.png")
        write_image(tmp_path / "2.png")
        manifest = tmp_path / "m.tsv"
        manifest.write_text("a\t0.png\nb\tmissing.png\nc\t2.png\n")
        ds = load_pairs(manifest)
        assert len(ds) == 2
        assert len(ds.drops) == 1
        assert ds.drops[0].locator == "missing.png"
        assert "exist" in ds.drops[0].reason

    def test_limit(self, tmp_path):
        for i in range(5):
            write_image(tmp_path / f"{i}.png", seed=i)
        manifest = tmp_path / "m.tsv"
        manifest.write_text("\n".join(f"c{i}\t{i}.png" for i in range(5)) + "\n")
        assert len(load_pairs(manifest, limit=2)) == 2
        assert len(load_pairs(manifest, limit=250000)) == 5

    def test_missing_manifest_fatal(self):
        with pytest.raises(ConfigError):
            load_pairs("/nonexistent/manifest.tsv")

    def test_malformed_lines_counted(self, tmp_path):
        write_image(tmp_path / "0.png")
        manifest = tmp_path / "m.tsv"
        manifest.write_text("no separator line\nok\t0.png\n\t0.png\n")
        ds = load_pairs(manifest)
        assert len(ds) == 1 and len(ds.drops) == 2


class TestLoadTriplets:
    def _cirr_dir(self, tmp_path):
        root = tmp_path / "cirr"
        root.mkdir()
        (root / "images").mkdir()
        for name in ("img-a", "img-b", "img-c"):
            write_image(root / "images" / f"{name}.png")
        caps = [
            {"pairid": 1, "reference": "img-a", "target_hard": "img-b",
             "caption": "make it red",
             "img_set": {"id": 0, "members": ["img-a", "img-b", "img-c",
                                              "img-a", "img-b", "img-c"]}},
            {"pairid": 2, "reference": "img-b", "target_hard": "img-c",
             "caption": "add a tree",
             "img_set": {"id": 1, "members": ["img-c", "img-b", "img-a",
                                              "img-c", "img-b", "img-a"]}},
        ]
        splits = {name: f"images/{name}.png" for name in ("img-a", "img-b", "img-c")}
        (root / "cap.rc2.val.json").write_text(json.dumps(caps))
        (root / "split.rc2.val.json").write_text(json.dumps(splits))
        return root

    def test_cirr_layout(self, tmp_path):
        root = self._cirr_dir(tmp_path)
        triplets, gallery = load_triplets(root, "cirr", "val")
        assert len(triplets) == 2
        assert sorted(gallery) == ["img-a", "img-b", "img-c"]
        first = triplets[0]
        assert first.target_id == "img-b"
        assert first.reference_id == "img-a"
        assert first.query_text == "make it red"
        assert len(first.subset_ids) == 6

    def test_fashioniq_layout(self, tmp_path):
        root = tmp_path / "fiq"
        (root / "images").mkdir(parents=True)
        for name in ("d1", "d2"):
            write_image(root / "images" / f"{name}.png")
        (root / "split.dress.val.json").write_text(json.dumps(["d1", "d2"]))
        (root / "cap.dress.val.json").write_text(json.dumps([
            {"target": "d2", "candidate": "d1",
             "captions": ["is red", "has long sleeves"]},
        ]))
        triplets, gallery = load_triplets(root, "fashioniq", "val", category="dress")
        assert len(triplets) == 1
        assert triplets[0].category == "dress"
        assert triplets[0].query_text == "is red and has long sleeves"
        assert triplets[0].target_id == "d2"
        assert sorted(gallery) == ["d1", "d2"]

    def test_fixture_layout(self, triplet_fixture_dir):
        triplets, gallery = load_triplets(triplet_fixture_dir, "fixture")
        assert len(triplets) == 24
        assert all(t.target_id in gallery for t in triplets)
        assert all(len(t.subset_ids) == 6 for t in triplets)
        assert all(t.target_id in t.subset_ids for t in triplets)

    def test_malformed_json_names_line(self, tmp_path):
        root = tmp_path / "cirr"
        root.mkdir()
        (root / "cap.rc2.val.json").write_text('[{"broken": }]')
        (root / "split.rc2.val.json").write_text("{}")
        with pytest.raises(ConfigError, match="line"):
            load_triplets(root, "cirr", "val")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigError):
            load_triplets(tmp_path, "coco")


class TestPreprocess:
    def test_resize_to_backbone_resolution(self, tmp_path, stub):
        path = tmp_path / "big.png"
        write_image(path, size=48)
        out = preprocess_image(path, stub)
        assert out.shape == (8, 8, 3)
        assert out.dtype == np.float32

    def test_exact_size_only_normalized(self, stub):
        raw = np.random.default_rng(0).integers(0, 255, size=(8, 8, 3), dtype=np.uint8)
        out = preprocess_image(Image.fromarray(raw), stub)
        expected = (raw.astype(np.float32) / 255.0 - 0.5) / 0.5
        assert np.allclose(out, expected, atol=1e-6)

    def test_non_square_center_crop(self, tmp_path, stub):
        Image.new("RGB", (32, 16), (255, 0, 0)).save(tmp_path / "wide.png")
        out = preprocess_image(tmp_path / "wide.png", stub)
        assert out.shape == (8, 8, 3)

    def test_undecodable_raises(self, tmp_path, stub):
        bad = tmp_path / "broken.png"
        bad.write_bytes(b"this is not an image")
        with pytest.raises(InvalidInputError):
            preprocess_image(bad, stub)


class TestIterationOrder:
    def test_deterministic_given_seed_and_epoch(self, tmp_path):
        generate_pair_fixture(tmp_path, count=20, resolution=8, seed=0)
        ds = load_pairs(tmp_path / "manifest.tsv")
        a = [r.caption for batch in iter_batches(ds, 4, seed=7, epoch=0) for r in batch]
        b = [r.caption for batch in iter_batches(ds, 4, seed=7, epoch=0) for r in batch]
        c = [r.caption for batch in iter_batches(ds, 4, seed=7, epoch=1) for r in batch]
        d = [r.caption for batch in iter_batches(ds, 4, seed=8, epoch=0) for r in batch]
        assert a == b
        assert a != c
        assert a != d
        assert sorted(a) == sorted(c)


class TestFixtureGenerator:
    def test_deterministic(self, tmp_path):
        m1 = generate_pair_fixture(tmp_path / "a", count=6, resolution=8, seed=5)
        m2 = generate_pair_fixture(tmp_path / "b", count=6, resolution=8, seed=5)
        assert m1.read_text() == m2.read_text()
        img1 = np.asarray(Image.open(tmp_path / "a/images/00000.png"))
        img2 = np.asarray(Image.open(tmp_path / "b/images/00000.png"))
        assert np.array_equal(img1, img2)

    def test_every_caption_has_a_leading_shape_noun(self, tmp_path, stub):
        from cirmask.fixtures import SHAPES
        from cirmask.masking import select_first_noun
        generate_pair_fixture(tmp_path, count=40, resolution=8, seed=11)
        ds = load_pairs(tmp_path / "manifest.tsv")
        tagger = get_tagger()
        for record in ds.records:
            removed = select_first_noun(record.caption,
                                        stub.tokenize(record.caption), tagger)
            assert removed.word in SHAPES

    def test_render_shapes_distinct(self):
        circle = render_shape("circle", "red", "gray", 8)
        square = render_shape("square", "red", "gray", 8)
        assert circle.shape == (8, 8, 3)
        assert not np.array_equal(circle, square)


class TestIngest:
    def test_local_copy_and_failure_counts(self, tmp_path):
        write_image(tmp_path / "ok.png")
        manifest = tmp_path / "in.tsv"
        manifest.write_text("first\tok.png\nsecond\tmissing.png\n")
        out = tmp_path / "out.tsv"
        counts = ingest_manifest(manifest, out, cache_dir=tmp_path / "cache")
        assert counts["copied"] == 1 and counts["failed"] == 1
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 1
        cached = lines[0].split("\t")[1]
        assert cached.endswith(".img")
        ds_ready = load_pairs(out)
        assert len(ds_ready) == 1

    def test_rerun_uses_cache(self, tmp_path):
        write_image(tmp_path / "ok.png")
        manifest = tmp_path / "in.tsv"
        manifest.write_text("first\tok.png\n")
        cache = tmp_path / "cache"
        ingest_manifest(manifest, tmp_path / "out1.tsv", cache_dir=cache)
        counts = ingest_manifest(manifest, tmp_path / "out2.tsv", cache_dir=cache)
        assert counts["cached"] == 1 and counts["copied"] == 0
