import numpy as np
import pytest
from PIL import Image

from usgen import dataset
from usgen.dataset import (AugmentConfig, DatasetError, EmptyDatasetError, ImageLoadError,
                           augment, batch_plan, denormalize_u8, load_image, load_manifest,
                           make_batches, normalize_u8, scan_dataset, stage_plan)


def _write_pngs(root, count, size=(8, 8), value=128, prefix="img"):
    root.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        Image.new("L", size, value).save(root / f"{prefix}_{i:04d}.png")


class TestScan:
    def test_paper_sized_cerebellum_set(self, tmp_path):
        _write_pngs(tmp_path / "cere", 408)
        m = scan_dataset(tmp_path / "cere", "trans-cerebellum")
        assert m.count == 408
        assert all(r.plane == "trans-cerebellum" for r in m.records)

    def test_paper_sized_thalamic_set(self, tmp_path):
        _write_pngs(tmp_path / "thal", 1072)
        m = scan_dataset(tmp_path / "thal", "trans-thalamic")
        assert m.count == 1072

    def test_empty_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(EmptyDatasetError):
            scan_dataset(tmp_path / "empty", "trans-cerebellum")

    def test_corrupt_file_skipped_with_warning(self, tmp_path):
        _write_pngs(tmp_path / "mixed", 3)
        (tmp_path / "mixed" / "broken.png").write_bytes(b"not a png at all")
        m = scan_dataset(tmp_path / "mixed", "other")
        assert m.count == 3
        assert len(m.skipped) == 1
        assert m.skipped[0][0] == "broken.png"

    def test_plane_keyword_filtering(self, tmp_path):
        _write_pngs(tmp_path / "data" / "cerebellum", 2)
        _write_pngs(tmp_path / "data" / "thalamic", 3)
        m = scan_dataset(tmp_path / "data", "trans-thalamic")
        assert m.count == 3
        both = scan_dataset(tmp_path / "data", "other")
        assert both.count == 5
        planes = {r.plane for r in both.records}
        assert planes == {"trans-cerebellum", "trans-thalamic"}

    def test_ordering_and_checksum_deterministic(self, tmp_path):
        _write_pngs(tmp_path / "d", 5)
        m1 = scan_dataset(tmp_path / "d", "other")
        m2 = scan_dataset(tmp_path / "d", "other")
        assert [r.path for r in m1.records] == sorted(r.path for r in m1.records)
        assert m1.checksum == m2.checksum


class TestManifestFile:
    def test_roundtrip(self, tmp_path):
        _write_pngs(tmp_path / "d", 4)
        m = scan_dataset(tmp_path / "d", "trans-cerebellum")
        m.save(tmp_path / "d" / "manifest.tsv")
        loaded = load_manifest(tmp_path / "d" / "manifest.tsv")
        assert loaded.count == 4
        assert [r.path for r in loaded.records] == [r.path for r in m.records]
        assert loaded.plane == "trans-cerebellum"

    def test_save_outside_root_resolves(self, tmp_path):
        _write_pngs(tmp_path / "d", 2)
        m = scan_dataset(tmp_path / "d", "other")
        m.save(tmp_path / "manifest.tsv")
        loaded = load_manifest(tmp_path / "manifest.tsv")
        batch = dataset.load_batch(loaded, [0, 1], 8, 1)
        assert batch.shape == (2, 1, 8, 8)

    def test_format_is_tab_separated_sorted(self, tmp_path):
        _write_pngs(tmp_path / "d", 3)
        m = scan_dataset(tmp_path / "d", "other")
        m.save(tmp_path / "d" / "manifest.tsv")
        lines = (tmp_path / "d" / "manifest.tsv").read_text().splitlines()
        assert lines == sorted(lines)
        assert all(len(line.split("\t")) == 4 for line in lines)


class TestLoadImage:
    def test_variable_size_source_to_128(self, tmp_path):
        arr = (np.linspace(0, 255, 692 * 480).reshape(480, 692)).astype(np.uint8)
        Image.fromarray(arr).save(tmp_path / "wide.png")
        m = scan_dataset(tmp_path, "other")
        out = load_image(m.records[0], 128, 1, root=m.root)
        assert out.shape == (1, 1, 128, 128)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_square_source_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.integers(0, 256, (128, 128), dtype=np.uint8)
        Image.fromarray(arr).save(tmp_path / "sq.png")
        m = scan_dataset(tmp_path, "other")
        out = load_image(m.records[0], 128, 1, root=m.root)
        direct = normalize_u8(arr)
        assert np.max(np.abs(out[0, 0] - direct)) == 0.0

    def test_all_white_is_exactly_one(self, tmp_path):
        Image.new("L", (64, 48), 255).save(tmp_path / "white.png")
        m = scan_dataset(tmp_path, "other")
        out = load_image(m.records[0], 32, 1, root=m.root)
        assert np.all(out == 1.0)

    def test_rgb_to_three_channels(self, tmp_path):
        Image.new("RGB", (32, 32), (10, 200, 90)).save(tmp_path / "rgb.png")
        m = scan_dataset(tmp_path, "other")
        out = load_image(m.records[0], 16, 3, root=m.root)
        assert out.shape == (1, 3, 16, 16)

    def test_bad_parameters(self, tmp_path):
        _write_pngs(tmp_path / "d", 1)
        m = scan_dataset(tmp_path / "d", "other")
        with pytest.raises(DatasetError):
            load_image(m.records[0], 100, 1, root=m.root)  # not a power of two
        with pytest.raises(DatasetError):
            load_image(m.records[0], 16, 2, root=m.root)

    def test_decode_failure_names_path(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"garbage")
        rec = dataset.ImageRecord("bad.png", "other", 4, 4)
        with pytest.raises(ImageLoadError, match="bad.png"):
            load_image(rec, 8, 1, root=tmp_path)

    def test_u8_roundtrip_every_level(self):
        v = np.arange(256, dtype=np.uint8)
        assert np.array_equal(denormalize_u8(normalize_u8(v)), v)


class TestAugment:
    def test_identity_config_is_exact_identity(self, phantoms16):
        batch = dataset.load_batch(phantoms16, range(4), 16, 1)
        out = augment(batch, AugmentConfig.identity(), seed=9)
        assert np.array_equal(out, batch)

    def test_flip_is_involution(self, phantoms16):
        batch = dataset.load_batch(phantoms16, range(4), 16, 1)
        cfg = AugmentConfig(horizontal_flip_prob=1.0, zoom_range=(1, 1),
                            rotation_range_deg=(0, 0))
        out = augment(augment(batch, cfg, seed=1), cfg, seed=2)
        assert np.array_equal(out, batch)

    def test_deterministic_per_seed(self, phantoms16):
        batch = dataset.load_batch(phantoms16, range(4), 16, 1)
        cfg = AugmentConfig(zoom_range=(0.9, 1.1), rotation_range_deg=(-10, 10))
        a = augment(batch, cfg, seed=7)
        b = augment(batch, cfg, seed=7)
        assert np.array_equal(a, b)
        c = augment(batch, cfg, seed=8)
        assert not np.array_equal(a, c)

    def test_invalid_configs_rejected(self):
        with pytest.raises(DatasetError):
            AugmentConfig(horizontal_flip_prob=1.5)
        with pytest.raises(DatasetError):
            AugmentConfig(zoom_range=(0.0, 1.0))
        with pytest.raises(DatasetError):
            AugmentConfig(rotation_range_deg=(5, -5))


class TestBatches:
    def test_paper_sized_batch_arithmetic(self):
        plan = batch_plan(408, 16, shuffle_seed=3)
        assert len(plan) == 26
        assert [len(p) for p in plan] == [16] * 25 + [8]

    def test_epoch_visits_every_record_once(self, phantoms16):
        plan = batch_plan(phantoms16.count, 5, shuffle_seed=1)
        seen = np.concatenate(plan)
        assert sorted(seen.tolist()) == list(range(phantoms16.count))

    def test_unit_batches(self, phantoms16):
        batches = list(make_batches(phantoms16, 1, 16, 1, shuffle_seed=0))
        assert len(batches) == phantoms16.count
        assert all(b.shape == (1, 1, 16, 16) for b in batches)

    def test_shuffle_seed_determinism(self):
        a = [p.tolist() for p in batch_plan(20, 6, 4)]
        b = [p.tolist() for p in batch_plan(20, 6, 4)]
        c = [p.tolist() for p in batch_plan(20, 6, 5)]
        assert a == b
        assert a != c

    def test_stage_plan_steps_unit_cycles(self):
        epoch_plan = stage_plan(10, 4, seed=2, index=0, unit="epochs")
        assert sum(len(p) for p in epoch_plan) == 10
        per_cycle = len(epoch_plan)
        sequential = [stage_plan(10, 4, 2, i, "steps")[0].tolist() for i in range(per_cycle)]
        assert [p.tolist() for p in stage_plan(10, 4, 2, 0, "epochs")] == sequential

    def test_batch_size_validation(self):
        with pytest.raises(DatasetError):
            batch_plan(10, 0, 1)
