import logging

import numpy as np
import pytest

from placerec.tensor_io import load_manifest, read_grid
from placerec_extractor import ExtractionJob, extract_dataset, list_images, write_grid


def run(image_dir, out_dir, extractor, provenance="unit-test weights"):
    return extract_dataset(
        ExtractionJob(image_dir=image_dir, out_dir=out_dir), extractor, provenance
    )


class TestListImages:
    def test_sorted_by_name_and_filtered(self, image_dir):
        (image_dir / "notes.txt").write_text("ignored")
        names = [p.name for p in list_images(image_dir)]
        assert names == ["a_dawn.png", "b_noon.jpg", "c_dusk.jpg"]

    def test_missing_directory(self, tmp_path):
        with pytest.raises(NotADirectoryError):
            list_images(tmp_path / "nowhere")


class TestExtractDataset:
    def test_exports_grids_the_engine_can_read(self, image_dir, tmp_path, extractor):
        result = run(image_dir, tmp_path / "out", extractor)
        assert result.exported == 3
        assert result.skipped == 0

        manifest = load_manifest(result.manifest)
        assert manifest.frame_ids == [0, 1, 2]
        for entry in manifest.entries:
            stage1 = read_grid(entry.stage1_path)
            stage2 = read_grid(entry.stage2_path)
            assert (stage1.height, stage1.width, stage1.depth) == (14, 14, 512)
            assert (stage2.height, stage2.width, stage2.depth) == (28, 28, 512)

    def test_frame_ids_follow_filename_order(self, image_dir, tmp_path, extractor):
        result = run(image_dir, tmp_path / "out", extractor)
        lines = [
            line for line in result.manifest.read_text().splitlines()
            if not line.startswith("#")
        ]
        assert lines[0] == "0,0000_s1.fgt,0000_s2.fgt"
        assert len(lines) == 3

    def test_undecodable_image_skipped_with_hole(
        self, image_dir, tmp_path, extractor, caplog
    ):
        (image_dir / "ab_broken.jpg").write_text("junk")  # sorts second
        with caplog.at_level(logging.WARNING):
            result = run(image_dir, tmp_path / "out", extractor)
        assert result.exported == 3
        assert result.skipped == 1
        assert "ab_broken.jpg" in caplog.text
        manifest = load_manifest(result.manifest)
        assert manifest.frame_ids == [0, 2, 3]  # the bad frame leaves a gap

    def test_rerun_is_bit_identical(self, image_dir, tmp_path, extractor):
        first = run(image_dir, tmp_path / "one", extractor)
        second = run(image_dir, tmp_path / "two", extractor)
        for entry in load_manifest(first.manifest).entries:
            for attr in ("stage1_path", "stage2_path"):
                a = getattr(entry, attr)
                b = tmp_path / "two" / a.name
                assert a.read_bytes() == b.read_bytes(), a.name
        assert first.manifest.read_text() == second.manifest.read_text()

    def test_manifest_records_weight_provenance(self, image_dir, tmp_path, extractor):
        result = run(image_dir, tmp_path / "out", extractor, provenance="imagenet (test)")
        header = result.manifest.read_text().splitlines()[:2]
        assert header[1] == "# weights: imagenet (test)"

    def test_empty_directory(self, tmp_path, extractor):
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(ValueError, match="no images"):
            run(empty, tmp_path / "out", extractor)

    def test_nothing_decodable(self, tmp_path, extractor):
        broken = tmp_path / "broken"
        broken.mkdir()
        (broken / "a.jpg").write_text("junk")
        with pytest.raises(ValueError, match="no decodable"):
            run(broken, tmp_path / "out", extractor)


class TestWriteGrid:
    def test_rejects_non_finite(self, tmp_path):
        values = np.full((2, 2, 2), np.nan, dtype=np.float32)
        with pytest.raises(ValueError, match="non-finite"):
            write_grid(tmp_path / "bad.fgt", values)

    def test_rejects_wrong_rank(self, tmp_path):
        with pytest.raises(ValueError, match="3-D"):
            write_grid(tmp_path / "bad.fgt", np.zeros((2, 2), dtype=np.float32))

    def test_round_trips_through_the_engine(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((4, 5, 6)).astype(np.float32)
        write_grid(tmp_path / "grid.fgt", values)
        loaded = read_grid(tmp_path / "grid.fgt")
        assert np.array_equal(loaded.data, values)
