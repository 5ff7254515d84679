import numpy as np
import pytest
from PIL import Image as PILImage

from darkadapt.data import (
    DatasetSplit,
    Domain,
    GroundTruthBox,
    Image,
    assert_valid_image,
    fork_rng,
    load_image,
    parse_annotations,
    read_manifest,
    save_image,
    seeded_rng,
    serialize_annotations,
    split_dataset,
    write_manifest,
)
from darkadapt.exceptions import AnnotationParseError, ContractViolation, DarkAdaptError


class TestParseAnnotations:
    def test_single_box_layout(self):
        # cross-checked against the public annotation layout: x y w h + attrs
        entries, warnings = parse_annotations("a/img.jpg\n1\n10 20 30 40 0 0 0 0 0 0\n")
        assert warnings == []
        assert len(entries) == 1
        path, boxes = entries[0]
        assert path == "a/img.jpg"
        assert len(boxes) == 1
        b = boxes[0]
        assert (b.x1, b.y1, b.x2, b.y2) == (10, 20, 40, 60)

    def test_zero_count(self):
        entries, warnings = parse_annotations("a/img.jpg\n0\n")
        assert entries == [("a/img.jpg", [])]
        assert warnings == []

    def test_degenerate_box_dropped_with_warning(self):
        entries, warnings = parse_annotations("a/img.jpg\n1\n10 20 0 40 0 0\n")
        assert entries == [("a/img.jpg", [])]
        assert len(warnings) == 1
        assert "w=0" in warnings[0].message

    def test_multiple_images(self):
        text = "a.jpg\n2\n0 0 5 5 x\n1 1 2 2 y\nb.jpg\n0\n"
        entries, _ = parse_annotations(text)
        assert [p for p, _ in entries] == ["a.jpg", "b.jpg"]
        assert len(entries[0][1]) == 2

    def test_malformed_count_names_line(self):
        with pytest.raises(AnnotationParseError, match="line 2"):
            parse_annotations("a.jpg\nnope\n")

    def test_nonnumeric_coordinates_names_line(self):
        with pytest.raises(AnnotationParseError, match="line 3"):
            parse_annotations("a.jpg\n1\nx y w h\n")

    def test_truncated_text(self):
        with pytest.raises(AnnotationParseError):
            parse_annotations("a.jpg\n2\n0 0 5 5\n")

    def test_round_trip(self, rng):
        entries = []
        for i in range(20):
            boxes = []
            for _ in range(int(rng.integers(0, 4))):
                x, y = rng.integers(0, 50, size=2)
                w, h = rng.integers(1, 30, size=2)
                boxes.append(GroundTruthBox(float(x), float(y), float(x + w), float(y + h), f"im{i}.png"))
            entries.append((f"im{i}.png", boxes))
        text = serialize_annotations(entries)
        reparsed, warnings = parse_annotations(text)
        assert warnings == []
        assert len(reparsed) == len(entries)
        for (p1, b1), (p2, b2) in zip(entries, reparsed):
            assert p1 == p2
            assert [(b.x1, b.y1, b.x2, b.y2) for b in b1] == [(b.x1, b.y1, b.x2, b.y2) for b in b2]
        assert serialize_annotations(reparsed) == text


class TestImageIO:
    @pytest.mark.parametrize("value,expected", [(0, 0.0), (255, 1.0), (128, 128 / 255)])
    def test_scaling(self, tmp_path, value, expected):
        arr = np.full((8, 8, 3), value, dtype=np.uint8)
        p = tmp_path / "x.png"
        PILImage.fromarray(arr).save(p)
        img = load_image(p, Domain.L)
        assert img.domain is Domain.L
        assert np.allclose(img.pixels, expected)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DarkAdaptError, match="nope.png"):
            load_image(tmp_path / "nope.png", Domain.L)

    def test_undecodable_file(self, tmp_path):
        p = tmp_path / "bad.png"
        p.write_bytes(b"not an image at all")
        with pytest.raises(DarkAdaptError, match="bad.png"):
            load_image(p, Domain.L)

    def test_save_load_round_trip(self, tmp_path, rng):
        px = rng.uniform(0, 1, size=(12, 10, 3)).astype(np.float32)
        img = Image(px, Domain.H, "x")
        save_image(img, tmp_path / "x.png")
        back = load_image(tmp_path / "x.png", Domain.H)
        assert np.abs(back.pixels - px).max() <= 0.5 / 255 + 1e-6

    def test_range_validation(self):
        bad = Image(np.full((4, 4, 3), 1.5, dtype=np.float32), Domain.H, "bad")
        with pytest.raises(ContractViolation, match="outside"):
            assert_valid_image(bad)
        with pytest.raises(ContractViolation):
            assert_valid_image(Image(np.zeros((4, 4, 1), dtype=np.float32), Domain.H))


class TestBoxes:
    def test_degenerate_rejected(self):
        with pytest.raises(ContractViolation):
            GroundTruthBox(5, 5, 5, 10)
        with pytest.raises(ContractViolation):
            GroundTruthBox(0, 10, 5, 10)


class TestRng:
    def test_same_seed_same_stream(self):
        a = seeded_rng(7).integers(0, 256, size=100)
        b = seeded_rng(7).integers(0, 256, size=100)
        assert np.array_equal(a, b)

    def test_different_seed_differs(self):
        a = seeded_rng(7).integers(0, 256, size=100)
        b = seeded_rng(8).integers(0, 256, size=100)
        assert not np.array_equal(a, b)

    def test_forked_substreams(self):
        a1 = fork_rng(7, "enhance").uniform(size=50)
        a2 = fork_rng(7, "enhance").uniform(size=50)
        b = fork_rng(7, "degrade").uniform(size=50)
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, b)


class TestSplits:
    def test_disjoint_for_many_seeds(self):
        ids = [f"im{i}" for i in range(50)]
        for seed in range(10):
            split = split_dataset(ids, (20, 10, 15), seeded_rng(seed))
            assert len(split.train) == 20 and len(split.val) == 10 and len(split.test) == 15
            assert not (set(split.train) & set(split.val))
            assert not (set(split.train) & set(split.test))
            assert not (set(split.val) & set(split.test))

    def test_oversized_request_rejected(self):
        with pytest.raises(ContractViolation):
            split_dataset(["a", "b"], (2, 1, 0), seeded_rng(0))

    def test_overlapping_split_rejected(self):
        with pytest.raises(ContractViolation):
            DatasetSplit(train=["a"], val=["a"], test=[])

    def test_manifest_round_trip(self, tmp_path):
        paths = ["images/a.png", "images/b.png"]
        write_manifest(paths, tmp_path / "m.txt")
        assert read_manifest(tmp_path / "m.txt") == paths

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DarkAdaptError, match="missing.txt"):
            read_manifest(tmp_path / "missing.txt")
