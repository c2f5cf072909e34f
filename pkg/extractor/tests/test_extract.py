import os

import numpy as np
import pytest
from PIL import Image

from nicf_extract.backbones import (
    BackboneUnavailableError,
    ProjectionBackbone,
    make_backbone,
    resize_rgb,
)
from nicf_extract.cli import main
from nicf_extract.extract import ExtractionError, extract, extract_batch, write_nicf


@pytest.fixture(scope="module")
def backbone():
    return ProjectionBackbone()


def make_image(path, color=None, size=(64, 48)):
    if color is not None:
        img = Image.new("RGB", size, color)
    else:
        rng = np.random.Generator(np.random.PCG64(1))
        img = Image.fromarray(rng.integers(0, 256, (*size[::-1], 3), dtype=np.uint8))
    img.save(path)
    return path


class TestResize:
    def test_shape_and_range(self, tmp_path):
        path = make_image(tmp_path / "x.png")
        with Image.open(path) as img:
            pixels = resize_rgb(img)
        assert pixels.shape == (299, 299, 3)
        assert pixels.min() >= 0.0 and pixels.max() <= 1.0


class TestExtract:
    def test_format_contract(self, tmp_path, backbone):
        image = make_image(tmp_path / "img.png")
        out = tmp_path / "img.nicf"
        values = extract(image, backbone, out)
        blob = out.read_bytes()
        assert blob[:4] == b"NICF"
        assert int.from_bytes(blob[8:12], "little") == 2048
        assert values.size == 2048

    def test_round_trips_through_training_loader(self, tmp_path, backbone):
        from nicap.data import load_feature

        image = make_image(tmp_path / "img.png")
        out = tmp_path / "img.nicf"
        values = extract(image, backbone, out)
        loaded = load_feature(out, expected_dim=2048)
        assert loaded.astype(np.float32).tobytes() == values.astype(np.float32).tobytes()

    def test_repeated_extraction_bit_identical(self, tmp_path, backbone):
        image = make_image(tmp_path / "img.png")
        a, b = tmp_path / "a.nicf", tmp_path / "b.nicf"
        extract(image, backbone, a)
        extract(image, backbone, b)
        assert a.read_bytes() == b.read_bytes()

    def test_black_vs_white_distinct(self, tmp_path, backbone):
        black = extract(make_image(tmp_path / "b.png", color=(0, 0, 0)), backbone, tmp_path / "b.nicf")
        white = extract(make_image(tmp_path / "w.png", color=(255, 255, 255)), backbone, tmp_path / "w.nicf")
        assert float(np.linalg.norm(black - white)) > 0.0

    def test_undecodable_image(self, tmp_path, backbone):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image at all")
        with pytest.raises(ExtractionError, match="decode"):
            extract(bad, backbone, tmp_path / "bad.nicf")
        assert not (tmp_path / "bad.nicf").exists()

    def test_wrong_width_aborts_without_writing(self, tmp_path):
        image = make_image(tmp_path / "img.png")
        out = tmp_path / "img.nicf"
        with pytest.raises(ExtractionError, match="expected"):
            extract(image, lambda img: np.zeros(7, dtype=np.float32), out)
        assert not out.exists()

    def test_write_is_atomic(self, tmp_path):
        out = tmp_path / "v.nicf"
        write_nicf(out, np.ones(4, dtype=np.float32))
        leftovers = [p for p in os.listdir(tmp_path) if p.endswith(".tmp")]
        assert leftovers == []


def write_batch_manifest(tmp_path, entries):
    manifest = tmp_path / "manifest.jsonl"
    import json

    with open(manifest, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")
    return manifest


class TestBatch:
    def make_manifest(self, tmp_path, n=3):
        entries = []
        for k in range(n):
            make_image(tmp_path / f"img{k}.png", color=(40 * k, 10, 200 - 30 * k))
            entries.append(
                {
                    "id": f"img{k:02d}",
                    "image": f"img{k}.png",
                    "captions": ["a man is running near the street"],
                    "label": "normal" if k % 2 else "anomaly",
                }
            )
        return write_batch_manifest(tmp_path, entries)

    def test_three_images(self, tmp_path, backbone):
        manifest = self.make_manifest(tmp_path)
        result = extract_batch(manifest, tmp_path / "out", backbone)
        assert len(result.extracted) == 3 and not result.failures
        for k in range(3):
            assert (tmp_path / "out" / "features" / f"img{k:02d}.nicf").exists()

    def test_updated_manifest_loads_in_training_toolkit(self, tmp_path, backbone):
        from nicap.data import load_manifest, resolve_feature

        manifest = self.make_manifest(tmp_path)
        result = extract_batch(manifest, tmp_path / "out", backbone)
        records = load_manifest(result.manifest_path)
        assert [r.id for r in records] == ["img00", "img01", "img02"]
        base = os.path.dirname(result.manifest_path)
        for rec in records:
            assert resolve_feature(rec, base, expected_dim=2048).size == 2048

    def test_rerun_skips_unless_forced(self, tmp_path, backbone):
        manifest = self.make_manifest(tmp_path)
        extract_batch(manifest, tmp_path / "out", backbone)
        again = extract_batch(manifest, tmp_path / "out", backbone)
        assert again.extracted == [] and len(again.skipped) == 3
        forced = extract_batch(manifest, tmp_path / "out", backbone, force=True)
        assert len(forced.extracted) == 3

    def test_corrupt_image_collected_not_fatal(self, tmp_path, backbone):
        manifest = self.make_manifest(tmp_path)
        (tmp_path / "img1.png").write_bytes(b"garbage")
        result = extract_batch(manifest, tmp_path / "out", backbone)
        assert sorted(result.extracted) == ["img00", "img02"]
        assert list(result.failures) == ["img01"]
        # failed records stay out of the rewritten manifest
        lines = open(result.manifest_path).read().strip().split("\n")
        assert len(lines) == 2

    def test_jobs_same_output(self, tmp_path, backbone):
        manifest = self.make_manifest(tmp_path)
        serial = extract_batch(manifest, tmp_path / "s", backbone)
        threaded = extract_batch(manifest, tmp_path / "t", backbone, jobs=3)
        assert open(serial.manifest_path).read() == open(threaded.manifest_path).read()
        for k in range(3):
            a = (tmp_path / "s" / "features" / f"img{k:02d}.nicf").read_bytes()
            b = (tmp_path / "t" / "features" / f"img{k:02d}.nicf").read_bytes()
            assert a == b


class TestBackboneSelection:
    def test_unknown_identifier(self):
        with pytest.raises(BackboneUnavailableError, match="unknown backbone"):
            make_backbone("imaginary-net")

    def test_pretrained_with_missing_weights_file(self):
        pytest.importorskip("torchvision")
        with pytest.raises(BackboneUnavailableError, match="unavailable"):
            make_backbone("inception-v3", weights_path="/nonexistent/weights.pth")


class TestCli:
    def test_single_image(self, tmp_path, capsys):
        image = make_image(tmp_path / "img.png")
        out = tmp_path / "img.nicf"
        code = main(["--image", str(image), "--out", str(out), "--backbone", "projection"])
        assert code == 0
        assert out.read_bytes()[:4] == b"NICF"

    def test_batch_with_failure_exits_nonzero(self, tmp_path, capsys):
        entries = [
            {"id": "ok", "image": "ok.png"},
            {"id": "broken", "image": "broken.png"},
        ]
        make_image(tmp_path / "ok.png")
        (tmp_path / "broken.png").write_bytes(b"junk")
        manifest = write_batch_manifest(tmp_path, entries)
        code = main(["--manifest", str(manifest), "--out-dir", str(tmp_path / "out"),
                     "--backbone", "projection"])
        captured = capsys.readouterr()
        assert code == 1
        assert "broken" in captured.err
        assert (tmp_path / "out" / "features" / "ok.nicf").exists()

    def test_unknown_backbone_exit_code(self, tmp_path, capsys):
        image = make_image(tmp_path / "img.png")
        code = main(["--image", str(image), "--out", str(tmp_path / "o.nicf"),
                     "--backbone", "imaginary-net"])
        assert code == 3

    def test_requires_exactly_one_mode(self, capsys):
        assert main([]) == 2
