import numpy as np
import pytest

from hsg import netpbm, synth
from hsg.synth import SceneSpec


class TestSynthScene:
    def test_deterministic(self):
        a, b = synth.synth_scene(SceneSpec(seed=3), 7), synth.synth_scene(SceneSpec(seed=3), 7)
        for x, y in ((a.image, b.image), (a.gt_parts, b.gt_parts), (a.gt_semantic, b.gt_semantic)):
            np.testing.assert_array_equal(x, y)

    @pytest.mark.parametrize("index", range(20))
    def test_parts_nest_in_objects(self, index):
        s = synth.synth_scene(SceneSpec(), index)
        assert synth.nests(s.gt_parts, s.gt_objects)
        assert synth.nests(s.gt_objects, s.gt_semantic) or s.gt_objects.max() == 0
        assert np.array_equal(s.gt_parts > 0, s.gt_objects > 0)
        assert np.array_equal(s.gt_objects > 0, s.gt_semantic > 0)
        assert s.image.dtype == np.uint8 and s.image.shape == (64, 64, 3)

    def test_zero_objects(self):
        s = synth.synth_scene(SceneSpec(min_objects=0, max_objects=0), 0)
        for m in (s.gt_parts, s.gt_objects, s.gt_semantic):
            assert np.all(m == 0)
        assert s.metadata["objects"] == 0

    def test_objects_have_several_parts(self):
        s = synth.synth_scene(SceneSpec(min_objects=1, max_objects=1), 4)
        assert len(np.unique(s.gt_parts)) >= 3  # background plus at least two parts

    def test_corpus_roundtrip(self, tmp_path):
        root = synth.write_corpus(tmp_path / "c", SceneSpec(), n_train=3, n_eval=2)
        assert synth.split_size(root, "train") == 3 and synth.split_size(root, "eval") == 2
        s = synth.load_sample(root, "eval", 1)
        direct = synth.synth_scene(SceneSpec(), 4)
        np.testing.assert_array_equal(s.image, direct.image)
        np.testing.assert_array_equal(s.gt_semantic, direct.gt_semantic)
        manifest = (root / "manifest.txt").read_text().splitlines()
        assert len(manifest) == 5 * 4
        assert all(len(line.split("  ")[0]) == 64 for line in manifest)

    def test_missing_split(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            synth.load_split(tmp_path, "train")


class TestNetpbm:
    def test_ppm_roundtrip(self, tmp_path):
        img = synth.synth_scene(SceneSpec(), 1).image
        netpbm.write_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(netpbm.read_ppm(tmp_path / "a.ppm"), img)

    def test_ascii_variant_rejected(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(netpbm.BadMagic):
            netpbm.read_ppm(tmp_path / "a.ppm")

    def test_sixteen_bit_labels(self, tmp_path):
        labels = np.arange(300).reshape(15, 20)
        netpbm.write_pgm(tmp_path / "l.pgm", labels)
        assert b"65535" in (tmp_path / "l.pgm").read_bytes()[:20]
        np.testing.assert_array_equal(netpbm.read_pgm(tmp_path / "l.pgm"), labels)

    def test_eight_bit_labels(self, tmp_path):
        labels = np.array([[0, 255], [3, 4]])
        netpbm.write_pgm(tmp_path / "l.pgm", labels)
        assert (tmp_path / "l.pgm").stat().st_size == len(b"P5\n2 2\n255\n") + 4
        np.testing.assert_array_equal(netpbm.read_pgm(tmp_path / "l.pgm"), labels)

    def test_truncated(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(netpbm.TruncatedFile):
            netpbm.read_ppm(tmp_path / "a.ppm")

    def test_header_comment(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
        np.testing.assert_array_equal(netpbm.read_pgm(tmp_path / "a.pgm"), [[1, 2]])

    def test_unit_conversions(self):
        img = np.array([[[0, 128, 255]]], dtype=np.uint8)
        np.testing.assert_array_equal(netpbm.to_uint8(netpbm.to_unit(img)), img)
