import numpy as np
import pytest

from region_transformer.ply import PLYError, label_palette, load_ply, read_label_sidecar, save_ply
from region_transformer.pointcloud import RawCloud


def write(path, header_lines, body: bytes):
    path.write_bytes(("\n".join(header_lines) + "\n").encode("ascii") + body)
    return path


class TestLoad:
    def test_ascii_no_color(self, tmp_path):
        p = write(
            tmp_path / "a.ply",
            ["ply", "format ascii 1.0", "element vertex 3", "property float x", "property float y",
             "property float z", "end_header"],
            b"0 0 0\n1 0 0\n0 1 0.5\n",
        )
        c = load_ply(p)
        assert len(c) == 3
        np.testing.assert_array_equal(c.colors, 0.5)
        np.testing.assert_allclose(c.positions[2], [0, 1, 0.5])
        assert c.labels is None

    def test_binary_le_uchar_colors(self, tmp_path):
        dt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])
        rows = np.zeros(2, dtype=dt)
        rows["red"] = rows["green"] = rows["blue"] = 255
        p = write(
            tmp_path / "b.ply",
            ["ply", "format binary_little_endian 1.0", "element vertex 2", "property float x",
             "property float y", "property float z", "property uchar red", "property uchar green",
             "property uchar blue", "end_header"],
            rows.tobytes(),
        )
        np.testing.assert_array_equal(load_ply(p).colors, 1.0)

    def test_big_endian_with_faces_and_label(self, tmp_path):
        dt = np.dtype([("x", ">f8"), ("y", ">f8"), ("z", ">f8"), ("label", ">i4")])
        rows = np.zeros(3, dtype=dt)
        rows["x"] = [1, 2, 3]
        rows["label"] = [4, 5, 4]
        face = np.array([3], ">u1").tobytes() + np.array([0, 1, 2], ">i4").tobytes()
        p = write(
            tmp_path / "c.ply",
            ["ply", "format binary_big_endian 1.0", "comment made by hand", "element vertex 3",
             "property double x", "property double y", "property double z", "property int label",
             "element face 1", "property list uchar int vertex_indices", "end_header"],
            rows.tobytes() + face,
        )
        c = load_ply(p)
        np.testing.assert_array_equal(c.positions[:, 0], [1, 2, 3])
        np.testing.assert_array_equal(c.labels, [4, 5, 4])

    def test_element_before_vertex_with_lists(self, tmp_path):
        body = b"3 0 1 2\n0 0 0\n1 1 1\n"
        p = write(
            tmp_path / "d.ply",
            ["ply", "format ascii 1.0", "element face 1", "property list uchar int vertex_indices",
             "element vertex 2", "property double x", "property double y", "property double z", "end_header"],
            body,
        )
        np.testing.assert_array_equal(load_ply(p).positions, [[0, 0, 0], [1, 1, 1]])

    def test_truncated_binary(self, tmp_path):
        dt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
        p = write(
            tmp_path / "t.ply",
            ["ply", "format binary_little_endian 1.0", "element vertex 100", "property float x",
             "property float y", "property float z", "end_header"],
            np.zeros(99, dtype=dt).tobytes(),
        )
        with pytest.raises(PLYError, match="truncated") as ei:
            load_ply(p)
        assert "byte offset" in str(ei.value)

    def test_truncated_ascii(self, tmp_path):
        p = write(
            tmp_path / "t.ply",
            ["ply", "format ascii 1.0", "element vertex 3", "property float x", "property float y",
             "property float z", "end_header"],
            b"0 0 0\n1 1 1\n",
        )
        with pytest.raises(PLYError, match="truncated"):
            load_ply(p)

    @pytest.mark.parametrize(
        "header",
        [
            ["plx"],
            ["ply", "format binary_middle_endian 1.0", "end_header"],
            ["ply", "format ascii 1.0", "element vertex 1", "property quad x", "end_header"],
            ["ply", "format ascii 1.0", "property float x", "end_header"],
            ["ply", "format ascii 1.0", "element vertex 1", "property float y", "property float z", "end_header"],
        ],
    )
    def test_malformed_header(self, tmp_path, header):
        p = write(tmp_path / "m.ply", header, b"0 0 0\n")
        with pytest.raises(PLYError):
            load_ply(p)

    def test_sidecar(self, tmp_path):
        p = write(
            tmp_path / "s.ply",
            ["ply", "format ascii 1.0", "element vertex 2", "property float x", "property float y",
             "property float z", "end_header"],
            b"0 0 0\n1 1 1\n",
        )
        (tmp_path / "s.txt").write_text("3\n9\n")
        np.testing.assert_array_equal(load_ply(p, tmp_path / "s.txt").labels, [3, 9])
        with pytest.raises(ValueError):
            read_label_sidecar(tmp_path / "s.txt", 3)


class TestSave:
    def test_round_trip(self, tmp_path, rng):
        c = RawCloud(rng.standard_normal((10, 3)), rng.random((10, 3)))
        labels = rng.integers(0, 4, 10)
        save_ply(c, labels, tmp_path / "o.ply")
        back = load_ply(tmp_path / "o.ply")
        assert back.positions.tobytes() == c.positions.tobytes()
        np.testing.assert_array_equal(back.labels, labels)

    def test_palette(self, tmp_path, rng):
        c = RawCloud(rng.random((6, 3)), rng.random((6, 3)))
        save_ply(c, np.zeros(6, int), tmp_path / "z.ply")
        assert len(np.unique(load_ply(tmp_path / "z.ply").colors, axis=0)) == 1
        save_ply(c, [0, 1, 0, 1, 1, 0], tmp_path / "t.ply")
        assert len(np.unique(load_ply(tmp_path / "t.ply").colors, axis=0)) == 2

    def test_keep_colors(self, tmp_path, rng):
        c = RawCloud(rng.random((5, 3)), rng.random((5, 3)))
        save_ply(c, np.zeros(5, int), tmp_path / "k.ply", keep_colors=True)
        np.testing.assert_allclose(load_ply(tmp_path / "k.ply").colors, c.colors, atol=0.5 / 255 + 1e-12)

    def test_palette_distinct_and_stable(self):
        labels = np.arange(500)
        a = label_palette(labels)
        assert len(np.unique(a, axis=0)) == 500
        np.testing.assert_array_equal(a, label_palette(labels))

    def test_length_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            save_ply(RawCloud(np.zeros((2, 3)), np.zeros((2, 3))), [0], tmp_path / "x.ply")

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            save_ply(RawCloud(np.zeros((1, 3)), np.zeros((1, 3))), [0], tmp_path / "missing" / "x.ply")
