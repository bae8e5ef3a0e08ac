import struct

import numpy as np
import pytest

from fido import data_io
from fido.boxes import BoundingBox


def test_same_seed_same_dataset():
    a = data_io.gen_shapes(data_io.ShapesConfig(count=30, seed=5))
    b = data_io.gen_shapes(data_io.ShapesConfig(count=30, seed=5))
    np.testing.assert_array_equal(a.images, b.images)
    assert a.boxes == b.boxes and a.labels.tolist() == b.labels.tolist()


def test_box_areas_within_scale_range():
    ds = data_io.gen_shapes(data_io.ShapesConfig(count=400, seed=1))
    frac = np.array([b.area for b in ds.boxes]) / 32.0 ** 2
    assert frac.min() >= 0.04 and frac.max() <= 0.50


def test_boxes_are_tight_around_the_shape():
    ds = data_io.gen_shapes(data_io.ShapesConfig(count=20, seed=2, background="noise"))
    for x, b in zip(ds.images, ds.boxes):
        # the shape colour is flat and noise never repeats, so the modal colour marks the shape
        flat = x.reshape(3, -1).T
        colours, inverse, counts = np.unique(flat, axis=0, return_inverse=True, return_counts=True)
        shape = (inverse.reshape(-1) == counts.argmax()).reshape(32, 32)
        ys, xs = np.nonzero(shape)
        assert (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1) == b.as_tuple()


def test_class_balance():
    ds = data_io.gen_shapes(data_io.ShapesConfig(count=103, seed=0))
    counts = np.bincount(ds.labels)
    assert counts.max() - counts.min() <= 1


def test_splits_differ_and_are_reproducible():
    s = data_io.standard_splits(train=20, heldout=10, eval_count=10)
    assert set(s) == {"train", "heldout", "eval"}
    assert not np.array_equal(s["heldout"].images, s["eval"].images)
    again = data_io.shapes_split("eval", 10)
    np.testing.assert_array_equal(again.images, s["eval"].images)


def test_shapes_config_validation():
    with pytest.raises(ValueError):
        data_io.ShapesConfig(side=8)
    with pytest.raises(ValueError):
        data_io.ShapesConfig(classes=("square", "hexagon"))
    with pytest.raises(ValueError):
        data_io.shapes_split("test", 3)


def _idx_bytes(arr):
    return struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def test_idx_fixture_round_trip(tmp_path):
    imgs = np.array([[[0, 255], [128, 64]], [[1, 2], [3, 4]]], dtype=np.uint8)
    (tmp_path / "x.idx").write_bytes(_idx_bytes(imgs))
    (tmp_path / "y.idx").write_bytes(_idx_bytes(np.array([1, 0], dtype=np.uint8)))
    ds = data_io.load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    assert ds.images.shape == (2, 3, 2, 2)
    assert ds.images[0, 1, 0, 1] == 1.0 and ds.images[0, 2, 1, 0] == 128 / 255
    assert ds.labels.tolist() == [1, 0]
    data_io.write_idx(tmp_path / "z.idx", imgs)
    np.testing.assert_array_equal(data_io.read_idx(tmp_path / "z.idx"), imgs)


def test_truncated_idx_names_offset(tmp_path):
    data = _idx_bytes(np.zeros((2, 3, 3), dtype=np.uint8))
    (tmp_path / "t.idx").write_bytes(data[:-4])
    with pytest.raises(ValueError, match="byte offset 30"):
        data_io.read_idx(tmp_path / "t.idx")
    (tmp_path / "h.idx").write_bytes(data[:6])
    with pytest.raises(ValueError, match="byte offset 6"):
        data_io.read_idx(tmp_path / "h.idx")


def test_idx_label_count_mismatch(tmp_path):
    (tmp_path / "x.idx").write_bytes(_idx_bytes(np.zeros((2, 3, 3), dtype=np.uint8)))
    (tmp_path / "y.idx").write_bytes(_idx_bytes(np.zeros(3, dtype=np.uint8)))
    with pytest.raises(ValueError, match="label count 3"):
        data_io.load_idx(tmp_path / "x.idx", tmp_path / "y.idx")


def test_colormap_endpoints():
    red = data_io.colormap_red_blue(np.ones((2, 2)))
    blue = data_io.colormap_red_blue(np.zeros((2, 2)))
    assert (red[0] == 1).all() and (red[1:] == 0).all()
    assert (blue[2] == 1).all() and (blue[:2] == 0).all()


def test_heatmap_png_round_trip(tmp_path, rng):
    sal = rng.uniform(size=(9, 7))
    gray, overlay = data_io.render_heatmap(sal, rng.uniform(size=(3, 9, 7)), tmp_path / "s.png")
    assert overlay.exists() and overlay.name == "s_overlay.png"
    back = data_io.load_png(gray)
    assert np.abs(back - sal).max() <= 0.5 / 255 + 1e-12


def test_heatmap_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        data_io.render_heatmap(np.full((2, 2), 1.5), np.zeros((3, 2, 2)), tmp_path / "s")


def test_saliency_csv_round_trip(tmp_path, rng):
    theta = rng.uniform(size=(5, 4))
    data_io.save_saliency_csv(theta, tmp_path / "s.csv", "config_hash=abc")
    assert (tmp_path / "s.csv").read_text().startswith("# config_hash=abc\n")
    np.testing.assert_array_equal(data_io.load_saliency_csv(tmp_path / "s.csv"), theta)


def test_saliency_csv_errors(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("shape,3,2\n0.1,0.2\n0.3,0.4\n")
    with pytest.raises(ValueError, match="header says 3 rows"):
        data_io.load_saliency_csv(p)
    p.write_text("shape,1,2\n0.1,nan\n")
    with pytest.raises(ValueError, match="non-finite"):
        data_io.load_saliency_csv(p)
    p.write_text("0.1,0.2\n")
    with pytest.raises(ValueError, match="shape header"):
        data_io.load_saliency_csv(p)


def test_boxes_csv(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("image_id,x_min,y_min,x_max,y_max\nimg7,1,2,10,12\nimg7,0,0,3,3\n")
    table = data_io.load_boxes_csv(p)
    assert table["img7"] == [BoundingBox(1, 2, 10, 12), BoundingBox(0, 0, 3, 3)]
    p.write_text("img7,5,5,5,9\n")
    with pytest.raises(ValueError, match=":1:"):
        data_io.load_boxes_csv(p)
    p.write_text("img7,0,0,40,4\n")
    with pytest.raises(ValueError, match="out of bounds"):
        data_io.load_boxes_csv(p, (32, 32))


def test_boxes_csv_round_trip(tmp_path):
    ds = data_io.shapes_split("eval", 5)
    data_io.save_boxes_csv(tmp_path / "b.csv", ds.ids, ds.boxes)
    table = data_io.load_boxes_csv(tmp_path / "b.csv", (32, 32))
    assert [table[i][0] for i in ds.ids] == ds.boxes


def test_bounding_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(3, 0, 3, 4)
    with pytest.raises(ValueError):
        BoundingBox(-1, 0, 3, 4)
    assert BoundingBox(0, 0, 2, 3).area == 6
