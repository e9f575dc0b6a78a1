import gzip
import struct

import numpy as np
import pytest

from neq.data import (
    DataError, Dataset, gen_synthetic, load_idx_dataset, make_digits, split_probe,
    stratified_pick, write_idx_dataset,
)


def _write_pair(tmp_path, pixels, labels, img_magic=0x803, lab_magic=0x801, n_img=None, n_lab=None):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, h, w = pixels.shape
    img = struct.pack(">IIII", img_magic, n if n_img is None else n_img, h, w) + pixels.tobytes()
    lab = struct.pack(">II", lab_magic, len(labels) if n_lab is None else n_lab) + bytes(labels)
    (tmp_path / "img").write_bytes(img)
    (tmp_path / "lab").write_bytes(lab)
    return tmp_path / "img", tmp_path / "lab"


def test_hand_built_idx_pair(tmp_path):
    paths = _write_pair(tmp_path, [[[0, 255], [51, 102]], [[1, 2], [3, 4]]], [7, 2])
    ds = load_idx_dataset(*paths)
    assert ds.x.shape == (2, 1, 2, 2) and ds.x.dtype == np.float32
    assert ds.x[0, 0].tolist() == [[0.0, 1.0], [np.float32(51) / np.float32(255), np.float32(102) / np.float32(255)]]
    assert ds.x[0, 0, 1, 0] == np.float32(0.2)
    assert ds.y.tolist() == [7, 2]
    assert ds.num_classes == 8


def test_gzip_input(tmp_path):
    img, lab = _write_pair(tmp_path, [[[9]]], [1])
    for p in (img, lab):
        gz = p.with_suffix(".gz")
        gz.write_bytes(gzip.compress(p.read_bytes()))
    ds = load_idx_dataset(img.with_suffix(".gz"), lab.with_suffix(".gz"))
    assert ds.x.item() == np.float32(9) / np.float32(255)


def test_count_mismatch(tmp_path):
    img, lab = _write_pair(tmp_path, [[[1]], [[2]]], [0, 1, 1])
    with pytest.raises(DataError, match="2 images but 3 labels"):
        load_idx_dataset(img, lab)


def test_bad_magic_and_truncation(tmp_path):
    img, lab = _write_pair(tmp_path, [[[1]]], [0], img_magic=0x801)
    with pytest.raises(DataError, match="magic"):
        load_idx_dataset(img, lab)
    img, lab = _write_pair(tmp_path, [[[1]]], [0], n_img=5)
    with pytest.raises(DataError, match="truncated"):
        load_idx_dataset(img, lab)
    (tmp_path / "img").write_bytes(b"\x00\x00")
    with pytest.raises(DataError, match="header"):
        load_idx_dataset(tmp_path / "img", lab)


def test_label_out_of_range(tmp_path):
    img, lab = _write_pair(tmp_path, [[[1]], [[2]]], [0, 4])
    with pytest.raises(DataError, match="out of range"):
        load_idx_dataset(img, lab, num_classes=4)


def test_empty_idx_dataset(tmp_path):
    img, lab = _write_pair(tmp_path, np.zeros((0, 3, 3)), [])
    ds = load_idx_dataset(img, lab)
    assert len(ds) == 0 and ds.x.shape == (0, 1, 3, 3)


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = (rng.integers(0, 256, (5, 1, 4, 3)).astype(np.float32) / np.float32(255))
    ds = Dataset(x, rng.integers(0, 10, 5), 10)
    write_idx_dataset(ds, tmp_path / "i", tmp_path / "l")
    back = load_idx_dataset(tmp_path / "i", tmp_path / "l")
    assert back.x.tobytes() == ds.x.tobytes()
    assert np.array_equal(back.y, ds.y)
    with pytest.raises(DataError):
        write_idx_dataset(Dataset(np.zeros((1, 2, 2, 2)), np.zeros(1), 1), tmp_path / "i", tmp_path / "l")


@pytest.mark.parametrize("kind", ["rings", "moons", "rings-image", "moons-image"])
def test_synthetic_is_deterministic_and_balanced(kind):
    a = gen_synthetic(kind, 400, 0.1, 3)
    b = gen_synthetic(kind, 400, 0.1, 3)
    assert a.x.tobytes() == b.x.tobytes() and np.array_equal(a.y, b.y)
    counts = np.bincount(a.y)
    assert counts.max() - counts.min() <= 1
    assert a.x.ndim == (4 if kind.endswith("image") else 2)


def test_noise_free_rings_separable_by_radius():
    ds = gen_synthetic("rings", 1000, 0.0, 0)
    r = np.hypot(ds.x[:, 0].astype(np.float64), ds.x[:, 1].astype(np.float64))
    # ring c sits at radius c + 1; thresholds halfway between rings
    pred = np.digitize(r, [1.5, 2.5, 3.5])
    assert np.mean(pred == ds.y) == 1.0


def test_synthetic_edge_cases():
    assert len(gen_synthetic("rings", 0, 0.1, 0)) == 0
    with pytest.raises(DataError):
        gen_synthetic("spirals", 10, 0.1, 0)


def test_stratified_probe_five_per_class():
    y = np.repeat(np.arange(10), 100)
    ds = Dataset(np.arange(1000.0)[:, None], y, 10)
    train, probe, test = split_probe(ds, 50, seed=0)
    assert np.bincount(probe.y, minlength=10).tolist() == [5] * 10
    ids = [set(d.x[:, 0].tolist()) for d in (train, probe, test)]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert sum(len(s) for s in ids) == 1000


def test_probe_size_limits():
    ds = Dataset(np.arange(20.0)[:, None], np.arange(20) % 2, 2)
    _, probe, _ = split_probe(ds, 1, seed=0)
    assert len(probe) == 1
    with pytest.raises(DataError):
        split_probe(ds, 0, seed=0)
    with pytest.raises(DataError, match="exceeds"):
        split_probe(ds, 5, seed=0)


def test_probe_from_explicit_heldout():
    train = Dataset(np.zeros((10, 1)), np.zeros(10, int), 2)
    held = Dataset(np.arange(8.0)[:, None], np.arange(8) % 2, 2)
    tr, probe, test = split_probe(train, 4, seed=1, heldout=held)
    assert tr is train
    assert len(probe) == 4 and len(test) == 4
    assert np.bincount(probe.y).tolist() == [2, 2]


def test_stratified_pick_handles_small_classes():
    y = np.array([0, 0, 0, 0, 1])
    picked = stratified_pick(y, 3, np.random.default_rng(0))
    assert 4 in picked and len(picked) == 3


def test_make_digits():
    pytest.importorskip("sklearn")
    tr, te = make_digits(200, 50, noise=0.2, seed=4)
    tr2, _ = make_digits(200, 50, noise=0.2, seed=4)
    assert tr.x.shape == (200, 1, 8, 8) and te.x.shape == (50, 1, 8, 8)
    assert tr.x.tobytes() == tr2.x.tobytes()
    assert 0.0 <= tr.x.min() and tr.x.max() <= 1.0
    assert set(np.unique(tr.y)) <= set(range(10)) and tr.num_classes == 10
    with pytest.raises(DataError):
        make_digits(10, 10, train_sources=0)
