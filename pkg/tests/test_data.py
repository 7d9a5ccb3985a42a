import logging

import numpy as np
import pytest
from PIL import Image

from fewshot_adapt.data import (FewShotDataset, ImageDataset, from_uint8, iterate_batches, load_image_dir,
                                make_grid, save_image_dir, save_image_grid, to_uint8)


def _write_dir(path, n, size=12, seed=0):
    r = np.random.default_rng(seed)
    path.mkdir(exist_ok=True)
    for i in range(n):
        Image.fromarray(r.integers(0, 256, (size, size, 3), dtype=np.uint8)).save(path / f"f{i:03d}.png")
    return path


def test_load_is_seeded_and_deterministic(tmp_path):
    d = _write_dir(tmp_path / "many", 300, size=8)
    a = load_image_dir(d, 8, limit=10, seed=0)
    b = load_image_dir(d, 8, limit=10, seed=0)
    c = load_image_dir(d, 8, limit=10, seed=1)
    assert a.k == 10 and a.tags == b.tags and np.array_equal(a.images, b.images)
    assert a.tags != c.tags


def test_white_image_maps_to_one(tmp_path):
    d = tmp_path / "white"
    d.mkdir()
    Image.new("RGB", (20, 30), (255, 255, 255)).save(d / "w.png")
    ds = load_image_dir(d, 16)
    assert ds.images.shape == (1, 3, 16, 16)
    assert (ds.images == 1.0).all()


def test_short_directory_warns(tmp_path, caplog):
    d = _write_dir(tmp_path / "five", 5)
    with caplog.at_level(logging.WARNING):
        ds = load_image_dir(d, 8, limit=10)
    assert ds.k == 5 and "only 5" in caplog.text


def test_undecodable_files_skipped(tmp_path, caplog):
    d = _write_dir(tmp_path / "mixed", 2)
    (d / "broken.png").write_bytes(b"not an image")
    with caplog.at_level(logging.WARNING):
        ds = load_image_dir(d, 8, limit=3)
    assert ds.k == 2 and "undecodable" in caplog.text
    only_bad = tmp_path / "bad"
    only_bad.mkdir()
    (only_bad / "x.png").write_bytes(b"junk")
    with pytest.raises(FileNotFoundError):
        load_image_dir(only_bad, 8)


def test_missing_or_empty_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image_dir(tmp_path / "nope", 8)
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError):
        load_image_dir(tmp_path / "empty", 8)


def test_center_crop(tmp_path):
    d = tmp_path / "wide"
    d.mkdir()
    arr = np.zeros((4, 8, 3), dtype=np.uint8)
    arr[:, 2:6] = 255
    Image.fromarray(arr).save(d / "a.png")
    assert (load_image_dir(d, 4).images == 1.0).all()


def test_iterate_batches_single_image():
    ds = FewShotDataset(np.zeros((1, 3, 4, 4), np.float32) + 0.5)
    batch = next(iterate_batches(ds, 4, np.random.default_rng(0)))
    assert batch.shape == (4, 3, 4, 4) and (batch == 0.5).all()


def test_iterate_batches_uniform_and_deterministic():
    k = 10
    imgs = np.broadcast_to(np.arange(k, dtype=np.float32)[:, None, None, None] / k, (k, 1, 1, 1)).copy()
    ds = FewShotDataset(imgs)
    it = iterate_batches(ds, 4, np.random.default_rng(0))
    draws = np.concatenate([next(it)[:, 0, 0, 0] for _ in range(25_000)])
    freq = np.bincount(np.rint(draws * k).astype(int), minlength=k) / len(draws)
    assert np.all(np.abs(freq - 1 / k) < 0.02 / k)
    again = iterate_batches(ds, 4, np.random.default_rng(0))
    it2 = iterate_batches(ds, 4, np.random.default_rng(0))
    assert all(np.array_equal(next(again), next(it2)) for _ in range(5))
    with pytest.raises(ValueError):
        next(iterate_batches(ds, 0, np.random.default_rng(0)))


def test_dataset_validation():
    with pytest.raises(ValueError):
        ImageDataset(np.full((1, 3, 2, 2), 2.0, np.float32))
    with pytest.raises(ValueError):
        FewShotDataset(np.zeros((1001, 1, 1, 1), np.float32))


def test_uint8_roundtrip_within_quantization(rng):
    x = rng.uniform(-1, 1, (3, 3, 5, 5)).astype(np.float32)
    assert np.max(np.abs(from_uint8(to_uint8(x)) - x)) <= 1 / 127.5


def test_saved_images_reload_within_quantization(tmp_path, rng):
    x = rng.uniform(-1, 1, (6, 3, 8, 8)).astype(np.float32)
    save_image_dir(x, tmp_path / "out")
    back = load_image_dir(tmp_path / "out", 8, limit=6)
    order = [int(t.rsplit("_", 1)[1].split(".")[0]) for t in back.tags]
    assert np.max(np.abs(back.images - x[order])) <= 1 / 127.5
    save_image_grid(x[:1], tmp_path / "grid" / "g.png", ncol=1)
    g = np.asarray(Image.open(tmp_path / "grid" / "g.png"))
    assert np.max(np.abs(from_uint8(g[None, 1:-1, 1:-1]) - x[:1])) <= 1 / 127.5


def test_grid_layout(rng):
    x = rng.uniform(-1, 1, (5, 3, 4, 4))
    g = make_grid(x, ncol=3)
    assert g.shape == (2 * 5 + 1, 3 * 5 + 1, 3)
    assert np.array_equal(g[6:10, 1:5], to_uint8(x)[3])
