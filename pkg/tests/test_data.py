import numpy as np
import pytest
import torch
from PIL import Image

from vitdeceive.checkpoint import CheckpointError, load_container, save_container
from vitdeceive.data import DatasetSpec, ManifestError, generate_dataset, load_image_dir, split


def test_dataset_is_balanced_and_deterministic():
    spec = DatasetSpec(per_class=5)
    x, y = generate_dataset(spec)
    assert x.shape == (20, 3, 32, 32)
    assert torch.bincount(y).tolist() == [5, 5, 5, 5]
    assert 0.0 <= float(x.min()) and float(x.max()) <= 1.0
    x2, _ = generate_dataset(spec)
    assert torch.equal(x, x2)
    x3, _ = generate_dataset(DatasetSpec(per_class=5, seed=1))
    assert not torch.equal(x, x3)


def test_split_partitions():
    x, y = generate_dataset(DatasetSpec(per_class=5))
    (xa, ya), (xb, yb) = split(x, y, 0.25, 0)
    assert xa.shape[0] == 15 and xb.shape[0] == 5
    assert sorted((ya.tolist() + yb.tolist())) == sorted(y.tolist())


def test_load_image_dir(tmp_path):
    for i in range(2):
        Image.fromarray(np.full((32, 32, 3), 40 * i, dtype=np.uint8)).save(tmp_path / f"{i}.png")
    (tmp_path / "labels.csv").write_text("filename,label\n0.png,0\n1.png,3\n")
    x, y = load_image_dir(tmp_path)
    assert x.shape == (2, 3, 32, 32) and y.tolist() == [0, 3]
    assert abs(float(x[1].max()) - 40 / 255) < 1e-6


def test_load_image_dir_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image_dir(tmp_path / "missing")
    with pytest.raises(ManifestError):
        load_image_dir(tmp_path)
    (tmp_path / "labels.csv").write_text("a.png,1,2\n")
    with pytest.raises(ManifestError):
        load_image_dir(tmp_path)


def test_container_roundtrip(tmp_path):
    path = save_container(tmp_path / "c.npz", "thing", {"a": 1}, {"w": np.arange(3.0)}, extra={"b": 2})
    meta, arrays = load_container(path, expected_kind="thing")
    assert meta["config"] == {"a": 1} and meta["extra"] == {"b": 2}
    assert np.array_equal(arrays["w"], np.arange(3.0))
    with pytest.raises(CheckpointError):
        load_container(path, expected_kind="other")
