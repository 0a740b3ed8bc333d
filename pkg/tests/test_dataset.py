import json

import numpy as np
import pytest

from swarmseg.dataset import load_dataset, load_manifest, load_sample, save_dataset, save_sample
from swarmseg.errors import DataError

from conftest import TINY_WORLD


def assert_same(a, b):
    assert a.n_agents == b.n_agents and a.seed == b.seed and a.viewports == b.viewports
    for x, y in zip(a.observations + a.gt_masks + a.obstruction_masks, b.observations + b.gt_masks + b.obstruction_masks):
        np.testing.assert_array_equal(x, y)
    assert a.correspondences.keys() == b.correspondences.keys()
    for k in a.correspondences:
        np.testing.assert_array_equal(a.correspondences[k], b.correspondences[k])


def test_sample_round_trip(tiny_samples, tmp_path):
    save_sample(tiny_samples[0], tmp_path / "s")
    back = load_sample(tmp_path / "s")
    assert_same(tiny_samples[0], back)
    assert back.gt_masks[0].dtype.kind == "i" and back.obstruction_masks[0].dtype == bool


def test_dataset_round_trip(tiny_samples, tmp_path):
    save_dataset(tiny_samples, tmp_path, TINY_WORLD, 5)
    samples, world = load_dataset(tmp_path)
    assert world == TINY_WORLD
    assert load_manifest(tmp_path)["seed"] == 5
    for a, b in zip(tiny_samples, samples):
        assert_same(a, b)


def test_missing_directory(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope")
    with pytest.raises(DataError):
        load_sample(tmp_path)


def test_truncated_tensor_file(tiny_samples, tmp_path):
    save_sample(tiny_samples[0], tmp_path)
    f = tmp_path / "agent_0.bin"
    f.write_bytes(f.read_bytes()[:-5])
    with pytest.raises(DataError):
        load_sample(tmp_path)


def test_manifest_version_checked(tiny_samples, tmp_path):
    save_dataset(tiny_samples[:1], tmp_path, TINY_WORLD, 5)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["layout_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DataError):
        load_manifest(tmp_path)
