import numpy as np
import torch

from cerkit import pipeline
from cerkit.dataset import ManifestRecord


def test_feature_data_shapes(toy_data):
    cfg, records, encoders, aug = toy_data
    train = [r for r in records if r.split == "train"]
    data = pipeline.feature_data(train, encoders, aug, seed=0)
    assert data.features.shape == (len(train), 128)
    assert int((data.basic >= 0).sum()) == 21 and int((data.compound >= 0).sum()) == 84
    v1, v2 = data.views(0)
    assert v1.shape == v2.shape == data.features.shape
    assert not torch.equal(v1, v2)
    w1, _ = data.views(1)
    assert not torch.equal(v1, w1)
    assert torch.equal(v1, data.views(0)[0])


def test_feature_cache_reuse(tmp_path, toy_data):
    cfg, records, encoders, aug = toy_data
    direct = pipeline.original_features(records, encoders, aug)
    first = pipeline.original_features(records, encoders, aug, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("*.cerf"))) == 2
    second = pipeline.original_features(records, encoders, aug, cache_dir=tmp_path)
    assert torch.equal(direct, first) and torch.equal(first, second)


def test_lenient_encoding(tmp_path, toy_data):
    cfg, records, encoders, aug = toy_data
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"\x00")
    paths = [records[0].image_path, str(bad), records[1].image_path]
    feats, ok = pipeline.encode_paths_lenient(paths, encoders, aug)
    assert ok == [True, False, True]
    strict = pipeline.original_features([records[0], records[1]], encoders, aug)
    assert torch.equal(feats[[0, 2]], strict)


def test_view_seeds_are_distinct():
    seeds = {pipeline.view_seed(0, e, i) for e in range(3) for i in range(50)}
    assert len(seeds) == 150
