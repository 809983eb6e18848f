import math
import struct
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cerkit.encoders import (
    CacheFormatError,
    DuplicateEncoder,
    Encoder,
    EncoderSpec,
    FeatureBatch,
    ToyMLP,
    WeightsNotLoaded,
    build_encoder,
    get_encoder_spec,
    iter_feature_cache,
    parse_encoder_string,
    read_cache_header,
    read_feature_cache,
    register_encoder,
    registered_encoders,
    split_encoder_list,
    write_feature_cache,
)
from cerkit.errors import ShapeMismatch

GOLDEN = Path(__file__).parent / "golden"


@pytest.mark.parametrize("name, dim", [("posterv2", 768), ("resnet50", 2048), ("resnet18", 512)])
def test_builtin_dims(name, dim):
    assert get_encoder_spec(name).output_dim == dim


def test_toy_dim_configurable():
    enc = build_encoder("toy-mlp(dim=8)")
    assert enc.spec.output_dim == 8
    assert enc.encode_batch(torch.zeros(2, 3, 16, 16)).features.shape == (2, 8)


def test_duplicate_registration():
    with pytest.raises(DuplicateEncoder):
        register_encoder(EncoderSpec("posterv2", 768), lambda **kw: None)
    assert registered_encoders()["posterv2"].output_dim == 768


def test_register_custom_encoder():
    spec = EncoderSpec("test-linear-4", 4)
    module = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(3 * 8 * 8, 4))
    register_encoder(spec, lambda: Encoder(spec, module, resolution=8))
    enc = build_encoder("test-linear-4")
    assert enc.encode_batch(torch.ones(3, 3, 8, 8)).dim == 4


def test_pretrained_backbones_need_weights():
    for name in ("posterv2", "resnet50", "resnet18"):
        enc = build_encoder(name)
        with pytest.raises(WeightsNotLoaded):
            enc.encode_batch(torch.zeros(1, 3, 224, 224))


def test_resnet18_from_state_dict(tmp_path):
    import torchvision

    net = torchvision.models.resnet18(weights=None)
    path = tmp_path / "r18.pt"
    torch.save(net.state_dict(), path)
    enc = build_encoder(f"resnet18(weights={str(path)!r}, resolution=64)")
    out = enc.encode_batch(torch.randn(2, 3, 64, 64))
    assert out.features.shape == (2, 512)


@pytest.mark.filterwarnings("ignore:`torch.jit.script` is deprecated:DeprecationWarning")
def test_declared_dim_is_checked(tmp_path):
    module = torch.jit.script(torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(3 * 224 * 224, 5)))
    path = tmp_path / "fake_poster.pt"
    module.save(str(path))
    enc = build_encoder(f"posterv2(weights={str(path)!r})")
    with pytest.raises(ShapeMismatch):
        enc.encode_batch(torch.zeros(1, 3, 224, 224))


def test_resolution_mismatch():
    enc = build_encoder("toy-mlp(dim=8, resolution=16)")
    with pytest.raises(ShapeMismatch):
        enc.encode_batch(torch.zeros(1, 3, 224, 224))


def test_zero_weights_give_zero_features():
    enc = build_encoder("toy-mlp(dim=8)")
    with torch.no_grad():
        for p in enc.module.parameters():
            p.zero_()
    out = enc.encode_batch(torch.rand(3, 3, 16, 16))
    assert torch.count_nonzero(out.features) == 0


def test_toy_matches_dense_oracle():
    enc = build_encoder("toy-mlp(dim=8, seed=7, resolution=4, hidden=5)")
    x = torch.rand(2, 3, 4, 4, generator=torch.Generator().manual_seed(0))
    got = enc.encode_batch(x).features.numpy()
    w1 = enc.module.fc1.weight.detach().numpy().astype(np.float64)
    b1 = enc.module.fc1.bias.detach().numpy().astype(np.float64)
    w2 = enc.module.fc2.weight.detach().numpy().astype(np.float64)
    b2 = enc.module.fc2.bias.detach().numpy().astype(np.float64)
    flat = x.numpy().reshape(2, -1).astype(np.float64)
    expected = np.zeros((2, 8))
    for i in range(2):
        hidden = [math.tanh(sum(w1[j, k] * flat[i, k] for k in range(flat.shape[1])) + b1[j]) for j in range(5)]
        for o in range(8):
            expected[i, o] = sum(w2[o, j] * hidden[j] for j in range(5)) + b2[o]
    np.testing.assert_allclose(got, expected, atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 40), st.integers(0, 99))
def test_output_width_matches_spec(b, dim, seed):
    enc = build_encoder(f"toy-mlp(dim={dim}, seed={seed}, resolution=8)")
    x = torch.randn(b, 3, 8, 8)
    first = enc.encode_batch(x)
    assert first.features.shape == (b, enc.spec.output_dim)
    assert torch.equal(first.features, enc.encode_batch(x).features)


def test_parse_encoder_strings():
    assert parse_encoder_string("toy-mlp(dim=8, seed=1)") == ("toy-mlp", {"dim": 8, "seed": 1})
    assert parse_encoder_string("resnet50") == ("resnet50", {})
    assert split_encoder_list("toy-mlp(dim=8, seed=1), posterv2") == ["toy-mlp(dim=8, seed=1)", "posterv2"]


def test_cache_roundtrip_3x4(tmp_path, rng):
    x = rng.standard_normal((3, 4)).astype(np.float32)
    p = tmp_path / "f.cerf"
    write_feature_cache(FeatureBatch(torch.from_numpy(x), "toy"), p)
    back = read_feature_cache(p).features.numpy()
    assert back.tobytes() == x.tobytes()


def test_cache_streamed_batches(tmp_path, rng):
    x = rng.standard_normal((10, 3)).astype(np.float32)
    p = tmp_path / "f.cerf"
    assert write_feature_cache((x[i : i + 4] for i in range(0, 10, 4)), p) == (10, 3)
    parts = list(iter_feature_cache(p, 4))
    assert [b.batch_size for b in parts] == [4, 4, 2]
    np.testing.assert_array_equal(torch.cat([b.features for b in parts]).numpy(), x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 30), st.integers(1, 20), st.integers(0, 2**31))
def test_cache_roundtrip_property(tmp_path_factory, n, d, seed):
    x = np.random.default_rng(seed).standard_normal((n, d)).astype(np.float32)
    p = tmp_path_factory.mktemp("c") / "f.cerf"
    write_feature_cache(x, p)
    assert read_feature_cache(p).features.numpy().tobytes() == x.tobytes()


def test_cache_header_bytes(tmp_path):
    p = tmp_path / "f.cerf"
    write_feature_cache(np.zeros((5, 768), dtype=np.float32), p)
    raw = p.read_bytes()
    assert raw[:4] == b"CERF"
    assert struct.unpack("<III", raw[4:16]) == (1, 5, 768)
    assert len(raw) == 16 + 5 * 768 * 4
    assert read_cache_header(p) == (5, 768)


def test_cache_golden(tmp_path):
    x = np.array([[1.0, -2.0, 0.5], [0.25, 3.0, -0.125]], dtype=np.float32)
    p = tmp_path / "f.cerf"
    write_feature_cache(x, p)
    assert p.read_bytes() == (GOLDEN / "features_2x3.cerf").read_bytes()
    np.testing.assert_array_equal(read_feature_cache(GOLDEN / "features_2x3.cerf").features.numpy(), x)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda raw: raw[:-3],  # truncated payload
        lambda raw: b"CERX" + raw[4:],
        lambda raw: raw[:4] + struct.pack("<I", 2) + raw[8:],
        lambda raw: raw[:10],
        lambda raw: raw + b"\0\0\0\0",
    ],
)
def test_cache_format_errors(tmp_path, mutate):
    p = tmp_path / "f.cerf"
    write_feature_cache(np.ones((2, 3), dtype=np.float32), p)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(CacheFormatError):
        read_feature_cache(p)


def test_cache_rejects_mixed_widths(tmp_path):
    with pytest.raises(CacheFormatError):
        write_feature_cache([np.zeros((1, 3)), np.zeros((1, 4))], tmp_path / "f.cerf")
