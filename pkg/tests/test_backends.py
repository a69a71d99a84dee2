import json
import os
import subprocess
import sys

import pytest
import torch

import oracles
from asymcycle.backends import (
    BackendError, edges_as_image, extract_edges, extract_features, load_backend, perceptual_distance,
    pooled_features, write_weights,
)
from asymcycle import backends as backends_mod
from conftest import load_png

# Golden stub outputs on tests/data/img8_a.png (and img8_b.png for the distance).
GOLDEN_FEATURE_SUM = 56.36274719238281
GOLDEN_FEATURE_ENTRY = 0.36589494347572327  # [5, 1, 0]
GOLDEN_EDGE_SUM = 30.904937744140625
GOLDEN_EDGE_ENTRY = 0.6190671920776367  # [0, 3, 4]
GOLDEN_DISTANCE_AB = 2.5038633346557617


def test_stub_golden_digest():
    a, b = load_png("img8_a.png"), load_png("img8_b.png")
    with torch.no_grad():
        feats = extract_features(load_backend("stub_feature"), a)
        edges = extract_edges(load_backend("stub_edge"), a)
        dist = perceptual_distance(load_backend("stub_distance"), a, b)
    assert feats.shape == (64, 2, 2)
    assert feats.sum().item() == pytest.approx(GOLDEN_FEATURE_SUM, abs=1e-5)
    assert feats[5, 1, 0].item() == pytest.approx(GOLDEN_FEATURE_ENTRY, abs=1e-5)
    assert edges.sum().item() == pytest.approx(GOLDEN_EDGE_SUM, abs=1e-5)
    assert edges[0, 3, 4].item() == pytest.approx(GOLDEN_EDGE_ENTRY, abs=1e-5)
    assert dist.item() == pytest.approx(GOLDEN_DISTANCE_AB, abs=1e-5)


def test_stub_deterministic_across_processes():
    code = (
        "import torch;from asymcycle.backends import load_backend;"
        "b=load_backend('stub_feature');torch.manual_seed(99);"
        "print(repr(sum(p.double().sum().item() for p in b.parameters())))"
    )
    other = float(subprocess.check_output([sys.executable, "-c", code]).decode())
    here = sum(p.double().sum().item() for p in load_backend("stub_feature").parameters())
    assert other == here


@pytest.mark.parametrize("kind", ["stub_feature", "stub_edge", "stub_distance"])
def test_stub_handles_frozen(kind):
    b = load_backend(kind)
    assert b.kind == kind and b.frozen and not b.training
    b.train()
    assert not b.training


def test_stub_rejects_weights_path(tmp_path):
    with pytest.raises(BackendError):
        load_backend("stub_edge", str(tmp_path))


def test_unknown_kind():
    with pytest.raises(BackendError, match="unknown backend kind"):
        load_backend("sobel")


def test_real_kind_requires_weights(tmp_path):
    with pytest.raises(BackendError, match="needs a weights directory"):
        load_backend("feature_vgg16_relu3_3")
    with pytest.raises(BackendError, match="does not exist"):
        load_backend("feature_vgg16_relu3_3", str(tmp_path / "missing"))


@pytest.fixture(scope="module")
def vgg_weights(tmp_path_factory):
    torch.manual_seed(0)
    module = backends_mod.VGGRelu33()
    return write_weights(module, str(tmp_path_factory.mktemp("vgg")), "feature_vgg16_relu3_3")


def test_vgg_features_shape_and_sign(vgg_weights):
    b = load_backend("feature_vgg16_relu3_3", vgg_weights)
    img = torch.rand(3, 256, 256) * 2 - 1
    with torch.no_grad():
        f = extract_features(b, img)
    assert f.shape == (256, 64, 64)
    assert (f >= 0).all()
    assert b.source_layer == "relu3_3"


def test_weights_loaded_twice_agree(vgg_weights):
    img = torch.rand(1, 3, 32, 32) * 2 - 1
    with torch.no_grad():
        a = load_backend("feature_vgg16_relu3_3", vgg_weights)(img)
        b = load_backend("feature_vgg16_relu3_3", vgg_weights)(img)
    assert torch.equal(a, b)


def test_weight_round_trip_is_exact(vgg_weights):
    b = load_backend("feature_vgg16_relu3_3", vgg_weights)
    torch.manual_seed(0)
    original = backends_mod.VGGRelu33()
    for (name, p), (_, q) in zip(original.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), name


def test_shape_mismatch_names_entry(vgg_weights, tmp_path):
    import shutil

    bad = tmp_path / "bad"
    shutil.copytree(vgg_weights, bad)
    manifest = json.loads((bad / "manifest.json").read_text())
    manifest["entries"][2]["shape"] = [1, 2, 3]
    (bad / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(BackendError, match="shape mismatch for 'features.2.weight'"):
        load_backend("feature_vgg16_relu3_3", str(bad))


def test_missing_entry_reported(vgg_weights, tmp_path):
    import shutil

    bad = tmp_path / "bad"
    shutil.copytree(vgg_weights, bad)
    manifest = json.loads((bad / "manifest.json").read_text())
    del manifest["entries"][0]
    (bad / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(BackendError, match="missing entry 'features.0.weight'"):
        load_backend("feature_vgg16_relu3_3", str(bad))


def test_manifest_is_raw_little_endian_float32(vgg_weights):
    import numpy as np

    manifest = json.loads(open(os.path.join(vgg_weights, "manifest.json")).read())
    entry = manifest["entries"][0]
    raw = np.fromfile(os.path.join(vgg_weights, entry["file"]), dtype="<f4")
    assert entry["dtype"] == "float32" and raw.size == int(np.prod(entry["shape"]))


def test_real_edge_and_distance_kinds_round_trip(tmp_path):
    torch.manual_seed(0)
    edge_dir = write_weights(backends_mod.DexiNedEdge(), str(tmp_path / "dexined"))
    dist_dir = write_weights(backends_mod.LPIPSDistance(), str(tmp_path / "lpips"))
    edge = load_backend("edge_dexined", edge_dir)
    dist = load_backend("lpips_distance", dist_dir)
    img = torch.rand(1, 3, 48, 48) * 2 - 1
    with torch.no_grad():
        e = extract_edges(edge, img)
        assert e.shape == (1, 1, 48, 48)
        assert e.min() >= 0 and e.max() <= 1
        assert perceptual_distance(dist, img, img).item() == 0
        other = torch.rand(1, 3, 48, 48) * 2 - 1
        assert perceptual_distance(dist, img, other).item() > 0


def test_inception_pool_features(tmp_path):
    torch.manual_seed(0)
    path = write_weights(backends_mod.InceptionPool(), str(tmp_path / "inception"))
    b = load_backend("inception_v3", path)
    with torch.no_grad():
        f = pooled_features(b, torch.rand(2, 3, 64, 64) * 2 - 1)
    assert f.shape == (2, 2048)


def test_wrong_kind_rejected():
    f, e, d = (load_backend(k) for k in ("stub_feature", "stub_edge", "stub_distance"))
    img = torch.zeros(3, 8, 8)
    with pytest.raises(BackendError):
        extract_features(e, img)
    with pytest.raises(BackendError):
        extract_edges(f, img)
    with pytest.raises(BackendError):
        perceptual_distance(f, img, img)


def test_stub_feature_contract():
    b = load_backend("stub_feature")
    img = torch.rand(3, 32, 24) * 2 - 1
    with torch.no_grad():
        f = extract_features(b, img)
        assert f.shape == (64, 8, 6)
        assert (f >= 0).all() and torch.isfinite(f).all()
        assert torch.equal(f, extract_features(b, img.clone()))


@pytest.mark.parametrize("value", [-1.0, -0.3, 0.0, 0.7, 1.0])
def test_constant_image_constant_edges(value):
    b = load_backend("stub_edge")
    with torch.no_grad():
        e = extract_edges(b, torch.full((3, 24, 24), value))
    assert e.shape == (1, 24, 24)
    assert (e.max() - e.min()).item() <= 0.05


def test_edge_range_and_determinism():
    b = load_backend("stub_edge")
    img = torch.randn(2, 3, 16, 16) * 4
    with torch.no_grad():
        e1, e2 = extract_edges(b, img), extract_edges(b, img)
    assert e1.min() >= 0 and e1.max() <= 1
    assert torch.equal(e1, e2)


def test_distance_identity_and_symmetry():
    d = load_backend("stub_distance")
    torch.manual_seed(0)
    a, c = torch.rand(2, 3, 16, 16) * 2 - 1, torch.rand(2, 3, 16, 16) * 2 - 1
    with torch.no_grad():
        assert perceptual_distance(d, a, a).item() == 0.0
        assert perceptual_distance(d, a, c).item() == perceptual_distance(d, c, a).item()


def test_distance_positive_on_random_pairs():
    d = load_backend("stub_distance")
    gen = torch.Generator().manual_seed(11)
    with torch.no_grad():
        values = [perceptual_distance(d, torch.rand(3, 16, 16, generator=gen) * 2 - 1,
                                      torch.rand(3, 16, 16, generator=gen) * 2 - 1).item() for _ in range(100)]
    assert min(values) > 0


def test_single_channel_inputs_replicated():
    d = load_backend("stub_distance")
    a, c = torch.rand(1, 16, 16), torch.rand(1, 16, 16)
    with torch.no_grad():
        assert perceptual_distance(d, a, c).item() == perceptual_distance(d, a.expand(3, -1, -1), c.expand(3, -1, -1)).item()
        assert edges_as_image(a).shape == (3, 16, 16)


def test_distance_shape_mismatch():
    with pytest.raises(BackendError, match="shape mismatch"):
        perceptual_distance(load_backend("stub_distance"), torch.zeros(3, 8, 8), torch.zeros(3, 8, 16))


def test_gradient_passes_through_frozen_backends():
    dist = load_backend("stub_distance").double()
    edge = load_backend("stub_edge").double()
    torch.manual_seed(3)
    a = torch.rand(1, 3, 8, 8, dtype=torch.float64) * 2 - 1
    c = (torch.rand(1, 3, 8, 8, dtype=torch.float64) * 2 - 1).requires_grad_()

    def value():
        return perceptual_distance(dist, edges_as_image(extract_edges(edge, a)), edges_as_image(extract_edges(edge, c)))

    value().backward()
    assert all(p.grad is None for p in [*dist.parameters(), *edge.parameters()])
    assert c.grad.abs().sum() > 0
    for index in (0, 50, 150):
        numeric = oracles.central_difference(value, c.data, index)
        assert oracles.relative_error(c.grad.view(-1)[index].item(), numeric) < 1e-3
