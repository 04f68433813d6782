import struct

import numpy as np
import pytest

from cxrtriage import networks as N
from cxrtriage.tensor import grad_check, param_refs


def test_extractor_topology():
    spec = N.triage_spec()
    assert spec.extractor_output_shape() == (80, 14, 14)
    names = [n for n, _ in spec.extractor_layers()]
    assert names[:3] == ["stem", "stem_bn", "stem_act"] and names[-1] == "block4"


def test_heads_output_shapes_and_ranges(rng):
    x = rng.random((2, 3, 64, 64))
    tri = N.build_triage_net(0.25, 0, 64)
    out = tri.forward(x)
    assert out.shape == (2, 2)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-5)
    mp = N.build_multipath_net(0.25, 0, 64)
    out = mp.forward(x)
    assert out.shape == (2, 8) and np.all((out > 0) & (out < 1))


@pytest.mark.parametrize("head", ["triage", "multipath"])
def test_full_network_gradients(head):
    build = N.build_triage_net if head == "triage" else N.build_multipath_net
    bundle = build(0.25, seed=2, input_size=32, dtype=np.float64)
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    report = grad_check(bundle.graph, x, n_probes=100, seed=1, train=True)
    assert report.ok(1e-4), report.per_layer


def test_transplant_copies_and_freezes():
    src = N.build_triage_net(0.25, 0, 32)
    dst = N.transplant_extractor(src, N.multipath_spec(0.25, 32))
    for a, b in zip(param_refs(src.extractor, True), param_refs(dst.extractor, True)):
        assert a.name == b.name and np.array_equal(a.value, b.value)
    assert all(not r.layer.trainable for r in param_refs(dst.extractor))
    assert all(r.layer.trainable for r in param_refs(dst.graph) if not r.name.startswith("extractor"))


def test_transplant_rejects_other_topology():
    src = N.build_triage_net(0.5, 0, 32)
    with pytest.raises(N.IncompatibleTopology):
        N.transplant_extractor(src, N.multipath_spec(0.25, 32))


def test_bundle_roundtrip(tmp_path, rng):
    b = N.transplant_extractor(N.build_triage_net(0.25, 0, 32), N.multipath_spec(0.25, 32))
    b.threshold = 0.4
    N.save_bundle(b, tmp_path / "m.cxr")
    c = N.load_bundle(tmp_path / "m.cxr")
    assert c.threshold == 0.4 and c.frozen_layers() == b.frozen_layers()
    for k, v in b.params.items():
        assert np.array_equal(v, c.params[k])
    x = rng.random((1, 3, 32, 32))
    assert np.array_equal(b.forward(x), c.forward(x))


def test_bundle_bytes_deterministic(tmp_path):
    b = N.build_triage_net(0.25, 3, 32)
    N.save_bundle(b, tmp_path / "a.cxr")
    N.save_bundle(N.build_triage_net(0.25, 3, 32), tmp_path / "b.cxr")
    assert (tmp_path / "a.cxr").read_bytes() == (tmp_path / "b.cxr").read_bytes()


def test_bundle_corruption_detected(tmp_path):
    path = tmp_path / "m.cxr"
    N.save_bundle(N.build_triage_net(0.25, 0, 32), path)
    data = bytearray(path.read_bytes())
    data[-5] ^= 0xFF
    (tmp_path / "bad.cxr").write_bytes(bytes(data))
    with pytest.raises(N.BundleError):
        N.load_bundle(tmp_path / "bad.cxr")
    (tmp_path / "short.cxr").write_bytes(bytes(data[: len(data) // 2]))
    with pytest.raises(N.BundleError):
        N.load_bundle(tmp_path / "short.cxr")
    (tmp_path / "magic.cxr").write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(N.BundleError):
        N.load_bundle(tmp_path / "magic.cxr")


def test_bundle_version_mismatch(tmp_path):
    path = tmp_path / "m.cxr"
    N.save_bundle(N.build_triage_net(0.25, 0, 32), path)
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 99)
    (tmp_path / "v.cxr").write_bytes(bytes(data))
    with pytest.raises(N.BundleVersionError):
        N.load_bundle(tmp_path / "v.cxr")


def test_spec_roundtrip():
    spec = N.multipath_spec(0.5, 64)
    assert N.NetworkSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        N.NetworkSpec("triage_head", ["a", "b", "c"])
