import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmfno import container, dataset as ds, ftm
from pmfno.dataset import DatasetConfig, DatasetError, ExcitationSpec


def test_fnv1a_known_vectors():
    assert container.fnv1a64_bytes(b"") == "cbf29ce484222325"
    assert container.fnv1a64_bytes(b"a") == "af63dc4c8601ec8c"
    assert container.fnv1a64_bytes(b"foobar") == "85944171f73967e8"


@settings(max_examples=20, deadline=None)
@given(st.lists(st.binary(min_size=12, max_size=12), min_size=1, max_size=6))
def test_vectorized_hash_matches_scalar(rows):
    arr = np.frombuffer(b"".join(rows), dtype=np.uint8).reshape(len(rows), 12)
    assert container.fnv1a64(arr) == [container.fnv1a64_bytes(r) for r in rows]


def test_container_round_trip_and_errors(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 4, 5))
    container.write(tmp_path / "c", {"kind": "test"}, arr, "f64le")
    manifest, back = container.read(tmp_path / "c")
    assert np.array_equal(back, arr) and manifest["shape"] == [3, 4, 5]
    raw = (tmp_path / "c" / "data.bin").read_bytes()
    assert raw[:4] == b"PMFN" and struct.unpack("<I", raw[4:8])[0] == 1

    (tmp_path / "c" / "data.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(container.BadMagicError, match="bad magic"):
        container.read(tmp_path / "c")
    (tmp_path / "c" / "data.bin").write_bytes(raw[:-8])
    with pytest.raises(container.TruncatedBlobError):
        container.read(tmp_path / "c")
    (tmp_path / "c" / "data.bin").write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(container.VersionMismatchError):
        container.read(tmp_path / "c")
    (tmp_path / "c" / "data.bin").write_bytes(raw)
    m = json.loads((tmp_path / "c" / "manifest.json").read_text())
    m["shape"] = [3, 4, 6]
    (tmp_path / "c" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(container.ShapeMismatchError):
        container.read(tmp_path / "c")
    codes = {c.code for c in (container.BadMagicError, container.TruncatedBlobError,
                              container.VersionMismatchError, container.ShapeMismatchError,
                              container.HashMismatchError)}
    assert len(codes) == 5


# -- initial conditions --------------------------------------------------------------

def test_impulse_single_nonzero():
    p = ftm.StringParams()
    u = ds.make_initial_condition(ExcitationSpec("impulse", 0.5, 1e-3), p)
    assert np.count_nonzero(u) == 1 and u[0, 32] == 1e-3


def test_pluck_shape():
    p = ftm.StringParams(grid_points=64)
    spec = ExcitationSpec("pluck", 0.5, 2e-3, width=0.4)
    x = p.grid / p.length
    u = ds.make_initial_condition(spec, p)[0]
    d = x - 0.5
    inside = np.abs(d) <= 0.2
    np.testing.assert_allclose(u[inside], 1e-3 * (1 + np.cos(2 * np.pi * d[inside] / 0.4)))
    assert np.all(u[~inside] == 0)
    # C1 continuity: the bump and its slope vanish at the support edge
    f = lambda t: 0.5 * (1 + np.cos(2 * np.pi * t / 0.4))
    assert f(0.2) == pytest.approx(0, abs=1e-15)
    assert (f(0.2) - f(0.2 - 1e-6)) / 1e-6 == pytest.approx(0, abs=1e-4)
    assert f(0.0) == 1.0


def test_excitation_validation():
    with pytest.raises(DatasetError):
        ExcitationSpec("pluck", 1.2, 1e-3)
    with pytest.raises(DatasetError):
        ExcitationSpec("pluck", 0.5, -1.0)
    with pytest.raises(DatasetError):
        ExcitationSpec("pluck", 0.5, 1e-3, width=1.5)
    with pytest.raises(DatasetError):
        ExcitationSpec.from_dict({"kind": "pluck", "colour": 1})


def test_random_field_is_representable():
    for params in (ftm.StringParams(grid_points=32), ftm.Wave2DParams(nx=8, ny=8)):
        sys = ftm.modal_system(params)
        spec = ExcitationSpec("random", 0.5 if isinstance(params, ftm.StringParams) else (0.5, 0.5), 1.0)
        u = ds.make_initial_condition(spec, params, np.random.default_rng(1))
        assert np.max(np.abs(ftm.project(sys, u) - u)) < 1e-9 * np.max(np.abs(u))
        assert np.max(np.abs(u[0])) == pytest.approx(1.0)
    u = ds.make_initial_condition(ExcitationSpec("random", (0.5, 0.5), 1.0), ftm.Wave2DParams(nx=8, ny=8),
                                  np.random.default_rng(2))
    w = np.ones(8)
    w[[0, -1]] = 0.5
    assert abs(np.sum(np.outer(w, w) * u[0])) < 1e-12  # no DC cosine mode


# -- generation ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small():
    return ds.generate("string", {"grid_points": 16}, DatasetConfig(samples=20, steps=8, seed=3))


def test_generate_shapes_and_split(small):
    assert small.samples.shape == (20, 9, 2, 16)
    assert small.split == 18 and len(small.validation) == 2
    assert set(small.kinds) <= {"impulse", "pluck", "random"}
    assert small.kinds.count("random") == 10
    assert np.var(small.train) == pytest.approx(1.0, abs=1e-2)


def test_frame_zero_is_initial_condition(small):
    phys = small.denormalize(small.samples)
    sim = ds.Simulator(small.params)
    for s in phys[:5]:
        assert np.max(np.abs(sim.band_limit(s[0]) - s[0])) < 1e-9 * np.max(np.abs(s[0]))
        np.testing.assert_allclose(sim.run(s[0], 8), s, rtol=1e-9, atol=1e-9 * np.max(np.abs(s)))


def test_global_normalization_option():
    d = ds.generate("string", {"grid_points": 16}, DatasetConfig(samples=10, steps=4, normalization="global"))
    assert np.all(d.channel_scale == 1.0)
    assert np.var(d.train) == pytest.approx(1.0, abs=1e-2)


def test_full_scale_split():
    cfg = DatasetConfig(samples=1024, steps=1)
    d = ds.generate("string", {"grid_points": 16}, cfg)
    assert d.samples.shape[0] == 1024 and len(d.validation) == 102


def test_generation_is_deterministic(tmp_path):
    a = ds.generate("string", {"grid_points": 16}, DatasetConfig(samples=4, steps=2, seed=11))
    b = ds.generate("string", {"grid_points": 16}, DatasetConfig(samples=4, steps=2, seed=11))
    ds.save(a, tmp_path / "a")
    ds.save(b, tmp_path / "b")
    for f in ("data.bin", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    c = ds.generate("string", {"grid_points": 16}, DatasetConfig(samples=4, steps=2, seed=12))
    assert not np.array_equal(a.samples, c.samples)


def test_all_systems_generate():
    w = ds.generate("wave2d", {"nx": 8, "ny": 8}, DatasetConfig(samples=4, steps=3))
    assert w.samples.shape == (4, 4, 3, 8, 8)
    n = ds.generate("nlstring", {"grid_points": 16}, DatasetConfig(samples=4, steps=3))
    assert n.samples.shape == (4, 4, 2, 16)
    assert np.all(np.isfinite(n.samples))


def test_generation_errors():
    with pytest.raises(DatasetError):
        DatasetConfig(samples=3)
    with pytest.raises(DatasetError):
        ds.make_params("string", {"stiffness": 1})
    with pytest.raises(DatasetError):
        ds.generate("drum")
    with pytest.raises(ftm.SynthesisError):
        ds.generate("string", {"grid_points": 16, "d1": 100.0}, DatasetConfig(samples=2, steps=1))


# -- persistence ------------------------------------------------------------------------

def test_save_load_round_trip(small, tmp_path):
    m = ds.save(small, tmp_path / "d")
    assert m["kind"] == "dataset" and m["dtype"] == "f32le"
    assert isinstance(m["scale"], str) and len(m["sample_hashes"]) == 20
    assert m["shape"] == [20, 9, 2, 16] and m["states"] == ["u0", "u1"]
    back = ds.load(tmp_path / "d")
    np.testing.assert_array_equal(back.samples, small.samples.astype(np.float32))
    assert back.split == small.split and back.system == "string"
    ds.save(back, tmp_path / "e")
    assert (tmp_path / "d" / "data.bin").read_bytes() == (tmp_path / "e" / "data.bin").read_bytes()
    assert (tmp_path / "d" / "manifest.json").read_bytes() == (tmp_path / "e" / "manifest.json").read_bytes()


def test_load_detects_tampering(small, tmp_path):
    ds.save(small, tmp_path / "d")
    path = tmp_path / "d" / "data.bin"
    raw = bytearray(path.read_bytes())
    raw[8 + 5 * 9 * 2 * 16 * 4 + 3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(container.HashMismatchError, match="sample 5"):
        ds.load(tmp_path / "d")
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    m["sample_hashes"] = m["sample_hashes"][:-1]
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(container.HashMismatchError):
        ds.load(tmp_path / "d")
    assert ds.load(tmp_path / "d", verify=False).samples.shape[0] == 20
