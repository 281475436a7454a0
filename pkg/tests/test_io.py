import json
import zipfile

import numpy as np
import pytest
import torch

from lagvid import io
from lagvid.nets import LagrangianModel
from lagvid.simulators import ObservationDataset, SystemSpec, TrajectoryDataset, generate_observations, generate_trajectories
from lagvid.vision import AutoEncoder


def test_container_roundtrip_and_determinism(tmp_path):
    tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.ones(4)}
    meta = {"format_version": io.FORMAT_VERSION, "kind": "test", "x": [1, 2]}
    io.write_container(tmp_path / "one.zip", tensors, meta, io.CHECKPOINT_DTYPE)
    io.write_container(tmp_path / "two.zip", dict(reversed(tensors.items())), meta, io.CHECKPOINT_DTYPE)
    assert (tmp_path / "one.zip").read_bytes() == (tmp_path / "two.zip").read_bytes()
    back, meta_back = io.read_container(tmp_path / "one.zip", io.CHECKPOINT_DTYPE)
    assert meta_back == meta
    assert set(back) == {"a", "b"}
    np.testing.assert_array_equal(back["b"], tensors["b"])
    with zipfile.ZipFile(tmp_path / "one.zip") as zf:
        assert zf.namelist() == ["metadata.json", "a.npy", "b.npy"]


def test_container_errors(tmp_path):
    bad = tmp_path / "bad.lvd"
    bad.write_bytes(b"not a zip")
    with pytest.raises(io.FormatError):
        io.read_container(bad)
    io.write_container(tmp_path / "v.zip", {}, {"format_version": 99}, io.DATASET_DTYPE)
    with pytest.raises(io.FormatError):
        io.read_container(tmp_path / "v.zip")
    io.write_container(tmp_path / "d.zip", {"x": np.ones(2)}, {"format_version": 1}, io.DATASET_DTYPE)
    with pytest.raises(io.FormatError):
        io.read_container(tmp_path / "d.zip", io.CHECKPOINT_DTYPE)


def test_state_dataset_roundtrip(tmp_path):
    spec = SystemSpec("acrobot", dt=0.02)
    ds = generate_trajectories(spec, 3, 5, seed=4)
    ds.states = ds.states.astype(np.float32)
    io.save_dataset(tmp_path / "s.lvd", ds)
    back = io.load_dataset(tmp_path / "s.lvd")
    assert isinstance(back, TrajectoryDataset)
    assert back.states.tobytes() == ds.states.tobytes()
    assert back.spec == spec and back.seed == 4
    meta = io.dataset_metadata(tmp_path / "s.lvd")
    assert (meta["N"], meta["T"], meta["system"], meta["dt"], meta["rendered"]) == (3, 5, "acrobot", 0.02, False)


def test_rendered_dataset_roundtrip(tmp_path):
    ds = generate_observations(SystemSpec("pendulum"), 2, 3, seed=1)
    io.save_dataset(tmp_path / "r.lvd", ds, store_observations=True)
    back = io.load_dataset(tmp_path / "r.lvd")
    assert isinstance(back, ObservationDataset)
    assert back.frames.tobytes() == ds.frames.tobytes()
    np.testing.assert_array_equal(back.states, ds.states.astype(np.float32))
    meta = io.dataset_metadata(tmp_path / "r.lvd")
    assert (meta["T"], meta["H"], meta["W"], meta["N"], meta["seed"]) == (3, 32, 32, 2, 1)


def test_tampered_observations_rejected(tmp_path):
    ds = generate_observations(SystemSpec("pendulum"), 1, 2, seed=1)
    tensors = {"states": ds.states, "frames": ds.frames, "observations": ds.observations * 0}
    meta = {"format_version": 1, "kind": "dataset", "system": "pendulum", "dt": 0.05, "seed": 1, "N": 1,
            "constants": ds.spec.constants, "T": 2, "H": 32, "W": 32, "rendered": True}
    io.write_container(tmp_path / "t.lvd", tensors, meta, io.DATASET_DTYPE)
    with pytest.raises(io.FormatError):
        io.load_dataset(tmp_path / "t.lvd")


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    model = LagrangianModel(2, hidden=6)
    ae = AutoEncoder(4)
    io.save_checkpoint(tmp_path / "c.lvc", model, ae, {"regime": "video", "epoch": 3})
    m2, ae2, meta = io.load_checkpoint(tmp_path / "c.lvc")
    assert meta["regime"] == "video" and meta["dtype"] == "float32"
    for a, b in ((model, m2), (ae, ae2)):
        for k, v in a.state_dict().items():
            assert torch.equal(v, b.state_dict()[k])
    io.save_checkpoint(tmp_path / "d.lvc", m2, ae2, {"regime": "video", "epoch": 3})
    assert (tmp_path / "c.lvc").read_bytes() == (tmp_path / "d.lvc").read_bytes()


def test_checkpoint_float64_without_autoencoder(tmp_path):
    model = LagrangianModel(1, hidden=4, lam=0.5).double()
    io.save_checkpoint(tmp_path / "c.lvc", model)
    m2, ae, meta = io.load_checkpoint(tmp_path / "c.lvc")
    assert ae is None and m2.lam == 0.5 and next(m2.parameters()).dtype == torch.float64


def test_checkpoint_kind_and_shape_checks(tmp_path):
    ds = generate_trajectories(SystemSpec("pendulum"), 1, 2)
    io.save_dataset(tmp_path / "s.lvd", ds)
    with pytest.raises(io.FormatError):
        io.load_checkpoint(tmp_path / "s.lvd")
    model = LagrangianModel(1, hidden=4)
    io.save_checkpoint(tmp_path / "c.lvc", model)
    tensors, meta = io.read_container(tmp_path / "c.lvc")
    meta["lagrangian"]["hidden"] = 5
    io.write_container(tmp_path / "bad.lvc", tensors, meta, io.CHECKPOINT_DTYPE)
    with pytest.raises(io.FormatError):
        io.load_checkpoint(tmp_path / "bad.lvc")


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    io.write_pgm(tmp_path / "a.pgm", img)
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n4 3\n255\n") and len(data) == 11 + 12
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "a.pgm"), io.to_gray_bytes(img))
    assert io.to_gray_bytes(np.array([-1.0, 0.5, 2.0])).tolist() == [0, 128, 255]
    with pytest.raises(ValueError):
        io.write_pgm(tmp_path / "b.pgm", np.zeros((2, 2, 2)))


def test_pgm_reader_handles_comments_and_rejects_bad_files(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert io.read_pgm(p).tolist() == [[0, 255]]
    p.write_bytes(b"P2\n2 1\n255\n0 255")
    with pytest.raises(io.FormatError):
        io.read_pgm(p)
    p.write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(io.FormatError):
        io.read_pgm(p)


def test_image_strip_layout():
    a, b = np.ones((2, 2)), np.zeros((2, 2))
    strip = io.image_strip([[a, b], [None, a]])
    assert strip.shape == (5, 5)
    assert strip[2, 0] == 0.5  # gap
    np.testing.assert_array_equal(strip[3:5, 0:2], 0.15)
    with pytest.raises(ValueError):
        io.image_strip([[None]])


def test_checksum(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"abc")
    assert io.file_checksum(p) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert json.dumps(io.FORMAT_VERSION) == "1"
