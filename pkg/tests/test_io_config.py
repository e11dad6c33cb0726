import json

import numpy as np
import pytest

from facerecon import io
from facerecon.config import CONFIG_VERSION, ConfigError, RunConfig, load_run_config
from facerecon.network import NetworkConfig
from facerecon.pipeline import SceneConfig
from facerecon.training import TrainConfig


def test_container_round_trip_keeps_dtype_and_meta(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.int32).reshape(2, 3), "b": np.linspace(0, 1, 5)}
    io.save_arrays(tmp_path / "x.npz", arrays, "thing", meta={"k": [1, 2]})
    out, meta = io.load_arrays(tmp_path / "x.npz", "thing")
    assert meta == {"k": [1, 2]}
    for k, v in arrays.items():
        assert out[k].dtype == v.dtype
        np.testing.assert_array_equal(out[k], v)


def test_container_big_endian_is_stored_little_endian(tmp_path):
    io.save_arrays(tmp_path / "x.npz", {"a": np.arange(3, dtype=">f8")}, "thing")
    out, _ = io.load_arrays(tmp_path / "x.npz", "thing")
    assert out["a"].dtype.byteorder in ("<", "=")
    np.testing.assert_array_equal(out["a"], [0.0, 1.0, 2.0])


def test_container_kind_mismatch(tmp_path):
    io.save_arrays(tmp_path / "x.npz", {"a": np.zeros(1)}, "checkpoint")
    with pytest.raises(io.FormatError, match="morphable_model"):
        io.load_arrays(tmp_path / "x.npz", "morphable_model")


def test_container_version_mismatch(tmp_path):
    header = {"format": "facerecon-container", "version": 99, "kind": "thing", "meta": {}}
    np.savez(tmp_path / "x.npz", a=np.zeros(1),
             __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8))
    with pytest.raises(io.FormatError, match="version"):
        io.load_arrays(tmp_path / "x.npz", "thing")


def test_container_rejects_garbage_and_headerless(tmp_path):
    (tmp_path / "g.npz").write_bytes(b"not a zip at all")
    with pytest.raises(io.FormatError):
        io.load_arrays(tmp_path / "g.npz", "thing")
    np.savez(tmp_path / "h.npz", a=np.zeros(1))
    with pytest.raises(io.FormatError, match="header"):
        io.load_arrays(tmp_path / "h.npz", "thing")
    with pytest.raises(ValueError, match="reserved"):
        io.save_arrays(tmp_path / "r.npz", {"__x": np.zeros(1)}, "thing")


def test_obj_round_trip_is_exact(tmp_path, rng):
    v = rng.normal(size=(7, 3)) * 100
    f = np.array([[0, 1, 2], [2, 3, 4], [4, 5, 6]])
    io.write_obj(tmp_path / "m.obj", v, f, colors=rng.uniform(size=(7, 3)))
    v2, f2 = io.read_obj(tmp_path / "m.obj")
    np.testing.assert_array_equal(v2, v)
    np.testing.assert_array_equal(f2, f)
    io.write_obj(tmp_path / "uv.obj", v, f, uvs=rng.uniform(size=(7, 2)))
    v3, f3 = io.read_obj(tmp_path / "uv.obj")
    np.testing.assert_array_equal(v3, v)
    np.testing.assert_array_equal(f3, f)


def test_obj_quads_negative_indices_and_errors(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4 -3 -2 -1\n")
    _, f = io.read_obj(tmp_path / "q.obj")
    np.testing.assert_array_equal(f, [[0, 1, 2], [0, 2, 3]])
    (tmp_path / "bad.obj").write_text("v 0 0 zero\n")
    with pytest.raises(io.FormatError, match=":1:"):
        io.read_obj(tmp_path / "bad.obj")
    (tmp_path / "range.obj").write_text("v 0 0 0\nf 1 2 3\n")
    with pytest.raises(io.FormatError, match="range"):
        io.read_obj(tmp_path / "range.obj")
    (tmp_path / "empty.obj").write_text("# nothing\n")
    with pytest.raises(io.FormatError, match="no vertices"):
        io.read_obj(tmp_path / "empty.obj")


def test_png_round_trip_within_one_level(tmp_path, rng):
    img = rng.uniform(size=(9, 11, 3))
    io.write_png(tmp_path / "i.png", img)
    back = io.read_png(tmp_path / "i.png")
    assert back.shape == (9, 11, 3)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_png_clamps_and_mask(tmp_path):
    io.write_png(tmp_path / "c.png", np.array([[[-1.0, 0.5, 2.0]]]))
    np.testing.assert_array_equal(io.read_png(tmp_path / "c.png")[0, 0], [0.0, 128 / 255, 1.0])
    io.write_png(tmp_path / "m.png", np.array([[0.0, 0.01], [1.0, 0.0]]))
    np.testing.assert_array_equal(io.read_mask(tmp_path / "m.png"), [[0, 1], [1, 0]])
    (tmp_path / "x.png").write_bytes(b"nope")
    with pytest.raises(io.FormatError):
        io.read_png(tmp_path / "x.png")


def test_landmarks_round_trip_and_errors(tmp_path, rng):
    pts = rng.uniform(0, 224, size=(68, 2))
    io.write_landmarks(tmp_path / "l.txt", pts)
    np.testing.assert_array_equal(io.read_landmarks(tmp_path / "l.txt"), pts)
    (tmp_path / "short.txt").write_text("1 2\n" * 67)
    with pytest.raises(io.FormatError, match="68"):
        io.read_landmarks(tmp_path / "short.txt")
    (tmp_path / "word.txt").write_text("1 2\n" * 67 + "a b\n")
    with pytest.raises(io.FormatError, match="non-numeric"):
        io.read_landmarks(tmp_path / "word.txt")
    (tmp_path / "nan.txt").write_text("1 2\n" * 67 + "nan 3\n")
    with pytest.raises(io.FormatError, match="non-finite"):
        io.read_landmarks(tmp_path / "nan.txt")
    with pytest.raises(io.FormatError):
        io.read_landmarks(tmp_path / "missing.txt")


def _tiny_config_dict(**extra):
    d = {"version": CONFIG_VERSION, "network": NetworkConfig.tiny().to_dict(),
         "camera": SceneConfig.scaled(32).to_dict(), "train": {"batch_size": 2, "epochs": 1}}
    d.update(extra)
    return d


def test_run_config_round_trip(tmp_path):
    cfg = RunConfig.from_dict(_tiny_config_dict())
    cfg.write(tmp_path / "c.json")
    again = load_run_config(tmp_path / "c.json")
    assert again == cfg
    assert again.train == TrainConfig(batch_size=2, epochs=1)


def test_run_config_defaults_are_consistent():
    cfg = RunConfig.from_dict({"version": CONFIG_VERSION})
    assert cfg.network.input_size == cfg.camera.image_size == 224


@pytest.mark.parametrize("patch, match", [
    ({"extra": 1}, "unknown config sections"),
    ({"version": 2}, "version"),
    ({"train": {"batch_size": 2, "learning_rate": 1}}, "unknown train keys"),
    ({"camera": {"image_size": 32, "fov": 3}}, "unknown camera keys"),
    ({"paths": {"data": "x"}}, "unknown paths keys"),
    ({"camera": SceneConfig().to_dict()}, "input_size"),
    ({"train": {"batch_size": 0}}, "positive"),
])
def test_run_config_rejections(patch, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_dict(_tiny_config_dict(**patch))


def test_run_config_rejects_missing_version_and_non_objects(tmp_path):
    with pytest.raises(ConfigError, match="version"):
        RunConfig.from_dict({})
    with pytest.raises(ConfigError, match="object"):
        RunConfig.from_dict([1])
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_run_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError, match="cannot read"):
        load_run_config(tmp_path / "absent.json")


def test_model_path_resolves_against_config_directory(tmp_path):
    sub = tmp_path / "cfgs"
    sub.mkdir()
    (sub / "run.json").write_text(json.dumps(_tiny_config_dict(paths={"model": "../models/m.npz"})))
    cfg = load_run_config(sub / "run.json")
    assert cfg.paths["model"] == str((tmp_path / "models" / "m.npz").resolve())
