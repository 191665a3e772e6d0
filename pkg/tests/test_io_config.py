import numpy as np
import pytest
import yaml
from hypothesis import given, strategies as st

from gfnoma.config import ConfigError, ExperimentConfig, config_from_dict, dump_config, load_config
from gfnoma.io import (ContainerError, csv_comment, frame_to_csv, load_frames, read_container,
                       read_csv, read_header, save_frames, write_container, write_csv)


class TestContainer:
    @given(dtypes=st.lists(st.sampled_from(["f4", "f8", "c8", "c16", "i1", "u1", "i8"]),
                           min_size=1, max_size=4), seed=st.integers(0, 2**31 - 1))
    def test_round_trip(self, dtypes, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        arrays = {f"a{i}": (rng.standard_normal((2, 3)) * 10).astype(d) for i, d in enumerate(dtypes)}
        path = tmp_path_factory.mktemp("c") / "x.gfn"
        write_container(path, "test", arrays, {"note": "hi"}, config_hash="h1")
        header, back = read_container(path, kind="test")
        assert header["note"] == "hi" and header["config_hash"] == "h1"
        for k, a in arrays.items():
            np.testing.assert_array_equal(back[k], a)
            assert back[k].dtype == a.dtype.newbyteorder("<")

    def test_layout(self, tmp_path):
        path = write_container(tmp_path / "x.gfn", "k", {"v": np.arange(3, dtype="<i4")})
        raw = path.read_bytes()
        assert raw[:8] == b"GFNOMA\x00\x01"
        n = int.from_bytes(raw[8:12], "little")
        assert raw[12 + n:] == np.arange(3, dtype="<i4").tobytes()
        assert read_header(path)["sections"][0]["shape"] == [3]

    def test_errors(self, tmp_path):
        bad = tmp_path / "bad.gfn"
        bad.write_bytes(b"nope" * 4)
        with pytest.raises(ContainerError):
            read_container(bad)
        good = write_container(tmp_path / "g.gfn", "frames", {"a": np.zeros(2)})
        with pytest.raises(ContainerError):
            read_container(good, kind="cnn_checkpoint")
        good.write_bytes(good.read_bytes()[:-4])
        with pytest.raises(ContainerError):
            read_container(good)

    def test_frames(self, tmp_path, small_frames):
        path = save_frames(tmp_path / "f.gfn", small_frames, config_hash="abc",
                           extra_header={"split": "train"})
        fr, header = load_frames(path)
        assert header["split"] == "train" and header["config_hash"] == "abc"
        np.testing.assert_array_equal(fr.activity, small_frames.activity)
        np.testing.assert_array_equal(fr.symbols, small_frames.symbols)
        np.testing.assert_allclose(fr.Y, small_frames.Y, rtol=1e-6, atol=1e-6)
        assert fr.noise_var == small_frames.noise_var

    def test_frame_csv(self, tmp_path, small_frames):
        p = frame_to_csv(tmp_path / "f.csv", small_frames.frame(0))
        rows = read_csv(p)
        assert len(rows) == 2 * 8 * 4
        assert complex(float(rows[5]["re"]), float(rows[5]["im"])) == small_frames.Y[0].ravel()[5]


class TestCsv:
    def test_round_trip_and_comment(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", [{"x": 0.1, "y": np.int64(3)}, {"x": float("nan")}],
                      ("x", "y"), comment="config_hash: abc\nseed: 4")
        assert csv_comment(p) == {"config_hash": "abc", "seed": "4"}
        rows = read_csv(p)
        assert float(rows[0]["x"]) == 0.1 and rows[0]["y"] == "3" and rows[1]["y"] == ""


class TestConfig:
    def test_defaults_are_desk_scale(self):
        c = load_config()
        s = c.system
        assert (s.K, s.Nc, s.M, s.Ns, s.Pmax) == (16, 16, 8, 8, 0.1)
        assert c.data.n_samples == 20000 and c.data.split_sizes() == (16000, 2000, 2000)

    def test_yaml_round_trip(self, tmp_path):
        c = config_from_dict({"seed": 3, "system": {"K": 8}, "evaluation": {"snr_db": [1, 2]}})
        back = load_config(dump_config(c, tmp_path / "c.yaml"))
        assert back == c and back.fingerprint() == c.fingerprint()

    def test_fingerprint_ignores_output_dir_only(self):
        c = load_config()
        assert c.replace(output_dir="elsewhere").fingerprint() == c.fingerprint()
        assert c.replace(seed=1).fingerprint() != c.fingerprint()

    @pytest.mark.parametrize("bad", [
        {"data": {"n_samples": 0}},
        {"system": {"K": 0}},
        {"system": {"Pmax": 1.5}},
        {"system": {"bogus": 1}},
        {"train": {"learning_rate": -1}},
        {"data": {"split": [0.5, 0.5, 0.5]}},
        {"detectors": {"selected": ["magic"]}},
        {"seed": -1},
        {"system": {"group_powers": [1, 2], "group_sizes": [3, 3]}},
    ])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            config_from_dict(bad)

    def test_paper_scale_accepted(self):
        c = config_from_dict({"system": {"K": 40, "Nc": 32, "M": 100}, "data": {"n_samples": 100000}})
        assert c.system.M == 100

    def test_unreadable(self, tmp_path):
        p = tmp_path / "x.yaml"
        p.write_text("system: [unclosed")
        with pytest.raises(ConfigError):
            load_config(p)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.yaml")
