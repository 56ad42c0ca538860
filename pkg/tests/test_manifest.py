import json

import numpy as np
import pandas as pd

from tfrcast import SCHEMA_VERSION, __version__
from tfrcast.manifest import RunManifest, hash_file, hash_files, read_csv, write_csv


class TestRunManifest:
    def test_id_ignores_timestamps(self):
        a = RunManifest("train", "cfg", "data", 7, created_at="2020-01-01T00:00:00")
        b = RunManifest("train", "cfg", "data", 7, created_at="2024-05-05T12:00:00")
        assert a.manifest_id == b.manifest_id
        assert len(a.manifest_id) == 16

    def test_id_tracks_inputs(self):
        base = RunManifest("train", "cfg", "data", 7)
        assert base.manifest_id != RunManifest("train", "cfg", "data", 8).manifest_id
        assert base.manifest_id != RunManifest("train", "cfg2", "data", 7).manifest_id
        assert base.manifest_id != RunManifest("forecast", "cfg", "data", 7).manifest_id

    def test_write_and_reload(self, tmp_path):
        manifest = RunManifest("ingest", "cfg", "data", 0)
        manifest.add_output("panel", str(tmp_path / "panel.csv"))
        path = manifest.write(str(tmp_path / "out"))

        with open(path) as f:
            data = json.load(f)
        assert data["manifest_id"] == manifest.manifest_id
        assert data["version"] == __version__
        assert data["schema_version"] == SCHEMA_VERSION
        assert data["finished_at"] is not None
        assert RunManifest.from_dict(data).manifest_id == manifest.manifest_id


class TestFiles:
    def test_hash_file(self, tmp_path):
        a = tmp_path / "a.txt"
        a.write_bytes(b"abc")
        assert (
            hash_file(str(a))
            == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        )

    def test_hash_files_is_order_sensitive(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.write_text("one")
        b.write_text("two")
        assert hash_files([str(a), str(b)]) != hash_files([str(b), str(a)])

    def test_csv_carries_manifest_line(self, tmp_path):
        frame = pd.DataFrame({"country_code": ["AAA", "BBB"], "value": [1.5, 2.0]})
        path = tmp_path / "sub" / "t.csv"
        write_csv(frame, str(path), manifest_id="0123456789abcdef")
        lines = path.read_text().splitlines()
        assert lines[0] == "# manifest=0123456789abcdef"
        assert lines[1] == "country_code,value"
        pd.testing.assert_frame_equal(read_csv(str(path)), frame)

    def test_csv_is_byte_stable(self, tmp_path):
        frame = pd.DataFrame({"x": [0.1, 1 / 3]})
        write_csv(frame, str(tmp_path / "a.csv"), "m")
        write_csv(frame, str(tmp_path / "b.csv"), "m")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_csv_floats_round_trip_exactly(self, tmp_path):
        rng = np.random.default_rng(11)
        frame = pd.DataFrame(
            {
                "year": np.arange(300),
                "tfr": rng.uniform(0.8, 8.0, 300),
                "tiny": rng.normal(0.0, 1e-9, 300),
            }
        )
        path = str(tmp_path / "floats.csv")
        write_csv(frame, path, "m")
        back = read_csv(path)
        assert np.array_equal(back["tfr"].to_numpy(), frame["tfr"].to_numpy())
        assert np.array_equal(back["tiny"].to_numpy(), frame["tiny"].to_numpy())

        write_csv(back, str(tmp_path / "again.csv"), "m")
        assert (tmp_path / "again.csv").read_bytes() == open(path, "rb").read()
