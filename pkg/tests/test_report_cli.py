import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from rptlab import cli
from rptlab import report as rp
from rptlab.errors import ConfigError, ReportValidationError

SVG = "{http://www.w3.org/2000/svg}"
SMALL = ["--synthetic.trials=12", "--synthetic.vocab_size=6"]


def run(args, capsys):
    code = cli.main(args)
    out, err = capsys.readouterr()
    return code, out, err


def config_error(err):
    record = json.loads(err.strip().splitlines()[-1])
    assert record["error"] == "config"
    return record["field"]


@pytest.fixture(scope="module")
def synthetic_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    assert cli.main(["synthetic", "--seed", "3", "--out-dir", str(out), "--format", "csv,json,svg", *SMALL]) == 0
    return out


class TestConfig:
    def test_zero_trials(self, tmp_path, capsys):
        code, _, err = run(["synthetic", "--seed", "1", "--out-dir", str(tmp_path), "--synthetic.trials=0"], capsys)
        assert code == 2 and config_error(err) == "synthetic.trials"
        assert not list(tmp_path.iterdir())

    def test_unknown_key_in_file(self, tmp_path, capsys):
        ini = tmp_path / "c.ini"
        ini.write_text("[bounds]\nseed = 4\ntrails = 10\n")
        code, _, err = run(["bounds", "--config", str(ini), "--out-dir", str(tmp_path)], capsys)
        assert code == 2 and config_error(err) == "bounds.trails"

    def test_unknown_section(self, tmp_path, capsys):
        ini = tmp_path / "c.ini"
        ini.write_text("[plots]\nx = 1\n")
        code, _, err = run(["bounds", "--seed", "1", "--config", str(ini)], capsys)
        assert code == 2 and config_error(err) == "plots"

    def test_seed_required(self, capsys):
        code, _, err = run(["bounds"], capsys)
        assert code == 2 and config_error(err) == "seed"

    def test_bad_format(self, capsys):
        code, _, err = run(["bounds", "--seed", "1", "--format", "csv,pdf"], capsys)
        assert code == 2 and config_error(err) == "format"

    def test_square_vocabulary(self, capsys):
        code, _, err = run(["train-toy", "--seed", "1", "--train-toy.vocab_size", "15"], capsys)
        assert code == 2 and config_error(err) == "train-toy.vocab_size"

    def test_override_beats_file(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[synthetic]\nseed = 9\ntrials = 50\nratios = 0.0, 0.5\n")
        params, seed = cli.resolve("synthetic", str(ini), [("synthetic.trials", "7")])
        assert seed == 9 and params["trials"] == 7 and params["ratios"] == [0.0, 0.5]
        with pytest.raises(ConfigError):
            cli.resolve("synthetic", str(ini), [("bounds.trials", "7")])

    def test_env_out_dir(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(cli.ENV_OUT_DIR, str(tmp_path / "env"))
        code, out, _ = run(["bounds", "--seed", "2", "--bounds.trials=4", "--bounds.vocab_size=5"], capsys)
        assert code == 0 and (tmp_path / "env" / "bounds.csv").exists()
        assert str(tmp_path / "env") in out


class TestSyntheticReport:
    def test_cells(self, synthetic_dir):
        data = json.loads((synthetic_dir / "synthetic.json").read_text())
        assert len(data["aggregates"]) == 9 and len(data["records"]) == 9 * 12
        assert {a["n"] for a in data["aggregates"]} == {12}
        assert data["schema_version"] == rp.SCHEMA_VERSION and data["config"]["seed"] == 3

    def test_csv_matches_json(self, synthetic_dir):
        data = json.loads((synthetic_dir / "synthetic.json").read_text())
        rows = rp.read_csv(synthetic_dir / "synthetic.csv")
        assert len(rows) == len(data["records"])
        for row, rec in zip(rows, data["records"]):
            for col in data["columns"]:
                want = rec[col]
                got = float(row[col])
                assert (math.isnan(got) and want is None) or got == want

    def test_deterministic(self, synthetic_dir, tmp_path):
        assert cli.main(["synthetic", "--seed", "3", "--out-dir", str(tmp_path), "--format", "csv,json,svg", *SMALL]) == 0
        for path in synthetic_dir.iterdir():
            assert (tmp_path / path.name).read_bytes() == path.read_bytes()

    def test_svg_bars_track_counts(self, synthetic_dir):
        files = sorted(synthetic_dir.glob("*.svg"))
        assert [f.name for f in files] == [f"synthetic_hist_noise{b:g}.svg" for b in (0.01, 0.1, 1.0)]
        data = json.loads((synthetic_dir / "synthetic.json").read_text())
        total = sum(sum(h["counts"]) for h in data["histograms"] if h["base_noise"] == 0.01)
        seen = 0
        for panel in ET.parse(files[0]).getroot().iter(f"{SVG}g"):
            bars = panel.findall(f"{SVG}rect[@class='bar']")
            counts = np.array([float(b.get("data-count")) for b in bars])
            heights = np.array([float(b.get("height")) for b in bars])
            np.testing.assert_allclose(heights / counts, heights.max() / counts.max(), rtol=1e-3)
            assert counts.max() == float(panel.get("data-top"))
            seen += counts.sum()
        assert seen == total

    def test_validation_rejects_orphan_aggregates(self, synthetic_dir):
        rep = rp.ExperimentReport.from_dict(json.loads((synthetic_dir / "synthetic.json").read_text()))
        rp.validate_report(rep)
        tampered = rp.ExperimentReport.from_dict(rep.to_dict())
        tampered.aggregates[0]["ntp_tv_mean"] += 1e-6
        with pytest.raises(ReportValidationError):
            rp.validate_report(tampered)
        rep.records = []
        with pytest.raises(ReportValidationError):
            rp.emit_report(rep, ["json"], synthetic_dir / "never")
        assert not (synthetic_dir / "never" / "synthetic.json").exists()


class TestWriting:
    def test_nan_handling(self):
        rep = rp.ExperimentReport("x", {}, ["a", "b"], [{"a": math.nan, "b": [1, 2]}])
        assert json.loads(rep.to_json())["records"][0]["a"] is None
        assert rp.to_csv(rep).splitlines()[1] == "nan,1 2"

    def test_atomic_write_leaves_old_file_on_failure(self, tmp_path, monkeypatch):
        target = tmp_path / "r.json"
        rp.atomic_write_text(target, "old")

        def boom(*_):
            raise OSError("disk full")

        monkeypatch.setattr(rp.os, "replace", boom)
        with pytest.raises(OSError):
            rp.atomic_write_text(target, "new")
        assert target.read_text() == "old" and [p.name for p in tmp_path.iterdir()] == ["r.json"]

    def test_histogram_shared_edges(self):
        edges, counts = rp.histogram([0.0, 0.5, 1.0, math.nan], hi=2.0)
        assert len(edges) == rp.HIST_BINS + 1 and edges[-1] == 2.0 and sum(counts) == 3

    def test_mean_se(self):
        m, se = rp.mean_se([1.0, 2.0, 3.0, None])
        assert m == 2.0 and se == pytest.approx(1 / math.sqrt(3))


class TestCommands:
    TOY = ["--{c}.steps=300", "--{c}.vocab_size=4", "--{c}.order=1", "--{c}.seq_len=24"]

    def toy(self, command):
        return [a.format(c=command) for a in self.TOY]

    def test_train_toy(self, tmp_path, capsys):
        code, out, _ = run(["train-toy", "--seed", "5", "--out-dir", str(tmp_path), "--format", "csv,json,png",
                            *self.toy("train-toy")], capsys)
        assert code == 0
        data = json.loads((tmp_path / "train-toy.json").read_text())
        assert len(data["records"]) == 300 and {"validation", "exact", "ntp_gap"} <= data["summary"].keys()
        assert (tmp_path / "train-toy_loss.png").stat().st_size > 0 and (tmp_path / "train-toy_model.jsonl").exists()

    def test_improve_hist(self, tmp_path, capsys):
        code, _, _ = run(["improve-hist", "--seed", "5", "--out-dir", str(tmp_path), "--format", "json,svg,png",
                          "--improve-hist.num_tokens=200", *self.toy("improve-hist")], capsys)
        assert code == 0
        agg = json.loads((tmp_path / "improve-hist.json").read_text())["aggregates"][0]
        assert agg["improved"] + agg["worsened"] + agg["ties"] == agg["total"] >= 200
        assert (tmp_path / "improve-hist_hist.svg").exists() and (tmp_path / "improve-hist.png").exists()

    def test_tv_table(self, tmp_path, capsys):
        code, _, _ = run(["tv-table", "--seed", "5", "--out-dir", str(tmp_path), "--format", "csv,png",
                          "--tv-table.num_tokens=100", "--tv-table.ks=0,1", *self.toy("tv-table")], capsys)
        rows = rp.read_csv(tmp_path / "tv-table.csv")
        assert code == 0 and [r["k"] for r in rows] == ["0", "1"]
        assert set(rows[0]) == {"k", "coupled_0.9", "coupled_0.9_se", "coupled_0.8", "coupled_0.8_se"}

    def test_sample_with_saved_model(self, tmp_path, capsys):
        assert run(["train-toy", "--seed", "5", "--out-dir", str(tmp_path), *self.toy("train-toy")], capsys)[0] == 0
        code, _, _ = run(["sample", "--seed", "5", "--out-dir", str(tmp_path), "--sample.samples=3",
                          f"--sample.model={tmp_path / 'train-toy_model.jsonl'}", *self.toy("sample")], capsys)
        records = json.loads((tmp_path / "sample.json").read_text())["records"]
        assert code == 0 and len(records) == 3 and all(len(r["final"]) == 32 for r in records)

    def test_bounds_hold(self, tmp_path, capsys):
        code, _, _ = run(["bounds", "--seed", "0", "--out-dir", str(tmp_path), "--format", "json",
                          "--bounds.trials=20", "--bounds.vocab_size=8"], capsys)
        data = json.loads((tmp_path / "bounds.json").read_text())
        assert code == 0 and data["summary"]["violations"] == {"ntp": 0, "kernel": 0, "rpt": 0}
