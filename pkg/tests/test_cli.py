"""Command-line interface: flows, file outputs, exit codes."""

import json

import pytest

from dssmooth.cli import build_parser, cli
from dssmooth.harness import ExperimentConfig, load_dataset
from dssmooth.verify import CalibrationSet


def tiny_config_file(tmp_path, **overrides):
    base = dict(n_classes=2, seq_len=24, emb_dim=8, hidden_dim=8,
                train_per_class=20, test_per_class=8, length_lo=10,
                length_hi=16, epochs=30, batch_size=8, lr=0.5, j_benign=3,
                n_watermarked=2, n_independent=2,
                positions=(19, 20, 21, 22, 23), group_size_smooth=4,
                samples=48, kappa=0.2, seed=414)
    base.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(ExperimentConfig(**base).to_json())
    return path


class TestParser:
    def test_requires_subcommand(self):
        with pytest.raises(SystemExit) as err:
            build_parser().parse_args([])
        assert err.value.code == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as err:
            build_parser().parse_args(["frobnicate"])
        assert err.value.code == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as err:
            build_parser().parse_args(["verify", "--nonsense"])
        assert err.value.code == 2

    def test_lambda_maps_to_group_size(self):
        args = build_parser().parse_args(["verify", "--lambda", "6"])
        assert args.group_size == 6

    def test_attack_kind_restricted(self):
        with pytest.raises(SystemExit) as err:
            build_parser().parse_args(["attack", "--kind", "meteor"])
        assert err.value.code == 2


class TestVerifyFromRecords:
    def write_inputs(self, tmp_path):
        cal = CalibrationSet(values=tuple((2 * i + 1) / 20 for i in range(10)))
        cal_path = tmp_path / "cal.json"
        cal_path.write_text(cal.to_json())
        wr_path = tmp_path / "wr.json"
        wr_path.write_text(json.dumps({"records": [
            {"model": "suspect-a", "wr": 0.9, "r_e": 0.0, "r_p": 0.0},
            {"model": "suspect-b", "wr": 0.5},
        ]}))
        return cal_path, wr_path

    def test_decision_lines_and_verdict_file(self, tmp_path, capsys):
        cal_path, wr_path = self.write_inputs(tmp_path)
        # J=10, kappa=0.2 keeps 8, alpha0=0.1 steps back to the 8th
        # smallest calibration value 0.75
        code = cli(["verify", "--calibration", str(cal_path),
                    "--wr", str(wr_path), "--alpha0", "0.1",
                    "--kappa", "0.2", "--out-dir", str(tmp_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "suspect-a: wr=0.9000 threshold=0.7500 decision=OWNED" in out
        assert "suspect-b: wr=0.5000 threshold=0.7500 decision=not-owned" in out
        verdicts = json.loads((tmp_path / "verdict.json").read_text())
        assert [v["decision"] for v in verdicts] == [True, False]
        assert verdicts[0]["threshold"] == pytest.approx(0.75)

    def test_bare_list_records(self, tmp_path, capsys):
        cal_path, _ = self.write_inputs(tmp_path)
        wr_path = tmp_path / "bare.json"
        wr_path.write_text(json.dumps([{"wr": 0.99}]))
        code = cli(["verify", "--calibration", str(cal_path),
                    "--wr", str(wr_path), "--alpha0", "0.1",
                    "--kappa", "0.2", "--out-dir", str(tmp_path)])
        assert code == 0
        assert "suspect: wr=0.9900" in capsys.readouterr().out

    def test_missing_file_is_run_failure(self, tmp_path, capsys):
        code = cli(["verify", "--calibration", str(tmp_path / "absent.json"),
                    "--wr", str(tmp_path / "absent.json"),
                    "--out-dir", str(tmp_path)])
        assert code == 1
        record = json.loads(capsys.readouterr().err)
        assert record["error"] == "FileNotFoundError"


class TestReport:
    def test_merges_existing_records(self, tmp_path, capsys):
        (tmp_path / "metrics.json").write_text(json.dumps(
            {"vsr": 1.0, "wsr": 0.97}))
        (tmp_path / "verdicts.jsonl").write_text(json.dumps(
            {"wr": 0.9, "threshold": 0.3, "decision": True,
             "certified_embedding": True, "certified_permutation": False}
        ) + "\n")
        code = cli(["report", "--out-dir", str(tmp_path)])
        assert code == 0
        merged = json.loads((tmp_path / "report.json").read_text())
        assert merged["metrics"]["vsr"] == 1.0
        assert len(merged["verdicts"]) == 1
        csv = (tmp_path / "report.csv").read_text().splitlines()
        assert csv[0] == "section,key,value"
        assert "metrics,vsr,1.0" in csv
        assert "verdict-0,decision,True" in csv

    def test_empty_dir_fails(self, tmp_path, capsys):
        code = cli(["report", "--out-dir", str(tmp_path / "nothing")])
        assert code == 1
        assert json.loads(capsys.readouterr().err)["error"] == "InputError"


class TestPipeline:
    def test_watermark_certify_verify_report(self, tmp_path, capsys):
        cfg_path = tiny_config_file(tmp_path)
        out = tmp_path / "run"

        assert cli(["watermark", "--config", str(cfg_path),
                    "--out-dir", str(out)]) == 0
        ds = load_dataset(out / "watermarked.tsv")
        assert ds.size > 0
        assert (out / "manifest.json").exists()

        assert cli(["train", "--config", str(cfg_path), "--pool", "benign",
                    "--out-dir", str(out)]) == 0
        assert "pool benign: 3 models" in capsys.readouterr().out

        assert cli(["certify", "--config", str(cfg_path), "--mode", "dual",
                    "--out-dir", str(out)]) == 0
        records = json.loads((out / "wr_records.json").read_text())
        assert len(records["records"]) == 4
        assert records["mode"] == "dual"
        assert (out / "cal.json").exists()

        assert cli(["verify", "--calibration", str(out / "cal.json"),
                    "--wr", str(out / "wr_records.json"),
                    "--alpha0", "0.05", "--kappa", "0.2",
                    "--out-dir", str(out)]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines()
                 if "decision=" in l]
        assert len(lines) == 4

        assert cli(["report", "--out-dir", str(out)]) == 0
        merged = json.loads((out / "report.json").read_text())
        for section in ("config", "metrics", "manifest", "calibration",
                        "verdicts"):
            assert section in merged

    def test_gaussian_only_forces_group_one(self, tmp_path):
        cfg_path = tiny_config_file(tmp_path, seed=515)
        out = tmp_path / "gauss"
        assert cli(["certify", "--config", str(cfg_path),
                    "--mode", "gaussian_only", "--out-dir", str(out)]) == 0
        records = json.loads((out / "wr_records.json").read_text())
        assert all(r["group_size"] == 1 for r in records["records"])

    def test_verify_full_run_prints_summary(self, tmp_path, capsys):
        cfg_path = tiny_config_file(tmp_path, seed=616)
        out = tmp_path / "full"
        assert cli(["verify", "--config", str(cfg_path),
                    "--out-dir", str(out)]) == 0
        line = capsys.readouterr().out
        assert "threshold=" in line and "vsr=" in line and "fpr=" in line
