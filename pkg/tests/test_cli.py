import json
import subprocess
import sys

import jsonschema
import pytest

from iuppose.cli import main
from iuppose.metrics import REPORT_SCHEMA


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text("scene.count = 6\nscene.seed = 3\noptim.batch_size = 2\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "m.ckpt"),
                 "--steps", "3"]) == 0
    return root


def test_gen_data_outputs(workspace):
    data = workspace / "data"
    assert len((data / "manifest.txt").read_text().splitlines()) == 6
    assert "scene.count = 6" in (data / "config.echo.cfg").read_text()
    assert (data / "pair_000000" / "i0.ppm").exists()


def test_train_outputs(workspace):
    log = (workspace / "m.ckpt.log.csv").read_text().splitlines()
    assert log[0].startswith("step,lr,") and len(log) == 4
    assert "optim.total_steps = 3" in (workspace / "m.ckpt.cfg").read_text()


def test_eval_report(workspace, capsys):
    out = workspace / "r.json"
    assert main(["eval", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "data"), "--report", str(out)]) == 0
    jsonschema.validate(json.loads(out.read_text()), REPORT_SCHEMA)
    assert "AUC" in capsys.readouterr().out


def test_eval_oracle_is_perfect(workspace):
    out = workspace / "oracle.json"
    assert main(["eval", "--oracle-gt", "--data", str(workspace / "data"), "--report", str(out)]) == 0
    assert json.loads(out.read_text())["auc"] == {"5": 1.0, "10": 1.0, "20": 1.0}


def test_eval_compare_table(workspace, capsys):
    oracle = workspace / "oracle_cmp.json"
    main(["eval", "--oracle-gt", "--data", str(workspace / "data"), "--report", str(oracle)])
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "data"),
                 "--compare", str(oracle)]) == 0
    text = capsys.readouterr().out
    assert "oracle_cmp" in text and "this run" in text and "AUC@10" in text


def test_bench(workspace, capsys):
    assert main(["bench", "--ckpt", str(workspace / "m.ckpt"), "--pairs", "3"]) == 0
    assert "FPS" in capsys.readouterr().out


def test_demo(workspace):
    out = workspace / "demo"
    assert main(["demo", "--ckpt", str(workspace / "m.ckpt"), "--pair", str(workspace / "data" / "pair_000001"),
                 "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"i0_warped_pred.ppm", "i0_warped_gt.ppm", "f0.pgm", "attention_q0.pgm", "attention_q3.pgm"} <= names


def test_gradcheck_single_block(capsys):
    assert main(["gradcheck", "--block", "film,rotation_angle_loss"]) == 0
    out = capsys.readouterr().out
    assert "film" in out and "FAIL" not in out


class TestExitCodes:
    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as e:
            main(["gradcheck", "--nope"])
        assert e.value.code == 2

    def test_unknown_block(self):
        assert main(["gradcheck", "--block", "nope"]) == 1

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("optim.lr = fast\n")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1
        assert "bad.cfg:1" in capsys.readouterr().err

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m")]) == 1

    def test_joint_decoder_needs_homo(self, workspace):
        args = ["train", "--data", str(workspace / "data"), "--out", str(workspace / "j.ckpt"), "--steps", "2"]
        assert main(args + ["--ablate", "rt-dec"]) == 1
        assert main(args + ["--ablate", "rt-dec,homo"]) == 0

    def test_unknown_ablation(self, workspace):
        assert main(["train", "--data", str(workspace / "data"), "--out", str(workspace / "x"), "--ablate", "foo"]) == 1

    def test_missing_checkpoint(self, workspace):
        assert main(["bench", "--ckpt", str(workspace / "absent.ckpt")]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "iuppose", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
