import json

import numpy as np
import pytest

from ms2edge import cli
from ms2edge.data import load_dir, read_gt
from ms2edge.evaluation import thin


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["synth-data", "--out", str(data), "--n", "4", "--size", "32", "--split", "train"]) == 0
    assert cli.main(["synth-data", "--out", str(data), "--n", "2", "--size", "32", "--split", "val",
                     "--seed", "5"]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"network": {"width": 0.125}, "train": {"epochs": 1, "warmup_epochs": 0,
                                                                        "batch_size": 2, "augment": "none"}}))
    run = root / "run"
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run), "--seed", "3"]) == 0
    return root, data, run


def test_synth_data_layout(trained):
    _, data, _ = trained
    assert len(load_dir(data, "train")) == 4 and len(load_dir(data, "val")) == 2


def test_train_echoes_resolved_config(trained):
    _, _, run = trained
    echoed = json.loads((run / "config.json").read_text())
    assert echoed["network"]["seed"] == 3 and echoed["train"]["seed"] == 3
    assert echoed["network"]["width"] == 0.125 and echoed["train"]["loss"]
    assert (run / "final.ckpt").exists() and (run / "metrics.jsonl").exists()


def test_infer_and_eval(trained, capsys):
    root, data, run = trained
    preds = root / "preds"
    assert cli.main(["infer", "--checkpoint", str(run / "final.ckpt"), "--out", str(preds),
                     str(data / "val" / "images")]) == 0
    pngs = sorted(preds.glob("*.png"))
    assert len(pngs) == 2
    ms = root / "preds_ms"
    assert cli.main(["infer", "--checkpoint", str(run / "final.ckpt"), "--out", str(ms),
                     str(data / "val" / "images"), "--multi-scale", "--scales", "0.5", "1.0"]) == 0
    assert len(list(ms.glob("*.png"))) == 2
    rep = root / "eval"
    assert cli.main(["eval", "--pred", str(preds), "--gt", str(data / "val" / "gt"), "--out", str(rep)]) == 0
    assert "ODS=" in (rep / "report.txt").read_text()
    assert (rep / "pr.tsv").read_text().startswith("threshold")


def test_eval_of_ground_truth_against_itself(trained, tmp_path):
    _, data, _ = trained
    gt = data / "val" / "gt"
    assert cli.main(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(tmp_path)]) == 0
    assert "ODS=1.0000 (t=0.01) OIS=1.0000 AP=1.0000 AC=1.0000" in (tmp_path / "report.txt").read_text()
    # S thins the prediction first: precision stays 1, recall is the kept fraction of GT pixels
    assert cli.main(["eval", "--pred", str(gt), "--gt", str(gt), "--protocol", "s", "--out", str(tmp_path)]) == 0
    maps = [read_gt(p)[0] == 1 for p in sorted(gt.iterdir())]
    r = sum(thin(m).sum() for m in maps) / sum(m.sum() for m in maps)
    assert f"ODS={2 * r / (1 + r):.4f}" in (tmp_path / "report.txt").read_text()


def test_profile_energy(trained, tmp_path):
    _, data, run = trained
    assert cli.main(["profile-energy", "--checkpoint", str(run / "final.ckpt"), "--data", str(data),
                     "--split", "val", "--constants", "int8", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "energy.txt").read_text()
    assert "eta_AC" in text
    assert list(tmp_path.glob("layers_*.tsv"))


def test_verify_isometry(tmp_path):
    rc = cli.main(["verify-isometry", "--images", "2", "--size", "32", "--probes", "4", "--out", str(tmp_path)])
    assert rc in (0, 3)
    text = (tmp_path / "isometry.txt").read_text()
    assert "not gated" in text
    assert text.splitlines()[-1].endswith("PASS" if rc == 0 else "FAIL")
    assert (tmp_path / "isometry.tsv").read_text().startswith("block\tphi")
    assert json.loads((tmp_path / "config.json").read_text())["verify"]["inputs"] == "noise"
    assert cli.main(["verify-isometry", "--images", "2", "--size", "32", "--probes", "4",
                     "--inputs", "shapes"]) in (0, 3)


def test_demo_quantization(tmp_path):
    assert cli.main(["demo-quantization", "--out", str(tmp_path), "--points", "101"]) == 0
    assert (tmp_path / "quantized.png").exists()
    rows = (tmp_path / "error_curves.tsv").read_text().splitlines()
    assert len(rows) == 102
    assert "I-LIF(D=4)" in (tmp_path / "summary.txt").read_text()


def test_bad_config_and_missing_inputs(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"network": {"depth": 3}}))
    assert cli.main(["train", "--config", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    bad.write_text(json.dumps({"optimizer": {}}))
    assert cli.main(["train", "--config", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    bad.write_text(json.dumps({"train": {"epochs": 0}}))
    assert cli.main(["train", "--config", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["infer", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path),
                     str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err.lower()


def test_png8_rounding():
    np.testing.assert_array_equal(cli.to_png8(np.array([[0.0, 0.5, 1.0, 0.002]])), [[0, 128, 255, 1]])


def test_eval_and_energy_read_config(trained, tmp_path):
    _, data, run = trained
    gt = data / "val" / "gt"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"eval": {"protocol": "S", "tol": 0.02},
                               "energy": {"constants": "int8", "E_AC": 0.05e-12}}))
    out = tmp_path / "e"
    assert cli.main(["eval", "--config", str(cfg), "--pred", str(gt), "--gt", str(gt), "--out", str(out)]) == 0
    assert json.loads((out / "config.json").read_text())["eval"]["tol"] == 0.02
    assert "protocol=S" in (out / "report.txt").read_text()
    out2 = tmp_path / "p"
    assert cli.main(["profile-energy", "--config", str(cfg), "--checkpoint", str(run / "final.ckpt"),
                     "--data", str(data), "--split", "val", "--out", str(out2)]) == 0
    used = json.loads((out2 / "config.json").read_text())["profile-energy"]["constants"]
    assert used == {"E_MAC": 0.23e-12, "E_AC": 0.05e-12}
    assert cli.energy_constants({}, None) == {"E_MAC": 4.6e-12, "E_AC": 0.9e-12}
    with pytest.raises(cli.ConfigError):
        cli.energy_constants({"constants": "fp16"})
    cfg.write_text(json.dumps({"eval": {"tol": -1}}))
    assert cli.main(["eval", "--config", str(cfg), "--pred", str(gt), "--gt", str(gt)]) == 1
