import json

import pytest
from PIL import Image

from svdtune.baselines import ParamReport
from svdtune.metrics import DiceResult
from svdtune.report import ReportError, ablation_table, build_report, dice_table, load_runs


def fake_run(root, name, method, trainable, total=1000, dsc=0.5):
    d = root / name
    d.mkdir(parents=True)
    (d / "config.json").write_text(json.dumps({"method": method, "toggles": {}}))
    res = DiceResult([("a", "circle", dsc), ("a", "ring", dsc)], {"circle": dsc, "ring": dsc}, dsc)
    res.save(d / "eval.json")
    ParamReport(method, total, trainable, {"x": trainable}).save(d)
    return d


def test_two_runs(tmp_path):
    runs = [fake_run(tmp_path, "s", "svd", 40), fake_run(tmp_path, "l", "lora4", 120, dsc=0.25)]
    out = build_report(runs, tmp_path / "rep")
    table = (tmp_path / "rep" / "dice_table.md").read_text()
    assert "| svd | 0.50 | 0.50 | 0.50 |" in table and "| lora4 | 0.25 | 0.25 | 0.25 |" in table
    params = json.loads((tmp_path / "rep" / "params.json").read_text())
    assert params["svd"]["trainable"] < params["lora4"]["trainable"]
    with Image.open(out["params"]) as im:
        assert im.size[0] > 100


def test_single_run_table(tmp_path):
    run = fake_run(tmp_path, "s", "svd", 40)
    build_report([run], tmp_path / "rep")
    lines = (tmp_path / "rep" / "dice_table.md").read_text().strip().splitlines()
    assert len(lines) == 3 and lines[0] == "| Method | circle | ring | Avg. |"


def test_missing_param_report(tmp_path):
    run = fake_run(tmp_path, "broken", "svd", 40)
    (run / "param_report.json").unlink()
    with pytest.raises(ReportError, match="broken"):
        load_runs([run])


def test_duplicate_names_are_disambiguated(tmp_path):
    runs = [fake_run(tmp_path, "s0", "svd", 40), fake_run(tmp_path, "s1", "svd", 40)]
    assert len(load_runs(runs)) == 2


def test_nothing_to_report(tmp_path):
    with pytest.raises(ReportError):
        build_report([], tmp_path)


def test_ablation_outputs(tmp_path):
    abl = {"seeds": [0, 1], "rows": [
        {"name": "none", "method": "svd", "toggles": dict(pos_embed=False, layernorm=False, tal=False, scale=False,
                                                          shift=False), "dsc": [0.2, 0.2], "mean": 0.2},
        {"name": "all", "method": "svd", "toggles": {}, "dsc": [0.7, 0.8], "mean": 0.75},
        {"name": "full", "method": "full", "toggles": {}, "dsc": [0.8, 0.8], "mean": 0.8},
    ]}
    text = ablation_table(abl)
    assert "| none |  |  |  |  |  | 0.200 | 0.000 |" in text
    assert "| all | x | x | x | x | x | 0.750 | 0.050 |" in text
    out = build_report([], tmp_path, ablation=abl)
    assert set(out) == {"ablation", "ablation_chart"}
    assert json.loads((tmp_path / "ablation.json").read_text()) == abl


def test_dice_table_missing_class(tmp_path):
    a = DiceResult([], {"circle": 1.0, "ring": 0.5}, 0.75)
    b = DiceResult([], {"circle": 0.5}, 0.5)
    assert "| b | 0.50 | - | 0.50 |" in dice_table({"a": a, "b": b})
