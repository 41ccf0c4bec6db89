import json

import numpy as np
import pytest

from sialab.cli import config_from_args, eps_from_scale, main, parse_args, read_config_file
from sialab.experiments import ExperimentReport


def test_eps_scale_conversion():
    args = parse_args(["attack", "--eps", "16", "--eps-scale", "255", "--data", "d", "--surrogate", "m",
                       "--out", "o"])
    cfg = config_from_args(args)
    assert abs(cfg.epsilon - 0.0627451) <= 1e-7
    assert eps_from_scale(0.5, 1.0) == 0.5
    with pytest.raises(ValueError):
        eps_from_scale(16, 0)


def test_config_file_and_override(tmp_path):
    conf = tmp_path / "attack.conf"
    conf.write_text("# budget on the 0-255 scale\neps = 8\nsteps = 4\nblocks=2  # s\nkinds = VFlip, Scale\n"
                    "data = d\nsurrogate = s.siam\nout = o.json\n")
    args = parse_args(["--config", str(conf), "attack", "--steps", "7"])
    cfg = config_from_args(args)
    assert cfg.epsilon == pytest.approx(8 / 255)
    assert cfg.steps == 7 and cfg.blocks == 2
    assert [k.value for k in cfg.kinds] == ["VFlip", "Scale"]


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text("eps 16\n")
    with pytest.raises(ValueError, match="key = value"):
        read_config_file(bad)
    unknown = tmp_path / "unknown.conf"
    unknown.write_text("colour = red\n")
    with pytest.raises(SystemExit):
        parse_args(["--config", str(unknown), "attack", "--data", "d", "--surrogate", "s", "--out", "o"])


def test_method_choices():
    args = parse_args(["attack", "--method", "sia-global", "--data", "d", "--surrogate", "s", "--out", "o"])
    assert config_from_args(args).method == "SIA_GLOBAL"
    with pytest.raises(SystemExit):
        parse_args(["attack", "--method", "pgd", "--data", "d", "--surrogate", "s", "--out", "o"])


def test_end_to_end(tmp_path, capsys):
    data, a, b = tmp_path / "data", tmp_path / "a.siam", tmp_path / "b.siam"
    main(["make-data", "--source", "glyphs", "--train", "300", "--test", "120", "--out", str(data)])
    main(["train", "--arch", "cnn-a", "--data", str(data), "--epochs", "2", "--seed", "1", "--out", str(a)])
    main(["train", "--arch", "mlp", "--data", str(data), "--epochs", "2", "--seed", "2", "--out", str(b)])
    out = capsys.readouterr().out
    assert '"arch": "mlp"' in out

    rep = tmp_path / "rep.json"
    common = ["--data", str(data), "--surrogate", str(a), "--images", "6", "--steps", "2", "--copies", "2"]
    main(["attack", "--method", "sia", *common, "--victims", str(b), "--out", str(rep)])
    report = ExperimentReport.read(rep)
    assert report.config["attack"]["epsilon_255"] == pytest.approx(16)
    assert len(report.tables["transfer"]) == 2
    stored = np.load(tmp_path / "rep.adv.npz")
    assert np.abs(stored["adversarials"] - stored["benign"]).max() <= 16 / 255 + 1e-7

    main(["eval", "--report", str(rep), "--victims", f"{a},{b}"])
    assert len(ExperimentReport.read(rep).tables["eval"]) == 2
    white = [r for r in report.tables["transfer"] if r["white_box"]][0]["asr"]
    assert ExperimentReport.read(rep).tables["eval"][0]["asr"] == white

    main(["sweep", "--param", "n", "--values", "1,2", *common, "--victims", str(b),
          "--out", str(tmp_path / "sweep.json")])
    assert (tmp_path / "sweep.sweep.csv").exists()
    main(["diversity", "--methods", "identity,sit", "--extractor", str(a), "--data", str(data), "--images", "4",
          "--out", str(tmp_path / "div.json")])
    div = json.loads((tmp_path / "div.json").read_text())["tables"]["diversity"]
    assert div[0]["mean_score"] == 0.0 and div[1]["mean_score"] > 0
