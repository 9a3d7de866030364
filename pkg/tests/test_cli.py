import csv

import numpy as np
import pytest

from ganshot import cli, data_io, evalkit as ev, gan
from scenarios import three_image_case

SMALL = ["--set", "num_train=16", "--set", "num_test=6", "--set", "base_feature_maps=4",
         "--set", "detector_width=4", "--batch-size", "8", "--epochs", "1"]


def run(out, *argv):
    command, *rest = argv
    return cli.run_command([command, *SMALL, "--out", str(out), *rest])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(out, "gen-data", "--seed", "3") == 0
    assert run(out, "train-gan") == 0
    assert run(out, "train-detector", "--set", "detector_input=low_res") == 0
    assert run(out, "train-detector", "--set", "detector_input=high_res") == 0
    return out


def test_gen_data_layout(trained):
    for split, n in (("train", 16), ("test", 6)):
        d = trained / "data" / split
        assert len(list(d.glob("img_*.ppm"))) == n
        assert len(data_io.read_gt_csv(d / "gts.csv", n)) == n


def test_training_outputs(trained):
    for name in ("gan.ckpt", "gan_loss.csv", "ssd.ckpt", "ssd_hr.ckpt", "ssd_loss.csv", "ssd_hr_loss.csv"):
        assert (trained / name).exists(), name
    model = gan.load_gan(trained / "gan.ckpt")
    assert model.cfg.mode == "conditional" and model.epochs_trained == 1


def test_compare_writes_two_rows(trained, tmp_path):
    args = ["--set", f"data={trained / 'data'}", "--set", f"gan={trained / 'gan.ckpt'}",
            "--set", f"ssd={trained / 'ssd.ckpt'}", "--set", f"ssd_hr={trained / 'ssd_hr.ckpt'}",
            "--set", "annotate=2"]
    assert run(tmp_path, "compare", *args) == 0
    with open(tmp_path / "compare.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["pipeline"] for r in rows] == [ev.BASELINE, ev.CASCADE]
    assert list(rows[0]) == ev.COMPARE_COLUMNS
    annotated = list((tmp_path / "annotated").rglob("*.ppm"))
    assert len(annotated) == 4
    assert data_io.read_image(annotated[0]).shape == (3, 128, 128)
    # nothing written next to the inputs
    assert not (trained / "compare.csv").exists()


def test_detect_then_eval(trained, capsys):
    assert run(trained, "detect", "--set", "pipeline=gan+ssd") == 0
    dets = ev.read_detections_csv(trained / "detections.csv")
    assert len(dets) <= 6
    assert run(trained, "eval") == 0
    assert "f1=" in capsys.readouterr().out
    assert (trained / "pr.csv").read_text().startswith("cutoff,precision,recall")


def test_enhance_writes_upscaled_images(trained):
    assert run(trained, "enhance") == 0
    files = sorted((trained / "enhanced").glob("*.ppm"))
    assert len(files) == 6
    assert data_io.read_image(files[0]).shape == (3, 32, 32)


def test_eval_hand_counted_case(tmp_path, capsys):
    dets, gts = three_image_case()
    ev.write_detections_csv(tmp_path / "d.csv", dets)
    data_io.write_gt_csv(tmp_path / "g.csv", gts)
    code = cli.run_command(["eval", "--out", str(tmp_path / "o"), "--set", f"detections={tmp_path / 'd.csv'}",
                            "--set", f"gts={tmp_path / 'g.csv'}"])
    assert code == 0
    assert "f1=0.727273" in capsys.readouterr().out
    assert "tp=4 fp=2 fn=1" in (tmp_path / "o" / "eval.txt").read_text()


def test_zero_epochs_equals_initialisation(trained, tmp_path):
    assert run(tmp_path, "train-gan", "--set", f"data={trained / 'data'}", "--epochs", "0", "--seed", "7") == 0
    cfg = gan.GanConfig(base_feature_maps=4, epochs=0, batch_size=8, mode="conditional")
    fresh = gan.init_gan(cfg, 7)
    gan.save_gan(tmp_path / "fresh.ckpt", fresh)
    assert (tmp_path / "gan.ckpt").read_bytes() == (tmp_path / "fresh.ckpt").read_bytes()


def test_reruns_are_bitwise_identical(trained, tmp_path):
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        common = ["--set", f"data={trained / 'data'}", "--threads", "1", "--seed", "11"]
        assert run(out, "train-gan", *common) == 0
        assert run(out, "train-detector", *common, "--set", "detector_input=high_res") == 0
        assert run(out, "detect", *common, "--set", "pipeline=ssd_hr") == 0
        outputs.append({p.name: p.read_bytes() for p in out.iterdir() if p.is_file()})
    assert outputs[0] == outputs[1]
    assert {"gan.ckpt", "gan_loss.csv", "ssd_hr.ckpt", "detections.csv"} <= set(outputs[0])


def test_log_is_a_reusable_config(trained, tmp_path):
    log = trained / "logs" / "train-gan.log"
    text = log.read_text()
    assert "epochs=1" in text and "# INFO" in text
    parsed = cli.parse_config_text(text)
    assert parsed["base_feature_maps"] == 4 and parsed["gan_mode"] == "conditional"


def test_flags_override_config_file(tmp_path):
    (tmp_path / "run.cfg").write_text("# comment\nseed=5\nepochs=9\n")
    args = cli.build_parser().parse_args(["eval", "--config", str(tmp_path / "run.cfg"), "--seed", "6"])
    cfg = cli.resolve_config(args, environ={})
    assert (cfg.seed, cfg.epochs, cfg.out) == (6, 9, "runs")


def test_out_falls_back_to_environment():
    args = cli.build_parser().parse_args(["eval"])
    assert cli.resolve_config(args, environ={"GANSHOT_OUT": "/tmp/x"}).out == "/tmp/x"


@pytest.mark.parametrize("argv", [
    ["bogus"],
    [],
    ["eval", "--no-such-flag"],
    ["eval", "--set", "nonsense=1"],
    ["eval", "--set", "epochs=many"],
    ["eval", "--score-threshold", "1.5"],
    ["train-gan", "--upscale", "3"],
])
def test_usage_errors_exit_1(argv, tmp_path, capsys):
    assert cli.run_command(argv + ["--out", str(tmp_path)] if argv else argv) == 1
    assert capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path):
    (tmp_path / "bad.cfg").write_text("learning_rate=0.1\n")
    assert cli.run_command(["eval", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path)]) == 1


def test_missing_data_exits_2(tmp_path):
    assert cli.run_command(["train-detector", "--out", str(tmp_path)]) == 2


def test_corrupt_checkpoint_exits_2(trained, tmp_path):
    (tmp_path / "gan.ckpt").write_bytes(b"not a checkpoint")
    assert run(tmp_path, "enhance", "--set", f"data={trained / 'data'}") == 2


def test_wrong_gan_mode_for_compare_exits_1(trained, tmp_path):
    noise_gan = gan.init_gan(gan.GanConfig(base_feature_maps=4, mode="noise"), 0)
    gan.save_gan(tmp_path / "noise.ckpt", noise_gan)
    code = run(tmp_path, "compare", "--set", f"data={trained / 'data'}", "--set", f"gan={tmp_path / 'noise.ckpt'}",
               "--set", f"ssd={trained / 'ssd.ckpt'}", "--set", f"ssd_hr={trained / 'ssd_hr.ckpt'}")
    assert code == 1


def test_help_exits_0(capsys):
    assert cli.run_command(["--help"]) == 0
    assert "compare" in capsys.readouterr().out


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run(tmp_path / name, "gen-data", "--seed", "2") == 0
    a = sorted((tmp_path / "a" / "data").rglob("*.*"))
    b = sorted((tmp_path / "b" / "data").rglob("*.*"))
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert not np.array_equal(data_io.read_image(a[1]), data_io.read_image(a[2]))
