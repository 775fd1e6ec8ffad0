import numpy as np
import pytest

from tssg import dataio
from tssg.cli import ECHO_NAME, RunConfig, UsageError, main, read_config
from tssg.metrics import parse_csv
from tssg.pipeline import PipelineCheckpointSet, load_stage

TINY_CONFIG = "encoder_widths = 4,8,8,8,8\nepochs = 1\nbatch_size = 2\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CONFIG)
    assert main(["synth", str(root / "data"), "--n", "6", "--test-count", "2", "--seed", "3"]) == 0
    assert main(["train", "--stage", "all", "--manifest", str(root / "data" / "manifest.tsv"),
                 "--out", str(root / "ckpt"), "--config", str(root / "tiny.cfg"), "--deterministic"]) == 0
    return root


def test_missing_input_exits_2(tmp_path, capsys):
    assert main(["decompose", str(tmp_path / "nope.png"), str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("tssg: error:") and "nope.png" in err
    assert len(err.strip().splitlines()) == 1


def test_decompose_constant_image(tmp_path, capsys):
    dataio.save_image(np.full((16, 16), 0.4), tmp_path / "c.png")
    assert main(["decompose", str(tmp_path / "c.png"), str(tmp_path / "out" / "c"), "--raw"]) == 0
    assert capsys.readouterr().out.strip() == "residual 0.000e+00"
    tex = np.asarray(dataio.load_image(tmp_path / "out" / "c.texture.png"))
    assert np.all(np.abs(tex - 0.5) <= 0.5 / 255 + 1e-6)
    assert np.all(dataio.load_raw_plane(tmp_path / "out" / "c.texture.f32") == 0)
    assert (tmp_path / "out" / ECHO_NAME).exists()


def test_synth_zero_is_usage_error(tmp_path):
    assert main(["synth", str(tmp_path / "d"), "--n", "0"]) == 2


def test_synth_writes_tree(tmp_path):
    assert main(["synth", str(tmp_path / "a"), "--n", "4", "--seed", "8"]) == 0
    assert main(["synth", str(tmp_path / "b"), "--n", "4", "--seed", "8"]) == 0
    pngs = sorted(p.name for p in (tmp_path / "a").glob("*.png"))
    assert len(pngs) == 16
    assert len((tmp_path / "a" / "manifest.tsv").read_text().splitlines()) == 4
    for name in pngs + ["manifest.tsv"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_default_flags_echo_defaults(tmp_path):
    main(["synth", str(tmp_path / "d"), "--n", "1"])
    assert (tmp_path / "d" / ECHO_NAME).read_text() == RunConfig().to_text()
    # the echo replays as a config file
    assert read_config(tmp_path / "d" / ECHO_NAME) == RunConfig()


def test_flags_override_config(tmp_path):
    (tmp_path / "c.cfg").write_text("seed = 5  # comment\n\nepochs = 3\n")
    main(["synth", str(tmp_path / "d"), "--n", "1", "--config", str(tmp_path / "c.cfg"), "--seed", "9"])
    echo = read_config(tmp_path / "d" / ECHO_NAME)
    assert echo.seed == 9 and echo.epochs == 3


def test_unknown_config_key_rejected(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("learning_rat = 0.1\n")
    assert main(["synth", str(tmp_path / "d"), "--n", "1", "--config", str(tmp_path / "c.cfg")]) == 2
    assert "learning_rat" in capsys.readouterr().err
    with pytest.raises(UsageError):
        read_config(tmp_path / "c.cfg")


def test_bad_config_value_rejected(tmp_path):
    (tmp_path / "c.cfg").write_text("epochs = many\n")
    assert main(["synth", str(tmp_path / "d"), "--n", "1", "--config", str(tmp_path / "c.cfg")]) == 2
    (tmp_path / "c.cfg").write_text("epochs = 0\n")
    assert main(["synth", str(tmp_path / "d"), "--n", "1", "--config", str(tmp_path / "c.cfg")]) == 2


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_train_single_stage(workspace, tmp_path):
    manifest = workspace / "data" / "manifest.tsv"
    out = tmp_path / "roi.tssg"
    assert main(["train", "--stage", "roi", "--manifest", str(manifest), "--out", str(out),
                 "--config", str(workspace / "tiny.cfg")]) == 0
    spec, params, meta = load_stage(out, "roi")
    assert spec.stage_id == "roi" and params.config.encoder_widths == (4, 8, 8, 8, 8)
    assert out.with_suffix(".log").read_text().startswith("epoch,1,loss,")


def test_train_stage_with_upstream(workspace, tmp_path):
    out = tmp_path / "binary.tssg"
    assert main(["train", "--stage", "binary", "--manifest", str(workspace / "data" / "manifest.tsv"),
                 "--out", str(out), "--upstream", str(workspace / "ckpt"),
                 "--config", str(workspace / "tiny.cfg")]) == 0
    assert load_stage(out, "binary")[0].stage_id == "binary"


def test_train_multiclass_without_masks_is_named(workspace, tmp_path, capsys):
    m = dataio.read_manifest(workspace / "data" / "manifest.tsv")
    recs = [dataio.Record(r.image, r.roi, r.binary, None, r.split) for r in m]
    dataio.write_manifest(recs, tmp_path / "m.tsv")
    code = main(["train", "--stage", "multiclass", "--manifest", str(tmp_path / "m.tsv"),
                 "--out", str(tmp_path / "mc.tssg"), "--config", str(workspace / "tiny.cfg")])
    assert code == 1
    assert "multiclass mask" in capsys.readouterr().err


def test_train_all_writes_checkpoints(workspace):
    PipelineCheckpointSet.load(workspace / "ckpt")
    log = (workspace / "ckpt" / "train.log").read_text().splitlines()
    assert [line.split(",")[0] for line in log] == ["roi", "binary", "multiclass"]


def test_deterministic_training_twice(workspace, tmp_path):
    args = ["train", "--stage", "all", "--manifest", str(workspace / "data" / "manifest.tsv"),
            "--config", str(workspace / "tiny.cfg"), "--deterministic"]
    assert main(args + ["--out", str(tmp_path / "again")]) == 0
    for stage in ("roi", "binary", "multiclass"):
        name = PipelineCheckpointSet.filename(stage)
        assert (tmp_path / "again" / name).read_bytes() == (workspace / "ckpt" / name).read_bytes()


def test_infer_single_image(workspace, tmp_path):
    image = workspace / "data" / "synth_0000.png"
    assert main(["infer", str(image), "--ckpt-dir", str(workspace / "ckpt"), "--out-dir", str(tmp_path)]) == 0
    outs = sorted(p.name for p in tmp_path.glob("synth_0000_*.png"))
    assert outs == ["synth_0000_binary.png", "synth_0000_multiclass.png", "synth_0000_overlay.png", "synth_0000_roi.png"]
    assert dataio.load_binary_mask(tmp_path / "synth_0000_roi.png").shape == (64, 64)
    assert dataio.load_multiclass_mask(tmp_path / "synth_0000_multiclass.png").shape == (64, 64)


def test_infer_is_repeatable(workspace, tmp_path):
    image = workspace / "data" / "synth_0001.png"
    for d in ("a", "b"):
        assert main(["infer", str(image), "--ckpt-dir", str(workspace / "ckpt"), "--out-dir", str(tmp_path / d),
                     "--deterministic"]) == 0
    for p in (tmp_path / "a").glob("*.png"):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_infer_missing_checkpoints(workspace, tmp_path):
    tmp_path.joinpath("ck").mkdir()
    assert main(["infer", str(workspace / "data" / "synth_0000.png"), "--ckpt-dir", str(tmp_path / "ck"),
                 "--out-dir", str(tmp_path / "o")]) == 1


def _copy_ground_truth(workspace, out):
    out.mkdir()
    for r in dataio.read_manifest(workspace / "data" / "manifest.tsv"):
        (out / f"{r.stem}_binary.png").write_bytes(r.binary.read_bytes())
        (out / f"{r.stem}_multiclass.png").write_bytes(r.multiclass.read_bytes())


@pytest.mark.parametrize("mode", ["binary", "multiclass"])
def test_eval_perfect_predictions(workspace, tmp_path, capsys, mode):
    _copy_ground_truth(workspace, tmp_path / "pred")
    assert main(["eval", str(tmp_path / "pred"), "--manifest", str(workspace / "data" / "manifest.tsv"),
                 "--mode", mode, "--out", str(tmp_path / "r.csv")]) == 0
    text = (tmp_path / "r.csv").read_text()
    assert capsys.readouterr().out == text
    report = parse_csv(text)
    assert len(report.rows) == 6
    if mode == "binary":
        assert report.mean.values() == (1.0, 1.0, 1.0, 1.0, 1.0, 0.0)
    else:
        # a class missing from an image scores Dice 1 but sensitivity 0 by
        # the zero-denominator convention, so only these are exactly 1 / 0
        assert (report.mean.dice, report.mean.specificity, report.mean.mae) == (1.0, 1.0, 0.0)
    assert parse_csv(text).to_csv() == text


def test_eval_split_filter(workspace, tmp_path, capsys):
    _copy_ground_truth(workspace, tmp_path / "pred")
    assert main(["eval", str(tmp_path / "pred"), "--manifest", str(workspace / "data" / "manifest.tsv"),
                 "--split", "test"]) == 0
    assert len(parse_csv(capsys.readouterr().out).rows) == 2


def test_eval_missing_prediction_is_named(workspace, tmp_path, capsys):
    _copy_ground_truth(workspace, tmp_path / "pred")
    (tmp_path / "pred" / "synth_0003_binary.png").unlink()
    assert main(["eval", str(tmp_path / "pred"), "--manifest", str(workspace / "data" / "manifest.tsv")]) == 1
    assert "synth_0003_binary.png" in capsys.readouterr().err


def test_eval_uses_probability_planes(workspace, tmp_path, capsys):
    pred = tmp_path / "pred"
    assert main(["infer", str(workspace / "data" / "manifest.tsv"), "--ckpt-dir", str(workspace / "ckpt"),
                 "--out-dir", str(pred), "--probs"]) == 0
    capsys.readouterr()
    args = ["eval", str(pred), "--manifest", str(workspace / "data" / "manifest.tsv")]
    assert main(args) == 0
    soft = parse_csv(capsys.readouterr().out)
    assert main(args + ["--binarized-mae"]) == 0
    hard = parse_csv(capsys.readouterr().out)
    assert soft.mean.dice == hard.mean.dice
    assert soft.mean.mae != hard.mean.mae
