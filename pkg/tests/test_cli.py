import csv

import numpy as np
import pytest

from pclnet.cli import build_parser, main
from pclnet.config import Config, LossConfig, ModelConfig, TrainConfig
from pclnet.dataio import read_flo, write_ppm

TINY = dict(backbone_channels=(4, 6, 8, 10), motion_channels=4, ofe_widths=(8, 6, 4),
            context_widths=(4, 4, 4, 4, 4, 4, 2))


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def tiny_yaml(workdir):
    path = workdir / "tiny.yaml"
    Config(ModelConfig(**TINY), LossConfig(),
           TrainConfig(batch_size=2, clip_length=3, precision="f64", max_iterations=4,
                       validate_interval=2, checkpoint_interval=2)).save(path)
    return path


@pytest.fixture(scope="module")
def trained(workdir, tiny_yaml):
    out = workdir / "run"
    rc = main(["train", "--config", str(tiny_yaml), "--synthetic", "3", "--val-synthetic", "2", "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def frames(workdir):
    root = workdir / "frames" / "walk"
    root.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for k in range(4):
        write_ppm(root / f"{k:04d}.ppm", rng.uniform(size=(3, 64, 64)))
    return root.parent


def test_parser_lists_subcommands():
    text = build_parser().format_help()
    for cmd in ("train", "eval", "infer", "benchmark", "selftest"):
        assert cmd in text


def test_parser_rejects_unknown_variant():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--variant", "FlowNet"])


def test_train_outputs(trained):
    for name in ("config.yaml", "train_log.csv", "training.png", "final.pclc", "ckpt_000002.pclc",
                 "ckpt_000004.pclc", "eval.csv", "eval_scales.csv", "eval_clips.csv", "evaluation.png"):
        assert (trained / name).is_file(), name
    log = rows(trained / "train_log.csv")
    assert log[0] == ["iteration", "loss", "lr", "val_epe"]
    assert [r[0] for r in log[1:]] == ["1", "2", "3", "4"]
    assert log[2][3] != "" and log[1][3] == ""
    assert rows(trained / "eval.csv")[0] == ["dataset", "clips", "mean_epe", "median_epe", "sec_per_clip"]
    assert [r[0] for r in rows(trained / "eval_scales.csv")[1:]] == ["32", "16", "8", "4", "2", "1"]


def test_train_resume_continues_iterations(workdir, tiny_yaml, trained):
    out = workdir / "resumed"
    rc = main(["train", "--config", str(tiny_yaml), "--synthetic", "3", "--iterations", "6",
               "--checkpoint", str(trained / "ckpt_000004.pclc"), "--out", str(out)])
    assert rc == 0
    assert [r[0] for r in rows(out / "train_log.csv")[1:]] == ["5", "6"]


def test_train_without_data_is_invalid(tiny_yaml, tmp_path):
    assert main(["train", "--config", str(tiny_yaml), "--out", str(tmp_path)]) == 1


def test_train_overrides_mode(tiny_yaml, tmp_path):
    rc = main(["train", "--config", str(tiny_yaml), "--synthetic", "2", "--mode", "supervised-epe",
               "--iterations", "1", "--seed", "3", "--out", str(tmp_path)])
    assert rc == 0
    cfg = Config.load(tmp_path / "config.yaml")
    assert (cfg.train.mode, cfg.train.seed) == ("supervised-epe", 3)


def test_eval_synthetic(trained, tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(trained / "final.pclc"), "--synthetic", "2", "--out", str(tmp_path)])
    assert rc == 0
    assert "mean EPE" in capsys.readouterr().out
    assert len(rows(tmp_path / "eval_clips.csv")) == 3
    assert (tmp_path / "evaluation.png").stat().st_size > 0


def test_eval_requires_checkpoint(tmp_path):
    assert main(["eval", "--out", str(tmp_path)]) == 1


def test_missing_checkpoint_is_io_error(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pclc"), "--out", str(tmp_path)]) == 2


def test_corrupt_checkpoint_is_io_error(tmp_path):
    bad = tmp_path / "bad.pclc"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path)]) == 2


def test_infer_writes_flows(trained, frames, tmp_path):
    rc = main(["infer", "--checkpoint", str(trained / "final.pclc"), "--frames", str(frames), "--out", str(tmp_path)])
    assert rc == 0
    flos = sorted(tmp_path.glob("*.flo"))
    assert len(flos) == 2
    assert read_flo(flos[0]).shape == (1, 2, 64, 64)
    assert len(list(tmp_path.glob("*.ppm"))) == 2
    assert (tmp_path / "flows.png").is_file()
    assert len(rows(tmp_path / "infer.csv")) == 3


def test_infer_missing_frames_dir(trained, tmp_path):
    rc = main(["infer", "--checkpoint", str(trained / "final.pclc"), "--frames", str(tmp_path / "nothing"),
               "--out", str(tmp_path)])
    assert rc == 2


def test_benchmark_outputs(tiny_yaml, tmp_path):
    rc = main(["benchmark", "--config", str(tiny_yaml), "--runs", "3", "--warmup", "1", "--size", "32", "32",
               "--out", str(tmp_path)])
    table = rows(tmp_path / "benchmark.csv")
    assert table[0] == ["variant", "parameters", "runs", "median_s", "p10_s", "p90_s"]
    assert [r[0] for r in table[1:]] == ["PCLNet", "PCLNetC"]
    assert (tmp_path / "benchmark.png").is_file()
    # exit status encodes the timing order, which a three-run sample cannot guarantee
    assert rc in (0, 1)
    assert rc == (0 if float(table[1][3]) <= float(table[2][3]) else 1)


def test_selftest_passes(tmp_path, capsys):
    assert main(["selftest", "--seeds", "1", "--out", str(tmp_path)]) == 0
    table = rows(tmp_path / "selftest.csv")
    assert all(r[-1] == "pass" for r in table[1:])
    assert "checks passed" in capsys.readouterr().out


def test_threads_flag(tiny_yaml, tmp_path):
    rc = main(["benchmark", "--config", str(tiny_yaml), "--runs", "1", "--warmup", "0", "--size", "32", "32",
               "--threads", "1", "--out", str(tmp_path)])
    assert rc in (0, 1)


def test_train_crops_larger_synthetic_sources(tmp_path):
    cfg_path = tmp_path / "crop.yaml"
    Config(ModelConfig(**TINY), LossConfig(),
           TrainConfig(batch_size=2, clip_length=3, precision="f64", max_iterations=2, validate_interval=0,
                       checkpoint_interval=0, augment=("crop", "hflip"), frame_size=(64, 64))).save(cfg_path)
    rc = main(["train", "--config", str(cfg_path), "--synthetic", "2", "--synthetic-size", "96",
               "--out", str(tmp_path / "run")])
    assert rc == 0
    assert len(rows(tmp_path / "run" / "train_log.csv")) == 3
