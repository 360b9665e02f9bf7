"""CLI exit codes and an end-to-end pipeline walk."""

import os

import numpy as np
import pytest

from vidcs import cli
from vidcs.model_io import save_model
from vidcs.sensing import (
    FramePlane,
    load_operator,
    make_operator,
    sample_frame,
    save_measurements,
)
from vidcs.unfold import build_model
from vidcs.video_io import read_pgm, write_y4m


def write_cfg(tmp_path, **kv):
    path = tmp_path / "train.cfg"
    lines = ["# training configuration"] + [f"{k}={v}" for k, v in kv.items()]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_usage_errors_exit_2(capsys):
    assert cli.main([]) == 2
    assert cli.main(["sample"]) == 2
    assert cli.main(["no-such-command"]) == 2
    assert cli.main(["reconstruct", "--model", "m", "--meas", "x", "--out", "o",
                     "--format", "bmp"]) == 2
    capsys.readouterr()


def test_missing_files_exit_2(tmp_path, capsys):
    code = cli.main(
        ["reconstruct", "--model", str(tmp_path / "nope.bin"),
         "--meas", str(tmp_path / "nope.meas"), "--out", str(tmp_path / "out")]
    )
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_bad_train_config_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("this line has no equals sign\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "m.bin")]) == 2
    cfg.write_text("iterations=1\n")  # no data= entry
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "m.bin")]) == 2
    capsys.readouterr()


def test_end_to_end_pipeline(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(
        ["make-dataset", "--out", str(data), "--clips", "3", "--frames", "3",
         "--height", "32", "--width", "32", "--seed", "1"]
    ) == 0
    clips = sorted(os.listdir(data))
    assert clips == ["clip_000.y4m", "clip_001.y4m", "clip_002.y4m"]

    cfg = write_cfg(
        tmp_path,
        data=str(data),
        block_size=16,
        cr_list="0.1",
        conv_spec="8x3,1x3",
        iterations=4,
        batch_size=4,
        seed=0,
        holdout=1,
    )
    model_path = tmp_path / "model.bin"
    log_path = tmp_path / "train.log"
    assert cli.main(["train", "--config", cfg, "--out", str(model_path),
                     "--log", str(log_path)]) == 0
    assert model_path.exists()
    assert len(log_path.read_text().strip().splitlines()) == 4

    op_path = tmp_path / "op.bin"
    assert cli.main(["export-op", "--model", str(model_path), "--out", str(op_path)]) == 0
    op = load_operator(str(op_path))
    assert op.block_size == 16

    meas_path = tmp_path / "meas.bin"
    assert cli.main(
        ["sample", "--op", str(op_path), "--video", str(data / "clip_000.y4m"),
         "--cr", "0.1", "--out", str(meas_path)]
    ) == 0

    frames_dir = tmp_path / "frames"
    capsys.readouterr()
    assert cli.main(
        ["reconstruct", "--model", str(model_path), "--meas", str(meas_path),
         "--out", str(frames_dir), "--gt", str(data / "clip_000.y4m")]
    ) == 0
    out = capsys.readouterr().out
    assert "frame=0 psnr=" in out and "mean psnr=" in out
    pgms = sorted(os.listdir(frames_dir))
    assert pgms == ["frame_0000.pgm", "frame_0001.pgm", "frame_0002.pgm"]
    first = read_pgm(str(frames_dir / "frame_0000.pgm"))
    assert first.values.shape == (32, 32)

    assert cli.main(["eval", "--model", str(model_path),
                     "--video", str(data / "clip_000.y4m")]) == 0
    out = capsys.readouterr().out
    assert "cr=0.100 psnr=" in out and "ssim=" in out

    bypass_dir = tmp_path / "frames_bypass"
    assert cli.main(
        ["reconstruct", "--model", str(model_path), "--meas", str(meas_path),
         "--out", str(bypass_dir), "--no-mhme"]
    ) == 0
    frame1 = read_pgm(str(frames_dir / "frame_0001.pgm"))
    frame1_b = read_pgm(str(bypass_dir / "frame_0001.pgm"))
    assert not np.array_equal(frame1.values, frame1_b.values)
    capsys.readouterr()


def test_reconstruct_block_size_mismatch_exit_3(tmp_path, capsys):
    model = build_model(block_size=8, conv_spec=((4, 3), (1, 3)), seed=0)
    model_path = tmp_path / "m8.bin"
    save_model(model, str(model_path))

    op = make_operator(16, 0.1, seed=1)
    frame = FramePlane(np.random.default_rng(2).uniform(0, 255, (32, 32)))
    grid = sample_frame(op.rate_view(0.1), frame)
    meas_path = tmp_path / "m16.meas"
    save_measurements(str(meas_path), [grid])

    code = cli.main(["reconstruct", "--model", str(model_path),
                     "--meas", str(meas_path), "--out", str(tmp_path / "o")])
    assert code == 3
    assert "blocks" in capsys.readouterr().err


def test_sample_rate_above_operator_exit_3(tmp_path, capsys):
    op = make_operator(16, 0.05, seed=3)
    from vidcs.sensing import save_operator

    op_path = tmp_path / "op.bin"
    save_operator(op, str(op_path))
    video = tmp_path / "v.y4m"
    write_y4m(str(video), [FramePlane(np.zeros((32, 32)))])
    code = cli.main(["sample", "--op", str(op_path), "--video", str(video),
                     "--cr", "0.2", "--out", str(tmp_path / "m.meas")])
    assert code == 3
    capsys.readouterr()


def test_gt_frame_count_mismatch_exit_3(tmp_path, capsys):
    model = build_model(block_size=8, conv_spec=((4, 3), (1, 3)), seed=4,
                        norm_mean=128.0, norm_std=50.0)
    model_path = tmp_path / "m.bin"
    save_model(model, str(model_path))
    op = make_operator(8, 0.1, seed=model.op_seed)
    rng = np.random.default_rng(5)
    frames = [FramePlane(rng.uniform(0, 255, (16, 16)), i) for i in range(3)]
    grids = [sample_frame(model.sampling_view(100), f) for f in frames]
    meas_path = tmp_path / "m.meas"
    save_measurements(str(meas_path), grids)
    gt = tmp_path / "gt.y4m"
    write_y4m(str(gt), frames[:2])  # two ground-truth frames, three in the stream
    code = cli.main(["reconstruct", "--model", str(model_path), "--meas", str(meas_path),
                     "--out", str(tmp_path / "o"), "--gt", str(gt)])
    assert code == 3
    capsys.readouterr()


def test_train_divergence_exit_4(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(
        ["make-dataset", "--out", str(data), "--clips", "1", "--frames", "2",
         "--height", "16", "--width", "16", "--seed", "2"]
    ) == 0
    cfg = write_cfg(
        tmp_path,
        data=str(data),
        block_size=8,
        cr_list="0.1",
        conv_spec="4x3,1x3",
        iterations=3,
        batch_size=2,
        lr="1e200",
        seed=0,
    )
    with np.errstate(over="ignore", invalid="ignore"):
        code = cli.main(["train", "--config", cfg, "--out", str(tmp_path / "m.bin")])
    assert code == 4
    assert "error:" in capsys.readouterr().err


def test_export_op_fresh_and_missing_args(tmp_path, capsys):
    out = tmp_path / "op.bin"
    assert cli.main(["export-op", "--out", str(out)]) == 2  # neither --model nor --cr-max
    assert cli.main(["export-op", "--cr-max", "0.1", "--block-size", "8",
                     "--seed", "9", "--out", str(out)]) == 0
    op = load_operator(str(out))
    assert op.block_size == 8 and op.m_max == 6
    capsys.readouterr()


def test_eval_multi_rate_prints_every_rate(tmp_path, capsys):
    model = build_model(
        block_size=8,
        cr_list=(0.05, 0.1, 0.2),
        conv_spec=((4, 3), (1, 3)),
        use_itp=True,
        seed=6,
        norm_mean=128.0,
        norm_std=50.0,
    )
    model_path = tmp_path / "m.bin"
    save_model(model, str(model_path))
    video = tmp_path / "v.y4m"
    rng = np.random.default_rng(7)
    write_y4m(str(video), [FramePlane(rng.uniform(0, 255, (16, 16)), i) for i in range(2)])
    assert cli.main(["eval", "--model", str(model_path), "--video", str(video)]) == 0
    out = capsys.readouterr().out
    for tag in ("cr=0.050", "cr=0.100", "cr=0.200"):
        assert tag in out
