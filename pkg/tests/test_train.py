"""Training loop: schedule, accumulation equivalence, checkpoints, determinism."""

import os

import numpy as np
import pytest

from pedcast import tensorcore as tc
from pedcast.graph import Kernel
from pedcast.model import ModelConfig, init_params
from pedcast.train import (
    CheckpointError, NonFiniteLossError, TrainConfig, TrainLog, load_checkpoint,
    lr_schedule, require_matching_config, save_checkpoint, train, window_loss,
)
from pedcast.trajdata import TrajectoryWindow, extract_windows
from synthcrowd import make_scene

SMALL = ModelConfig(n_txpcnn=2)
KERNEL = Kernel("sim")


def training_windows(seed=0, n_scenes=3, max_windows=40, n_steps=36, **scene_kw):
    windows = []
    for i in range(n_scenes):
        windows.extend(extract_windows(make_scene(f"s{i}", seed=seed + i,
                                                  n_peds=5, n_steps=n_steps,
                                                  **scene_kw)))
    return windows[:max_windows]


def test_lr_schedule_switch():
    cfg = TrainConfig(epochs=250)
    assert lr_schedule(cfg, 0) == 0.01
    assert lr_schedule(cfg, 149) == 0.01
    assert lr_schedule(cfg, 150) == 0.002
    assert lr_schedule(cfg, 249) == 0.002
    with pytest.raises(ValueError):
        lr_schedule(cfg, 250)
    with pytest.raises(ValueError):
        lr_schedule(cfg, -1)


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.lr_initial, cfg.lr_after, cfg.lr_switch_epoch,
            cfg.batch_windows) == (250, 0.01, 0.002, 150, 128)
    assert cfg.clip_norm is None
    with pytest.raises(ValueError):
        TrainConfig(batch_windows=0)
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=100)       # default switch epoch no longer inside
    with pytest.raises(ValueError):
        TrainConfig(lr_after=0.02)    # larger than lr_initial


def test_loss_decreases_over_short_run():
    # five epochs on constant-velocity crowds: mean loss must drop
    windows = training_windows(n_scenes=6, n_steps=60, max_windows=200,
                               turn_lo=0.0, turn_hi=0.0)
    assert len(windows) == 200
    cfg = TrainConfig(epochs=5, batch_windows=8, seed=1, lr_switch_epoch=4,
                      clip_norm=4.0)
    _, log = train(SMALL, cfg, windows, KERNEL)
    assert log.mean_loss[4] < log.mean_loss[0]


def test_gradient_accumulation_matches_summed_loss():
    # one step over k accumulated windows == one step on the summed loss
    windows = training_windows()[:3]
    lr = 0.01

    def fresh():
        return init_params(SMALL, 11)

    acc = fresh()
    for w in windows:
        with tc.Tape() as tape:
            loss = window_loss(w, acc, SMALL, KERNEL)
        tc.backward(loss, tape)
    for t in acc.tensors():
        t.data -= lr * t.grad

    summed = fresh()
    with tc.Tape() as tape:
        total = window_loss(windows[0], summed, SMALL, KERNEL)
        for w in windows[1:]:
            total = tc.add(total, window_loss(w, summed, SMALL, KERNEL))
    tc.backward(total, tape)
    for t in summed.tensors():
        t.data -= lr * t.grad

    for name in acc.names():
        np.testing.assert_allclose(acc[name].data, summed[name].data,
                                   rtol=0, atol=1e-12)


def test_single_step_when_batch_exceeds_dataset():
    windows = training_windows(max_windows=10)
    cfg = TrainConfig(epochs=2, batch_windows=512, seed=2, lr_switch_epoch=1,
                      clip_norm=4.0)
    _, log = train(SMALL, cfg, windows, KERNEL)
    assert log.n_steps == [1, 1]


def test_shuffling_differs_between_epochs_but_reproduces():
    a = np.random.default_rng([7, 0]).permutation(100)
    b = np.random.default_rng([7, 1]).permutation(100)
    c = np.random.default_rng([7, 0]).permutation(100)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_training_deterministic_across_runs(tmp_path):
    windows = training_windows()
    cfg = TrainConfig(epochs=3, batch_windows=16, seed=3, lr_switch_epoch=2,
                      clip_norm=4.0)
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    os.makedirs(out_a)
    os.makedirs(out_b)
    _, log_a = train(SMALL, cfg, windows, KERNEL, out_dir=out_a)
    _, log_b = train(SMALL, cfg, windows, KERNEL, out_dir=out_b)
    assert log_a.mean_loss == log_b.mean_loss
    bytes_a = open(os.path.join(out_a, "ckpt_last.bin"), "rb").read()
    bytes_b = open(os.path.join(out_b, "ckpt_last.bin"), "rb").read()
    assert bytes_a == bytes_b


def test_nonfinite_loss_aborts_with_location():
    windows = training_windows(max_windows=4)
    params = init_params(SMALL, 0)
    params["head.w"].data[:] = 1e200  # force overflow in the head
    cfg = TrainConfig(epochs=1, batch_windows=4, lr_switch_epoch=0)
    with pytest.raises(NonFiniteLossError, match=r"epoch 0, window \d+"):
        train(SMALL, cfg, windows, KERNEL, params=params)


def test_clip_norm_limits_update():
    windows = training_windows(max_windows=6)
    base = train(SMALL, TrainConfig(epochs=1, batch_windows=6, seed=5,
                                    lr_switch_epoch=0), windows, KERNEL)[0]
    clipped = train(SMALL, TrainConfig(epochs=1, batch_windows=6, seed=5,
                                       lr_switch_epoch=0, clip_norm=1e-3),
                    windows, KERNEL)[0]
    init = init_params(SMALL, 5)
    move_base = sum(float(np.abs(base[n].data - init[n].data).sum())
                    for n in base.names())
    move_clip = sum(float(np.abs(clipped[n].data - init[n].data).sum())
                    for n in clipped.names())
    assert move_clip < move_base


def test_best_checkpoint_tracks_validation(tmp_path):
    windows = training_windows()
    val = training_windows(seed=50, n_scenes=1, max_windows=8)
    out = str(tmp_path)
    cfg = TrainConfig(epochs=3, batch_windows=16, seed=6, lr_switch_epoch=2,
                      clip_norm=4.0)
    train(SMALL, cfg, windows, KERNEL, val_windows=val, out_dir=out)
    assert os.path.exists(os.path.join(out, "ckpt_last.bin"))
    assert os.path.exists(os.path.join(out, "ckpt_best.bin"))


def test_trainlog_csv_layout():
    log = TrainLog()
    log.append(0, 1.25, 0.01, 0.5, 3)
    log.append(1, 1.0, 0.01, 0.4, 3)
    lines = log.to_csv().strip().split("\n")
    assert lines[0] == "epoch,mean_loss,lr,wall_seconds"
    assert lines[1].startswith("0,1.25,0.01,")
    assert len(lines) == 3


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(SMALL, 12)
    path = str(tmp_path / "model.bin")
    save_checkpoint(path, params, SMALL, Kernel("sim_eps", eps=0.3), epoch=7)
    loaded, config, kernel, epoch = load_checkpoint(path)
    assert config == SMALL
    assert (kernel.kind, kernel.eps) == ("sim_eps", 0.3)
    assert epoch == 7
    for name in params.names():
        np.testing.assert_array_equal(loaded[name].data, params[name].data)


def test_checkpoint_truncated_rejected(tmp_path):
    params = init_params(SMALL, 13)
    path = str(tmp_path / "model.bin")
    save_checkpoint(path, params, SMALL, KERNEL)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-16])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(path)


def test_checkpoint_garbage_rejected(tmp_path):
    path = str(tmp_path / "bad.bin")
    open(path, "wb").write(b"not a checkpoint\ndata\n\x00\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "missing.bin"))


def test_checkpoint_config_mismatch_refused(tmp_path):
    params = init_params(SMALL, 14)
    path = str(tmp_path / "model.bin")
    save_checkpoint(path, params, SMALL, KERNEL)
    _, config, _, _ = load_checkpoint(path)
    with pytest.raises(CheckpointError, match="different model configuration"):
        require_matching_config(config, ModelConfig(n_txpcnn=5))
    require_matching_config(config, SMALL)


def test_resume_continues_epoch_numbering(tmp_path):
    windows = training_windows(max_windows=12)
    cfg = TrainConfig(epochs=2, batch_windows=8, seed=7, lr_switch_epoch=1,
                      clip_norm=4.0)
    out = str(tmp_path)
    params, log1 = train(SMALL, cfg, windows, KERNEL, out_dir=out)
    _, _, _, epoch = load_checkpoint(os.path.join(out, "ckpt_last.bin"))
    assert epoch == 2
    _, log2 = train(SMALL, cfg, windows, KERNEL, out_dir=out, params=params,
                    start_epoch=epoch)
    assert log1.epochs == [0, 1]
    assert log2.epochs == [2, 3]
    _, _, _, epoch2 = load_checkpoint(os.path.join(out, "ckpt_last.bin"))
    assert epoch2 == 4
