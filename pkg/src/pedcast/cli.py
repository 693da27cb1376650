"""Command-line entry point wiring data, training, evaluation, and plots.

Settings resolve in three layers: dataclass defaults, then a flat
`key = value` config file, then explicit command-line flags. The fully
resolved config is written next to every command's outputs. Exit codes:
0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensorcore as tc
from .evaluate import (
    ablation_grid, data_efficiency, evaluate_windows, inference_bench,
    kernel_ablation, linear_baseline_report, predict_window, window_seed,
)
from .gaussian import sample
from .graph import Kernel
from .model import ModelConfig
from .plotting import PredictionCSVError, parse_prediction_csv, prediction_csv, scene_svg
from .train import (
    CheckpointError, NonFiniteLossError, TrainConfig, load_checkpoint,
    require_matching_config, train,
)
from .trajdata import DataError, extract_windows, leave_one_out_split, load_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    """Bad config file or flag combination."""


@dataclass(frozen=True)
class RunConfig:
    """Every tunable the CLI knows, one flat namespace."""

    dataset_root: str = "."
    heldout: str = "zara1"
    split: str = "test"
    kernel: str = "sim"
    kernel_sigma: float = 1.0
    kernel_eps: float = 0.2
    n_stgcnn: int = 1
    n_txpcnn: int = 5
    embed_feat: int = 5
    obs_len: int = 8
    pred_len: int = 12
    kernel_t: int = 3
    feature_mode: str = "displacement"
    epochs: int = 250
    lr_initial: float = 0.01
    lr_after: float = 0.002
    lr_switch_epoch: int = 150
    batch_windows: int = 128
    clip_norm: float | None = None
    loss_reduce: str = "mean_peds"
    seed: int = 0
    samples: int = 20
    out_dir: str = "."
    threads: int = 1
    budget_epochs: int = 0
    repeats: int = 3
    bench_repeats: int = 1000
    window_index: int = 0
    checkpoint: str | None = None
    resume: str | None = None
    prediction: str | None = None

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_stgcnn=self.n_stgcnn, n_txpcnn=self.n_txpcnn,
                           embed_feat=self.embed_feat, obs_len=self.obs_len,
                           pred_len=self.pred_len, kernel_t=self.kernel_t,
                           feature_mode=self.feature_mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr_initial=self.lr_initial,
                           lr_after=self.lr_after,
                           lr_switch_epoch=self.lr_switch_epoch,
                           batch_windows=self.batch_windows, seed=self.seed,
                           clip_norm=self.clip_norm,
                           loss_reduce=self.loss_reduce)

    def kernel_obj(self) -> Kernel:
        return Kernel(self.kernel, sigma=self.kernel_sigma, eps=self.kernel_eps)


_OPTIONAL_FIELDS = {"clip_norm", "checkpoint", "resume", "prediction"}


def _coerce(name: str, text: str):
    """Config-file strings to typed field values."""
    defaults = RunConfig()
    if not hasattr(defaults, name):
        raise ConfigError(f"unknown config key {name!r}")
    if name in _OPTIONAL_FIELDS and text.lower() in ("none", "null", ""):
        return None
    if name == "clip_norm":
        return float(text)
    current = getattr(defaults, name)
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def parse_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        values[key] = _coerce(key, val)
    return values


def resolved_config_text(cfg: RunConfig) -> str:
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def _persist_config(cfg: RunConfig) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config_resolved.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(resolved_config_text(cfg))


def _write(cfg: RunConfig, name: str, text: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def _protocol_windows(cfg: RunConfig):
    """(train, val, test) windows for the held-out scene protocol."""
    by_split = load_dataset(cfg.dataset_root)
    model_cfg = cfg.model_config()

    def windows_of(scenes):
        out = []
        for scene in scenes:
            out.extend(extract_windows(scene, obs_len=model_cfg.obs_len,
                                       pred_len=model_cfg.pred_len))
        return out

    train_scenes, _ = leave_one_out_split(by_split.get("train", []), cfg.heldout)
    val_scenes = []
    if by_split.get("val"):
        val_scenes, _ = leave_one_out_split(by_split["val"], cfg.heldout)
    _, test_scenes = leave_one_out_split(by_split.get(cfg.split, []), cfg.heldout)
    return windows_of(train_scenes), windows_of(val_scenes), windows_of(test_scenes)


def _test_windows(cfg: RunConfig):
    by_split = load_dataset(cfg.dataset_root)
    if cfg.split not in by_split:
        raise DataError(f"split {cfg.split!r} not present under {cfg.dataset_root!r}")
    _, test_scenes = leave_one_out_split(by_split[cfg.split], cfg.heldout)
    model_cfg = cfg.model_config()
    windows = []
    for scene in test_scenes:
        windows.extend(extract_windows(scene, obs_len=model_cfg.obs_len,
                                       pred_len=model_cfg.pred_len))
    return windows


# ---------------------------------------------------------------------------
# commands


def cmd_validate(cfg: RunConfig) -> int:
    by_split = load_dataset(cfg.dataset_root)
    total = 0
    for split in sorted(by_split):
        for scene in by_split[split]:
            windows = extract_windows(scene, obs_len=cfg.obs_len,
                                      pred_len=cfg.pred_len)
            total += len(windows)
            print(f"{split}/{scene.scene_id}: peds={scene.n_peds} "
                  f"steps={scene.n_steps} windows={len(windows)}")
    print(f"total windows: {total}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    kernel = cfg.kernel_obj()
    _persist_config(cfg)
    train_w, val_w, _ = _protocol_windows(cfg)
    params, start_epoch = None, 0
    if cfg.resume:
        params, ckpt_cfg, ckpt_kernel, start_epoch = load_checkpoint(cfg.resume)
        require_matching_config(ckpt_cfg, model_cfg)
        kernel = ckpt_kernel
    params, log = train(model_cfg, train_cfg, train_w, kernel,
                        val_windows=val_w or None, out_dir=cfg.out_dir,
                        params=params, start_epoch=start_epoch)
    _write(cfg, "trainlog.csv", log.to_csv())
    print(f"trained epochs {log.epochs[0]}..{log.epochs[-1]} on "
          f"{len(train_w)} windows; final mean loss {log.mean_loss[-1]:.6g}")
    print(f"checkpoint: {os.path.join(cfg.out_dir, 'ckpt_last.bin')}")
    return EXIT_OK


def _require_checkpoint(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    return load_checkpoint(cfg.checkpoint)


def cmd_eval(cfg: RunConfig) -> int:
    params, model_cfg, kernel, _ = _require_checkpoint(cfg)
    _persist_config(cfg)
    windows = _test_windows(cfg)
    if not windows:
        raise DataError(f"no {cfg.split} windows for held-out {cfg.heldout!r}")
    report = evaluate_windows(params, model_cfg, windows, kernel,
                              n=cfg.samples, seed=cfg.seed, threads=cfg.threads)
    lin = linear_baseline_report(windows)
    _write(cfg, "metrics.csv", report.to_csv())
    print(f"model  ade={report.ade:.4f} fde={report.fde:.4f} "
          f"(best of {cfg.samples}, {report.n_windows} windows)")
    print(f"linear ade={lin.ade:.4f} fde={lin.fde:.4f}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    params, model_cfg, kernel, _ = _require_checkpoint(cfg)
    _persist_config(cfg)
    windows = _test_windows(cfg)
    if not 0 <= cfg.window_index < len(windows):
        raise ConfigError(f"window index {cfg.window_index} outside "
                          f"[0, {len(windows)})")
    window = windows[cfg.window_index]
    seq = predict_window(params, model_cfg, window, kernel)
    draws = sample(seq, seed=window_seed(cfg.seed, cfg.window_index),
                   count=cfg.samples)
    meta = {"scene": window.scene_id, "start_frame": window.start_frame,
            "obs_len": model_cfg.obs_len, "pred_len": model_cfg.pred_len,
            "split": cfg.split, "heldout": cfg.heldout,
            "samples": cfg.samples, "seed": cfg.seed,
            "window_index": cfg.window_index}
    path = _write(cfg, "prediction.csv", prediction_csv(meta, seq, draws))
    print(f"prediction: {path}")
    return EXIT_OK


def cmd_plot(cfg: RunConfig) -> int:
    if not cfg.prediction:
        raise ConfigError("--prediction is required for this command")
    try:
        with open(cfg.prediction, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise PredictionCSVError(f"cannot read {cfg.prediction!r}: {exc}") from None
    meta, params, samples = parse_prediction_csv(text)
    for key in ("scene", "start_frame"):
        if key not in meta:
            raise PredictionCSVError(f"prediction CSV lacks `# {key}` metadata")
    window = _find_window(cfg, meta)
    t_vals = np.unique(params[:, 0])
    ped_vals = np.unique(params[:, 1])
    n_t, n_peds = t_vals.size, ped_vals.size
    order = np.lexsort((params[:, 0], params[:, 1]))   # ped-major, then t
    grid = params[order].reshape(n_peds, n_t, 9)
    svg = scene_svg(observed=window.positions_obs, truth=window.positions_pred,
                    mean_path=grid[:, :, 7:9], sigma=grid[:, :, 4:6],
                    rho=grid[:, :, 6], samples=samples,
                    ped_ids=window.ped_ids,
                    title=f"{meta['scene']} @ {meta['start_frame']}")
    _persist_config(cfg)
    name = f"{meta['scene']}_{meta['start_frame']}.svg"
    path = _write(cfg, name, svg)
    print(f"plot: {path}")
    return EXIT_OK


def _find_window(cfg: RunConfig, meta: dict):
    split = meta.get("split", cfg.split)
    obs_len = int(meta.get("obs_len", cfg.obs_len))
    pred_len = int(meta.get("pred_len", cfg.pred_len))
    by_split = load_dataset(cfg.dataset_root)
    if split not in by_split:
        raise DataError(f"split {split!r} not present under {cfg.dataset_root!r}")
    start = int(meta["start_frame"])
    for scene in by_split[split]:
        if scene.scene_id != meta["scene"]:
            continue
        for window in extract_windows(scene, obs_len=obs_len, pred_len=pred_len):
            if window.start_frame == start:
                return window
    raise DataError(f"window {meta['scene']!r} @ {start} not found in "
                    f"{split!r} split")


def cmd_bench(cfg: RunConfig) -> int:
    _persist_config(cfg)
    report = inference_bench(config=cfg.model_config(), kernel=cfg.kernel_obj(),
                             repeats=cfg.bench_repeats, seed=cfg.seed)
    path = _write(cfg, "bench.csv", report)
    print(report, end="")
    print(f"bench: {path}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    _persist_config(cfg)
    train_w, _, test_w = _protocol_windows(cfg)
    table = ablation_grid(train_w, test_w, budget_epochs=cfg.budget_epochs,
                          base_config=cfg.model_config(),
                          train_cfg=_desk_train_cfg(cfg),
                          kernel=cfg.kernel_obj(), n=cfg.samples,
                          seed=cfg.seed, threads=cfg.threads)
    path = _write(cfg, "ablation.csv", table.to_csv())
    print(table.to_text(), end="")
    print(f"ablation: {path}")
    return EXIT_OK


def cmd_kernels(cfg: RunConfig) -> int:
    _persist_config(cfg)
    train_w, _, test_w = _protocol_windows(cfg)
    table = kernel_ablation(train_w, test_w, budget_epochs=cfg.budget_epochs,
                            base_config=cfg.model_config(),
                            train_cfg=_desk_train_cfg(cfg),
                            sigma=cfg.kernel_sigma, eps=cfg.kernel_eps,
                            n=cfg.samples, seed=cfg.seed, threads=cfg.threads)
    path = _write(cfg, "kernels.csv", table.to_csv())
    print(table.to_text(), end="")
    print(f"kernels: {path}")
    return EXIT_OK


def cmd_data_eff(cfg: RunConfig) -> int:
    _persist_config(cfg)
    train_w, _, test_w = _protocol_windows(cfg)
    csv = data_efficiency(train_w, test_w, repeats=cfg.repeats,
                          budget_epochs=cfg.budget_epochs,
                          base_config=cfg.model_config(),
                          train_cfg=_desk_train_cfg(cfg),
                          kernel=cfg.kernel_obj(), n=cfg.samples,
                          seed=cfg.seed, threads=cfg.threads)
    path = _write(cfg, "data_efficiency.csv", csv)
    print(csv, end="")
    print(f"data efficiency: {path}")
    return EXIT_OK


def _desk_train_cfg(cfg: RunConfig) -> TrainConfig:
    """Training template for budgeted harness runs; the harness swaps in
    the budget itself."""
    base = cfg.train_config()
    if cfg.budget_epochs:
        return base
    return replace(base, epochs=1, lr_switch_epoch=0)


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


_COMMANDS = {
    "validate": cmd_validate,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "plot": cmd_plot,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "kernels": cmd_kernels,
    "data-eff": cmd_data_eff,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="pedcast",
                     description="social trajectory forecasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", dest="_config_file")
        sp.add_argument("--dataset-root", dest="dataset_root")
        sp.add_argument("--heldout",
                        choices=("eth", "hotel", "univ", "zara1", "zara2"))
        sp.add_argument("--split")
        sp.add_argument("--kernel",
                        choices=("sim", "l2", "exp", "sim_eps", "ones"))
        sp.add_argument("--kernel-sigma", dest="kernel_sigma", type=float)
        sp.add_argument("--kernel-eps", dest="kernel_eps", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr-initial", dest="lr_initial", type=float)
        sp.add_argument("--lr-after", dest="lr_after", type=float)
        sp.add_argument("--lr-switch-epoch", dest="lr_switch_epoch", type=int)
        sp.add_argument("--batch-windows", dest="batch_windows", type=int)
        sp.add_argument("--clip-norm", dest="clip_norm", type=float)
        sp.add_argument("--n-stgcnn", dest="n_stgcnn", type=int)
        sp.add_argument("--n-txpcnn", dest="n_txpcnn", type=int)
        sp.add_argument("--obs-len", dest="obs_len", type=int)
        sp.add_argument("--pred-len", dest="pred_len", type=int)
        sp.add_argument("--feature-mode", dest="feature_mode",
                        choices=("displacement", "absolute"))
        sp.add_argument("--samples", type=int)
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("--threads", type=int)
        sp.add_argument("--budget-epochs", dest="budget_epochs", type=int)
        sp.add_argument("--repeats", type=int)
        sp.add_argument("--bench-repeats", dest="bench_repeats", type=int)
        sp.add_argument("--window-index", dest="window_index", type=int)
        sp.add_argument("--checkpoint")
        sp.add_argument("--resume")
        sp.add_argument("--prediction")
    return parser


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    merged = {}
    config_file = getattr(ns, "_config_file", None)
    if config_file:
        merged.update(parse_config_file(config_file))
    for key, value in vars(ns).items():
        if key in ("command", "_config_file"):
            continue
        merged[key] = value
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(ns)
        return _COMMANDS[ns.command](cfg)
    except (PredictionCSVError, DataError, CheckpointError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (tc.NumericError, NonFiniteLossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
