"""Likelihood training with plain SGD and window-level gradient accumulation.

A "batch" of 128 windows is realized by summing gradients over 128
consecutive forward/backward passes and applying one SGD step, which is
exactly equivalent to one step on the summed loss. Checkpoints are a
text header (format version, config fields, kernel, epoch, tensor table)
followed by the raw little-endian float64 payload in header order.
"""

from __future__ import annotations

import io
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .gaussian import nll, raw_to_params
from .graph import Kernel, build_st_graph
from .model import ModelConfig, ModelParams, forward, init_params, param_spec
from .trajdata import target_features, to_features

CKPT_FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    lr_initial: float = 0.01
    lr_after: float = 0.002
    lr_switch_epoch: int = 150
    batch_windows: int = 128
    seed: int = 0
    clip_norm: float | None = None
    loss_reduce: str = "mean_peds"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.lr_after <= self.lr_initial:
            raise ValueError("need 0 < lr_after <= lr_initial")
        if self.lr_switch_epoch >= self.epochs:
            raise ValueError("lr_switch_epoch must be smaller than epochs")
        if self.batch_windows < 1:
            raise ValueError("batch_windows must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0.0:
            raise ValueError("clip_norm must be positive when set")
        if self.loss_reduce not in ("mean_peds", "sum"):
            raise ValueError(f"unknown loss_reduce {self.loss_reduce!r}")


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Step schedule: lr_initial before the switch epoch, lr_after from it on."""
    if epoch < 0 or epoch >= config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.lr_initial if epoch < config.lr_switch_epoch else config.lr_after


@dataclass
class TrainLog:
    """Per-epoch scalars; the CSV mirrors the field order."""

    epochs: list = field(default_factory=list)        # epoch index
    mean_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_seconds: list = field(default_factory=list)
    n_steps: list = field(default_factory=list)       # optimizer steps

    def append(self, epoch, loss, lr, wall, steps) -> None:
        self.epochs.append(int(epoch))
        self.mean_loss.append(float(loss))
        self.lr.append(float(lr))
        self.wall_seconds.append(float(wall))
        self.n_steps.append(int(steps))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,mean_loss,lr,wall_seconds\n")
        for e, l, r, w in zip(self.epochs, self.mean_loss, self.lr,
                              self.wall_seconds):
            buf.write(f"{e},{l:.12g},{r:.12g},{w:.6f}\n")
        return buf.getvalue()


class NonFiniteLossError(ArithmeticError):
    """Raised when a window's loss or gradients go NaN/Inf."""


def window_loss(window, params: ModelParams, model_cfg: ModelConfig,
                kernel: Kernel, reduce: str = "mean_peds") -> tc.Tensor:
    graph = build_st_graph(to_features(window, model_cfg.feature_mode), kernel)
    raw = forward(graph, params, model_cfg)
    target = np.transpose(target_features(window, model_cfg.feature_mode), (1, 0, 2))
    return nll(raw_to_params(raw), target, reduce=reduce)


def _global_grad_norm(params: ModelParams) -> float:
    total = 0.0
    for t in params.tensors():
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    return float(np.sqrt(total))


def _sgd_step(params: ModelParams, lr: float, clip_norm: float | None) -> None:
    scale = 1.0
    if clip_norm is not None:
        norm = _global_grad_norm(params)
        if norm > clip_norm:
            scale = clip_norm / norm
    for t in params.tensors():
        if t.grad is not None:
            t.data -= lr * scale * t.grad
    params.zero_grads()


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, windows, kernel: Kernel,
          val_windows=None, out_dir: str | None = None,
          params: ModelParams | None = None, start_epoch: int = 0) -> tuple:
    """Run the training loop; returns (params, TrainLog).

    Per-epoch shuffling derives from (seed, epoch) so runs with the same
    seed replay identical window orders regardless of restarts. When
    out_dir is given, every epoch rewrites `ckpt_last.bin` and improved
    validation loss rewrites `ckpt_best.bin`.
    """
    if not windows:
        raise ValueError("no training windows")
    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
    log = TrainLog()
    best_val = np.inf

    # graphs and targets are pure functions of the windows; build once
    prepared = []
    for w in windows:
        graph = build_st_graph(to_features(w, model_cfg.feature_mode), kernel)
        target = np.transpose(target_features(w, model_cfg.feature_mode), (1, 0, 2))
        prepared.append((graph, target))

    for epoch in range(start_epoch, start_epoch + train_cfg.epochs):
        t0 = time.perf_counter()
        lr = train_cfg.lr_initial if epoch < train_cfg.lr_switch_epoch \
            else train_cfg.lr_after
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(prepared))
        params.zero_grads()
        pending = 0
        steps = 0
        loss_total = 0.0
        for idx in order:
            graph, target = prepared[idx]
            try:
                with tc.Tape() as tape:
                    loss = nll(raw_to_params(forward(graph, params, model_cfg)),
                               target, reduce=train_cfg.loss_reduce)
                loss_val = float(loss.data)
                tc.backward(loss, tape)
            except tc.NumericError as exc:
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, window {int(idx)}") from exc
            if not np.isfinite(loss_val):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, window {int(idx)}")
            loss_total += loss_val
            pending += 1
            if pending == train_cfg.batch_windows:
                _sgd_step(params, lr, train_cfg.clip_norm)
                pending = 0
                steps += 1
        if pending:
            _sgd_step(params, lr, train_cfg.clip_norm)
            steps += 1

        wall = time.perf_counter() - t0
        log.append(epoch, loss_total / len(prepared), lr, wall, steps)

        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "ckpt_last.bin"), params,
                            model_cfg, kernel, epoch=epoch + 1)
        if val_windows:
            val = validation_loss(params, model_cfg, kernel, val_windows,
                                  train_cfg.loss_reduce)
            if val < best_val:
                best_val = val
                if out_dir is not None:
                    save_checkpoint(os.path.join(out_dir, "ckpt_best.bin"), params,
                                    model_cfg, kernel, epoch=epoch + 1)
    return params, log


def validation_loss(params, model_cfg, kernel, windows, reduce="mean_peds") -> float:
    total = 0.0
    for w in windows:
        total += float(window_loss(w, params, model_cfg, kernel, reduce).data)
    return total / len(windows)


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(path: str, params: ModelParams, config: ModelConfig,
                    kernel: Kernel, epoch: int = 0) -> None:
    spec = param_spec(config)
    lines = [f"pedcast-checkpoint {CKPT_FORMAT_VERSION}"]
    for name, value in config.to_fields().items():
        lines.append(f"config {name} {value}")
    lines.append(f"kernel {kernel.kind} {kernel.sigma!r} {kernel.eps!r}")
    lines.append(f"epoch {epoch}")
    for name, shape, _ in spec:
        dims = " ".join(str(d) for d in shape)
        lines.append(f"tensor {name} {dims}".rstrip())
    lines.append("data")
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = b"".join(params[name].data.astype("<f8").tobytes()
                       for name, _, _ in spec)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Returns (params, ModelConfig, Kernel, epoch); any structural or
    size mismatch raises CheckpointError without partial state."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {exc}") from exc
    marker = b"\ndata\n"
    cut = blob.find(marker)
    if cut < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    header, payload = blob[:cut].decode("ascii", "replace"), blob[cut + len(marker):]
    lines = header.split("\n")
    first = lines[0].split()
    if len(first) != 2 or first[0] != "pedcast-checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(first[1]) != CKPT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {first[1]}")

    config_fields: dict = {}
    kernel = Kernel()
    epoch = 0
    tensor_lines = []
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "config" and len(parts) == 3:
            config_fields[parts[1]] = parts[2]
        elif parts[0] == "kernel" and len(parts) == 4:
            kernel = Kernel(parts[1], float(parts[2]), float(parts[3]))
        elif parts[0] == "epoch" and len(parts) == 2:
            epoch = int(parts[1])
        elif parts[0] == "tensor":
            tensor_lines.append((parts[1], tuple(int(d) for d in parts[2:])))
        else:
            raise CheckpointError(f"{path}: bad header line {line!r}")

    try:
        typed = {}
        for key, value in config_fields.items():
            typed[key] = value if key == "feature_mode" else int(value)
        config = ModelConfig(**typed)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config in header: {exc}") from exc

    spec = param_spec(config)
    expected = [(name, shape) for name, shape, _ in spec]
    if tensor_lines != expected:
        raise CheckpointError(f"{path}: tensor table does not match config")
    total = sum(int(np.prod(shape)) for _, shape in expected)
    if len(payload) != total * 8:
        raise CheckpointError(
            f"{path}: payload holds {len(payload)} bytes, expected {total * 8}")

    flat = np.frombuffer(payload, dtype="<f8")
    tensors = {}
    offset = 0
    for name, shape in expected:
        size = int(np.prod(shape))
        data = np.array(flat[offset:offset + size], dtype=np.float64).reshape(shape)
        tensors[name] = tc.Tensor(data, requires_grad=True)
        offset += size
    return ModelParams(tensors), config, kernel, epoch


def require_matching_config(ckpt_config: ModelConfig, requested: ModelConfig) -> None:
    if ckpt_config != requested:
        raise CheckpointError(
            "checkpoint was trained with a different model configuration: "
            f"{ckpt_config.to_fields()} vs requested {requested.to_fields()}")
