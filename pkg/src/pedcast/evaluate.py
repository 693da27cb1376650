"""Displacement-error metrics, best-of-N protocol, baselines, harnesses.

ADE is the mean Euclidean error over every (pedestrian, predicted step);
FDE looks at the final step only. Best-of-N draws N seeded sample
trajectories per window and keeps the best, minimizing ADE and FDE
independently by default. Dataset-level numbers weight each window by
its pedestrian count, which makes them per-pedestrian means.
"""

from __future__ import annotations

import io
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .gaussian import BiGaussSeq, raw_to_params, sample
from .graph import Kernel, build_st_graph
from .model import ModelConfig, ModelParams, forward, init_params, param_count
from .trajdata import to_features
from .train import TrainConfig, train


def ade(pred: np.ndarray, truth: np.ndarray) -> float:
    """Average displacement error over N x T x 2 trajectories."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 3 or pred.shape[2] != 2:
        raise ValueError(f"trajectory shapes differ: {pred.shape} vs {truth.shape}")
    return float(np.mean(np.linalg.norm(pred - truth, axis=2)))


def fde(pred: np.ndarray, truth: np.ndarray) -> float:
    """Final displacement error: mean over pedestrians at the last step."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 3 or pred.shape[2] != 2:
        raise ValueError(f"trajectory shapes differ: {pred.shape} vs {truth.shape}")
    return float(np.mean(np.linalg.norm(pred[:, -1] - truth[:, -1], axis=1)))


def predict_window(params: ModelParams, config: ModelConfig, window,
                   kernel: Kernel) -> BiGaussSeq:
    """Forward one window into its predicted Gaussian sequence."""
    graph = build_st_graph(to_features(window, config.feature_mode), kernel)
    raw = forward(graph, params, config)
    origin = window.positions_obs[:, -1].copy()
    return raw_to_params(raw, origin=origin, space=config.feature_mode)


def best_of_n(params, config, window, kernel, n: int = 20, seed: int = 0,
              joint: bool = False) -> tuple:
    """(ADE, FDE) of the best among n sampled trajectories for one window.

    Sampling is prefix-stable, so results are monotone non-increasing in n.
    `joint` picks the single sample with the best ADE and reports its FDE;
    the default minimizes the two metrics independently.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    seq = predict_window(params, config, window, kernel)
    draws = sample(seq, seed=seed, count=n)            # n x N x T x 2
    truth = window.positions_pred
    ades = np.array([ade(d, truth) for d in draws])
    fdes = np.array([fde(d, truth) for d in draws])
    if joint:
        best = int(np.argmin(ades))
        return float(ades[best]), float(fdes[best])
    return float(ades.min()), float(fdes.min())


def window_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass(frozen=True)
class MetricReport:
    ade: float
    fde: float
    n_windows: int
    n_samples: int
    seed: int

    def to_csv(self) -> str:
        return ("ade,fde,n_windows,n_samples,seed\n"
                f"{self.ade:.12g},{self.fde:.12g},{self.n_windows},"
                f"{self.n_samples},{self.seed}\n")


def evaluate_windows(params, config, windows, kernel, n: int = 20, seed: int = 0,
                     joint: bool = False, threads: int = 1) -> MetricReport:
    """Best-of-n metrics over a window set, weighted by pedestrian count."""
    if not windows:
        raise ValueError("no windows to evaluate")

    def one(item):
        idx, window = item
        a, f = best_of_n(params, config, window, kernel, n=n,
                         seed=window_seed(seed, idx), joint=joint)
        return a, f, window.n_peds

    items = list(enumerate(windows))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(item) for item in items]
    weight = sum(r[2] for r in results)
    return MetricReport(
        ade=sum(r[0] * r[2] for r in results) / weight,
        fde=sum(r[1] * r[2] for r in results) / weight,
        n_windows=len(windows), n_samples=n, seed=seed)


def linear_baseline(window) -> np.ndarray:
    """Least-squares line through the observed steps, extrapolated over
    the horizon. Returns N x pred_len x 2 absolute positions."""
    obs = window.positions_obs
    t_obs = obs.shape[1]
    design = np.column_stack([np.arange(t_obs, dtype=np.float64),
                              np.ones(t_obs)])
    future = np.column_stack([np.arange(t_obs, t_obs + window.pred_len,
                                        dtype=np.float64),
                              np.ones(window.pred_len)])
    out = np.empty((window.n_peds, window.pred_len, 2))
    for i in range(window.n_peds):
        coef, *_ = np.linalg.lstsq(design, obs[i], rcond=None)
        out[i] = future @ coef
    return out


def linear_baseline_report(windows) -> MetricReport:
    if not windows:
        raise ValueError("no windows to evaluate")
    weight = a_total = f_total = 0.0
    for w in windows:
        pred = linear_baseline(w)
        a_total += ade(pred, w.positions_pred) * w.n_peds
        f_total += fde(pred, w.positions_pred) * w.n_peds
        weight += w.n_peds
    return MetricReport(ade=a_total / weight, fde=f_total / weight,
                        n_windows=len(windows), n_samples=1, seed=0)


# ---------------------------------------------------------------------------
# reporting harnesses


SCENE_ORDER = ("eth", "hotel", "univ", "zara1", "zara2")


@dataclass(frozen=True)
class TableReport:
    """Rows of (label, {column: 'ade/fde' or None}) with a fixed column order."""

    columns: tuple
    rows: tuple   # (label, dict) pairs

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("method," + ",".join(self.columns) + "\n")
        for label, cells in self.rows:
            parts = [label]
            for col in self.columns:
                cell = cells.get(col)
                parts.append("absent" if cell is None
                             else f"{cell[0]:.4f}/{cell[1]:.4f}")
            buf.write(",".join(parts) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(12, max(len(r[0]) for r in self.rows) + 2)
        lines = ["".join(["method".ljust(width)] +
                         [c.rjust(14) for c in self.columns])]
        for label, cells in self.rows:
            row = [label.ljust(width)]
            for col in self.columns:
                cell = cells.get(col)
                row.append(("absent" if cell is None
                            else f"{cell[0]:.2f}/{cell[1]:.2f}").rjust(14))
            lines.append("".join(row))
        return "\n".join(lines) + "\n"


def _avg_cell(cells: dict) -> tuple | None:
    vals = [cells[c] for c in cells if cells[c] is not None]
    if len(vals) != len(SCENE_ORDER):
        return None
    return (float(np.mean([v[0] for v in vals])),
            float(np.mean([v[1] for v in vals])))


def benchmark_table(test_windows_by_group: dict, loaded_checkpoints: dict,
                    n: int = 20, seed: int = 0, threads: int = 1) -> TableReport:
    """Leave-one-out grid: per-scene ADE/FDE plus the average column.

    `loaded_checkpoints` maps scene group -> (params, config, kernel);
    missing groups render as "absent". The linear baseline row never
    needs a checkpoint.
    """
    model_cells: dict = {}
    linear_cells: dict = {}
    for group in SCENE_ORDER:
        windows = test_windows_by_group.get(group)
        if not windows:
            model_cells[group] = None
            linear_cells[group] = None
            continue
        entry = loaded_checkpoints.get(group)
        if entry is None:
            model_cells[group] = None
        else:
            params, config, kernel = entry
            rep = evaluate_windows(params, config, windows, kernel, n=n,
                                   seed=seed, threads=threads)
            model_cells[group] = (rep.ade, rep.fde)
        lin = linear_baseline_report(windows)
        linear_cells[group] = (lin.ade, lin.fde)
    model_cells["avg"] = _avg_cell({g: model_cells[g] for g in SCENE_ORDER})
    linear_cells["avg"] = _avg_cell({g: linear_cells[g] for g in SCENE_ORDER})
    return TableReport(columns=SCENE_ORDER + ("avg",),
                       rows=(("model", model_cells), ("linear", linear_cells)))


def _budgeted(train_cfg: TrainConfig, budget_epochs: int) -> TrainConfig:
    if budget_epochs == 0:
        return train_cfg  # caller skips training entirely
    return replace(train_cfg, epochs=budget_epochs,
                   lr_switch_epoch=min(train_cfg.lr_switch_epoch,
                                       budget_epochs - 1))


def ablation_grid(train_windows, test_windows, depths=(1, 3, 5, 7),
                  budget_epochs: int = 0, base_config: ModelConfig = None,
                  train_cfg: TrainConfig = None, kernel: Kernel = Kernel("sim"),
                  n: int = 20, seed: int = 0, threads: int = 1) -> TableReport:
    """Depth sweep over (graph layers x extrapolator layers)."""
    base_config = base_config or ModelConfig()
    train_cfg = train_cfg or TrainConfig(epochs=1, lr_switch_epoch=0, clip_norm=4.0)
    rows = []
    for n_st in depths:
        cells = {}
        for n_tx in depths:
            cfg = replace(base_config, n_stgcnn=n_st, n_txpcnn=n_tx)
            effective = _budgeted(train_cfg, budget_epochs)
            if budget_epochs == 0:
                params = init_params(cfg, effective.seed)
            else:
                params, _ = train(cfg, effective, train_windows, kernel)
            rep = evaluate_windows(params, cfg, test_windows, kernel, n=n,
                                   seed=seed, threads=threads)
            cells[f"txp{n_tx}"] = (rep.ade, rep.fde)
        rows.append((f"stgcnn{n_st}", cells))
    return TableReport(columns=tuple(f"txp{d}" for d in depths), rows=tuple(rows))


def kernel_ablation(train_windows, test_windows, budget_epochs: int = 0,
                    base_config: ModelConfig = None, train_cfg: TrainConfig = None,
                    sigma: float = 1.0, eps: float = 0.2, n: int = 20,
                    seed: int = 0, threads: int = 1) -> TableReport:
    """One model per edge-weight kernel, reported in a single-column table."""
    base_config = base_config or ModelConfig()
    train_cfg = train_cfg or TrainConfig(epochs=1, lr_switch_epoch=0, clip_norm=4.0)
    rows = []
    for kind in ("sim", "l2", "exp", "sim_eps", "ones"):
        kernel = Kernel(kind, sigma=sigma, eps=eps)
        effective = _budgeted(train_cfg, budget_epochs)
        if budget_epochs == 0:
            params = init_params(base_config, effective.seed)
        else:
            params, _ = train(base_config, effective, train_windows, kernel)
        rep = evaluate_windows(params, base_config, test_windows, kernel, n=n,
                               seed=seed, threads=threads)
        rows.append((kind, {"metrics": (rep.ade, rep.fde)}))
    return TableReport(columns=("metrics",), rows=tuple(rows))


def nested_fraction_indices(n_windows: int, fractions, seed: int) -> dict:
    """One seeded permutation; fraction f takes its first ceil(f * n)
    entries, so smaller fractions are strict subsets of larger ones."""
    perm = np.random.default_rng(seed).permutation(n_windows)
    out = {}
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction {f} outside (0, 1]")
        out[f] = tuple(int(i) for i in perm[:math.ceil(f * n_windows)])
    return out


def data_efficiency(train_windows, test_windows,
                    fractions=(0.05, 0.10, 0.20, 0.50), repeats: int = 3,
                    budget_epochs: int = 1, base_config: ModelConfig = None,
                    train_cfg: TrainConfig = None, kernel: Kernel = Kernel("sim"),
                    n: int = 20, seed: int = 0, threads: int = 1) -> str:
    """CSV curve: per (fraction, repeat) metrics plus mean and spread.

    The subset for a fraction is fixed once per seed and reused across
    repeats; repeats differ only in training seed.
    """
    base_config = base_config or ModelConfig()
    train_cfg = train_cfg or TrainConfig(epochs=1, lr_switch_epoch=0, clip_norm=4.0)
    subsets = nested_fraction_indices(len(train_windows), fractions, seed)
    buf = io.StringIO()
    buf.write("fraction,repeat,n_train_windows,ade,fde\n")
    summary = []
    for f in fractions:
        subset = [train_windows[i] for i in subsets[f]]
        ades, fdes = [], []
        for rep_idx in range(repeats):
            cfg = replace(_budgeted(train_cfg, budget_epochs),
                          seed=train_cfg.seed + rep_idx)
            if budget_epochs == 0 or not subset:
                params = init_params(base_config, cfg.seed)
            else:
                params, _ = train(base_config, cfg, subset, kernel)
            rep = evaluate_windows(params, base_config, test_windows, kernel,
                                   n=n, seed=seed, threads=threads)
            ades.append(rep.ade)
            fdes.append(rep.fde)
            buf.write(f"{f},{rep_idx},{len(subset)},{rep.ade:.12g},{rep.fde:.12g}\n")
        summary.append((f, np.mean(ades), np.std(ades), np.mean(fdes), np.std(fdes)))
    for f, ma, sa, mf, sf in summary:
        buf.write(f"{f},mean+-std,,{ma:.12g}+-{sa:.12g},{mf:.12g}+-{sf:.12g}\n")
    return buf.getvalue()


def hardware_id() -> str:
    bits = [platform.machine(), platform.processor() or platform.machine(),
            platform.system(), platform.python_version()]
    return " / ".join(dict.fromkeys(b for b in bits if b))


def inference_bench(config: ModelConfig = None, kernel: Kernel = Kernel("sim"),
                    window_sizes=(2, 8, 32), repeats: int = 1000,
                    warmup: int = 20, seed: int = 0) -> str:
    """Single-window forward timing (graph build included), CSV report."""
    if repeats < 1000:
        raise ValueError("benchmark needs at least 1000 repeats")
    config = config or ModelConfig()
    params = init_params(config, seed)
    rng = np.random.default_rng(seed)
    buf = io.StringIO()
    buf.write(f"# hardware: {hardware_id()}\n")
    buf.write(f"# parameters: {param_count(config)}\n")
    buf.write("n_peds,repeats,mean_seconds,p50_seconds,p95_seconds\n")
    for n_peds in window_sizes:
        feats = rng.standard_normal((n_peds, config.obs_len, 2)) * 0.4
        for _ in range(warmup):
            forward(build_st_graph(feats, kernel), params, config)
        times = np.empty(repeats)
        for i in range(repeats):
            t0 = time.perf_counter()
            forward(build_st_graph(feats, kernel), params, config)
            times[i] = time.perf_counter() - t0
        buf.write(f"{n_peds},{repeats},{times.mean():.6e},"
                  f"{np.percentile(times, 50):.6e},{np.percentile(times, 95):.6e}\n")
    return buf.getvalue()
