"""SVG rendering of predicted trajectory distributions.

Plots are plain hand-assembled XML so the package never touches a
display stack: observed tracks as solid polylines, ground-truth futures
dashed, sampled trajectories as dot scatter, and per-step 1-sigma /
2-sigma covariance ellipses. One <g id="ped-K"> group per pedestrian,
fixed-precision coordinates, so identical inputs give identical bytes.
"""

from __future__ import annotations

import math

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#17becf", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22")


class PredictionCSVError(ValueError):
    """Prediction CSV malformed or missing required blocks."""


def ellipse_axes(sigma_x: float, sigma_y: float, rho: float) -> tuple:
    """Principal half-axes and orientation (degrees) of the covariance
    ellipse for a bivariate Gaussian."""
    cov_xy = rho * sigma_x * sigma_y
    cov = np.array([[sigma_x ** 2, cov_xy], [cov_xy, sigma_y ** 2]])
    vals, vecs = np.linalg.eigh(cov)        # ascending eigenvalues
    vals = np.maximum(vals, 0.0)
    major = math.sqrt(vals[1])
    minor = math.sqrt(vals[0])
    angle = math.degrees(math.atan2(vecs[1, 1], vecs[0, 1]))
    return major, minor, angle


class _View:
    """World-to-pixel mapping with equal scales and a flipped y axis."""

    def __init__(self, points: np.ndarray, size: int = 640, margin: int = 40):
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
        self.size = size
        self.scale = (size - 2 * margin) / span
        # center the data in the frame on both axes
        self.off_x = margin + 0.5 * ((size - 2 * margin) - (hi[0] - lo[0]) * self.scale)
        self.off_y = margin + 0.5 * ((size - 2 * margin) - (hi[1] - lo[1]) * self.scale)
        self.lo = lo

    def x(self, wx: float) -> float:
        return self.off_x + (wx - self.lo[0]) * self.scale

    def y(self, wy: float) -> float:
        return self.size - (self.off_y + (wy - self.lo[1]) * self.scale)

    def pt(self, p) -> str:
        return f"{self.x(p[0]):.2f},{self.y(p[1]):.2f}"


def _polyline(view: _View, pts, color: str, width: float,
              dashed: bool = False) -> str:
    coords = " ".join(view.pt(p) for p in pts)
    dash = ' stroke-dasharray="6,4"' if dashed else ""
    return (f'<polyline points="{coords}" fill="none" stroke="{color}"'
            f' stroke-width="{width:.1f}"{dash}/>')


def _ellipse(view: _View, center, sigma_x, sigma_y, rho, k: float,
             color: str, opacity: float) -> str:
    major, minor, angle = ellipse_axes(sigma_x, sigma_y, rho)
    cx, cy = view.x(center[0]), view.y(center[1])
    rx = max(k * major * view.scale, 0.5)
    ry = max(k * minor * view.scale, 0.5)
    # y flip mirrors the rotation sense
    return (f'<ellipse cx="{cx:.2f}" cy="{cy:.2f}" rx="{rx:.2f}" ry="{ry:.2f}"'
            f' transform="rotate({-angle:.2f} {cx:.2f} {cy:.2f})" fill="none"'
            f' stroke="{color}" stroke-width="1.0" stroke-opacity="{opacity:.2f}"/>')


def scene_svg(observed: np.ndarray, truth: np.ndarray, mean_path: np.ndarray,
              sigma: np.ndarray, rho: np.ndarray, samples: np.ndarray | None,
              ped_ids=None, size: int = 640, title: str = "") -> str:
    """Render one window.

    observed: N x T_o x 2, truth: N x T_p x 2 (both absolute), mean_path:
    N x T_p x 2, sigma: N x T_p x 2, rho: N x T_p, samples: S x N x T_p x 2
    or None. Pedestrian order defines z-order and palette assignment.
    """
    observed = np.asarray(observed, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mean_path = np.asarray(mean_path, dtype=np.float64)
    n_peds = observed.shape[0]
    if ped_ids is None:
        ped_ids = tuple(range(1, n_peds + 1))
    cloud = [observed.reshape(-1, 2), truth.reshape(-1, 2),
             mean_path.reshape(-1, 2)]
    if samples is not None:
        samples = np.asarray(samples, dtype=np.float64)
        cloud.append(samples.reshape(-1, 2))
    view = _View(np.concatenate(cloud, axis=0), size=size)

    parts = ['<?xml version="1.0" encoding="UTF-8"?>',
             f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}"'
             f' height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        parts.append(f'<text x="12" y="24" font-family="monospace"'
                     f' font-size="14">{title}</text>')
    for i in range(n_peds):
        color = PALETTE[i % len(PALETTE)]
        group = [f'<g id="ped-{ped_ids[i]}">']
        group.append(_polyline(view, observed[i], color, 2.0))
        group.append(_polyline(view, np.vstack([observed[i, -1:], truth[i]]),
                               color, 1.5, dashed=True))
        group.append(_polyline(view, np.vstack([observed[i, -1:], mean_path[i]]),
                               color, 1.0))
        for t in range(mean_path.shape[1]):
            for k, opacity in ((1.0, 0.55), (2.0, 0.25)):
                group.append(_ellipse(view, mean_path[i, t], sigma[i, t, 0],
                                      sigma[i, t, 1], rho[i, t], k, color,
                                      opacity))
        if samples is not None:
            for s in range(samples.shape[0]):
                for t in range(samples.shape[2]):
                    p = samples[s, i, t]
                    group.append(f'<circle cx="{view.x(p[0]):.2f}"'
                                 f' cy="{view.y(p[1]):.2f}" r="1.5"'
                                 f' fill="{color}" fill-opacity="0.35"/>')
        group.append("</g>")
        parts.append("\n".join(group))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# prediction CSV format (written by the predict command, read back by plot)

PARAM_HEADER = "t,ped,mu_x,mu_y,sigma_x,sigma_y,rho,abs_mu_x,abs_mu_y"
SAMPLE_HEADER = "sample,t,ped,x,y"


def prediction_csv(meta: dict, seq, samples: np.ndarray) -> str:
    """Parameter rows for every (t, ped) followed by a `# samples` block
    of absolute sampled trajectories."""
    from .gaussian import params_to_csv

    lines = [f"# {key} {meta[key]}" for key in sorted(meta)]
    lines.append(params_to_csv(seq).rstrip("\n"))
    lines.append("# samples")
    lines.append(SAMPLE_HEADER)
    n_samples, n_peds, pred_len, _ = samples.shape
    for s in range(n_samples):
        for t in range(pred_len):
            for ped in range(n_peds):
                x, y = samples[s, ped, t]
                lines.append(f"{s},{t},{ped},{x:.12g},{y:.12g}")
    return "\n".join(lines) + "\n"


def parse_prediction_csv(text: str) -> tuple:
    """-> (meta dict, param rows as structured arrays, samples S x N x T x 2).

    Raises PredictionCSVError on any structural problem.
    """
    meta = {}
    param_rows = []
    sample_rows = []
    section = "params"
    saw_param_header = saw_sample_header = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "# samples":
            section = "samples"
            continue
        if line.startswith("#"):
            bits = line[1:].strip().split(None, 1)
            if len(bits) == 2:
                meta[bits[0]] = bits[1]
            continue
        if line == PARAM_HEADER:
            saw_param_header = True
            continue
        if line == SAMPLE_HEADER:
            saw_sample_header = True
            continue
        try:
            values = [float(v) for v in line.split(",")]
        except ValueError as exc:
            raise PredictionCSVError(f"line {lineno}: {exc}") from None
        if section == "params":
            if len(values) != 9:
                raise PredictionCSVError(
                    f"line {lineno}: expected 9 parameter fields, got {len(values)}")
            param_rows.append(values)
        else:
            if len(values) != 5:
                raise PredictionCSVError(
                    f"line {lineno}: expected 5 sample fields, got {len(values)}")
            sample_rows.append(values)
    if not saw_param_header or not param_rows:
        raise PredictionCSVError("missing parameter block")
    if not saw_sample_header:
        raise PredictionCSVError("missing samples block")
    params = np.array(param_rows)
    t_vals = np.unique(params[:, 0]).size
    n_peds = np.unique(params[:, 1]).size
    if params.shape[0] != t_vals * n_peds:
        raise PredictionCSVError("parameter block is not a full (t, ped) grid")
    if (params[:, 4] <= 0).any() or (params[:, 5] <= 0).any():
        raise PredictionCSVError("non-positive sigma in parameter block")
    samples = None
    if sample_rows:
        arr = np.array(sample_rows)
        n_s = int(arr[:, 0].max()) + 1
        if arr.shape[0] != n_s * t_vals * n_peds:
            raise PredictionCSVError("sample block is not a full grid")
        samples = np.zeros((n_s, n_peds, t_vals, 2))
        for s, t, ped, x, y in arr:
            samples[int(s), int(ped), int(t)] = (x, y)
    return meta, params, samples
