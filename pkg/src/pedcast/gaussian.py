"""Bivariate Gaussian output head: parameters, likelihood, sampling.

The network emits 5 raw channels per (step, pedestrian):
(mu_x, mu_y, log sigma_x, log sigma_y, pre-tanh rho). Exponentiating the
log-sigmas keeps scales positive and tanh bounds the correlation; rho is
additionally clamped to |rho| <= 1 - 1e-6 and 1 - rho^2 floored at 1e-12
inside the likelihood so the quadratic form stays finite.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc

LOG_2PI = float(np.log(2.0 * np.pi))
RHO_BOUND = 1.0 - 1e-6
ONE_MINUS_RHO2_FLOOR = 1e-12


@dataclass(frozen=True)
class BiGauss:
    """A single 2-D Gaussian in (x, y)."""

    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    rho: float


@dataclass
class BiGaussSeq:
    """Per-(step, pedestrian) Gaussians for one window's prediction.

    `origin` holds each pedestrian's last observed absolute position; in
    displacement space samples and means are cumulatively summed from it.
    `raw` keeps the live network output tensor when the sequence came out
    of a forward pass, so the likelihood can backpropagate.
    """

    mu: np.ndarray        # T x N x 2
    sigma: np.ndarray     # T x N x 2
    rho: np.ndarray       # T x N
    origin: np.ndarray | None = None    # N x 2
    space: str = "displacement"
    raw: tc.Tensor | None = None

    @property
    def pred_len(self) -> int:
        return self.mu.shape[0]

    @property
    def n_peds(self) -> int:
        return self.mu.shape[1]

    def single(self, t: int, n: int) -> BiGauss:
        return BiGauss(float(self.mu[t, n, 0]), float(self.mu[t, n, 1]),
                       float(self.sigma[t, n, 0]), float(self.sigma[t, n, 1]),
                       float(self.rho[t, n]))

    def mean_positions(self) -> np.ndarray:
        """Most-likely track per pedestrian, N x T x 2 absolute coordinates."""
        mu = np.transpose(self.mu, (1, 0, 2))
        if self.space == "absolute":
            return mu.copy()
        if self.origin is None:
            raise ValueError("displacement-space sequence needs an origin")
        return self.origin[:, None, :] + np.cumsum(mu, axis=1)


def raw_to_params(raw, origin: np.ndarray | None = None,
                  space: str = "displacement") -> BiGaussSeq:
    """Interpret raw network output (T x N x 5) as Gaussian parameters."""
    raw_tensor = raw if isinstance(raw, tc.Tensor) else None
    arr = raw.data if isinstance(raw, tc.Tensor) else np.asarray(raw, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 5:
        raise ValueError(f"raw output must be T x N x 5, got {arr.shape}")
    mu = arr[..., 0:2].copy()
    with np.errstate(over="ignore"):     # autodiff guards own overflow reporting
        sigma = np.exp(arr[..., 2:4])
    rho = np.clip(np.tanh(arr[..., 4]), -RHO_BOUND, RHO_BOUND)
    return BiGaussSeq(mu=mu, sigma=sigma, rho=rho, origin=origin, space=space,
                      raw=raw_tensor)


def _nll_core(mu, log_sigma, rho, target) -> tc.Tensor:
    """Summed negative log density over all (t, n); all args Tensors
    except `target`, a constant array T x N x 2."""
    target = tc.Tensor(np.asarray(target, dtype=np.float64))
    rho = tc.clip(rho, -RHO_BOUND, RHO_BOUND)
    diff = tc.sub(target, mu)
    inv_sigma = tc.exp(-log_sigma)
    z = tc.mul(diff, inv_sigma)                      # (x - mu) / sigma
    zx = tc.slice_last(z, 0, 1)
    zy = tc.slice_last(z, 1, 2)
    rho_e = tc.reshape(rho, rho.shape + (1,))
    one_minus = tc.clip(tc.sub(1.0, tc.mul(rho_e, rho_e)),
                        lo=ONE_MINUS_RHO2_FLOOR)
    quad = tc.div(
        tc.sub(tc.add(tc.mul(zx, zx), tc.mul(zy, zy)),
               tc.mul(tc.mul(rho_e, 2.0), tc.mul(zx, zy))),
        one_minus)
    log_sig_sum = tc.tensor_sum(log_sigma)
    per_pair = tc.add(tc.mul(tc.log(one_minus), 0.5), tc.mul(quad, 0.5))
    count = mu.shape[0] * mu.shape[1]
    return tc.add(tc.add(tc.tensor_sum(per_pair), log_sig_sum), LOG_2PI * count)


def nll(seq: BiGaussSeq, target: np.ndarray, reduce: str = "mean_peds") -> tc.Tensor:
    """Negative log likelihood of `target` (T x N x 2) under `seq`.

    Summed over steps and pedestrians, then divided by the pedestrian
    count when reduce == "mean_peds" (the default); reduce == "sum"
    leaves the raw sum. Differentiable when seq carries its raw tensor.
    """
    if reduce not in ("mean_peds", "sum"):
        raise ValueError(f"unknown reduce mode {reduce!r}")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != self_shape(seq):
        raise ValueError(
            f"target shape {target.shape} does not match parameters {self_shape(seq)}")
    if seq.raw is not None:
        mu = tc.slice_last(seq.raw, 0, 2)
        log_sigma = tc.slice_last(seq.raw, 2, 4)
        rho = tc.reshape(tc.slice_last(seq.raw, 4, 5), seq.raw.shape[:2])
        total = _nll_core(mu, log_sigma, tc.tanh(rho), target)
    else:
        total = _nll_core(tc.Tensor(seq.mu), tc.log(tc.Tensor(seq.sigma)),
                          tc.Tensor(seq.rho), target)
    if reduce == "mean_peds":
        total = tc.mul(total, 1.0 / seq.n_peds)
    return total


def self_shape(seq: BiGaussSeq) -> tuple:
    return seq.mu.shape


def sample(seq: BiGaussSeq, seed: int, count: int = 1) -> np.ndarray:
    """Draw `count` trajectories, returned as count x N x T x 2 absolute
    coordinates.

    Draws use the lower-triangular square root of each covariance, one
    sample index at a time, so the first k samples are identical for any
    requested count >= k (prefix stability for best-of-N sweeps).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    t_len, n_peds = seq.pred_len, seq.n_peds
    sx, sy = seq.sigma[..., 0], seq.sigma[..., 1]
    tail = sy * np.sqrt(np.maximum(1.0 - seq.rho ** 2, 0.0))
    out = np.empty((count, n_peds, t_len, 2))
    for i in range(count):
        z = rng.standard_normal((t_len, n_peds, 2))
        dx = seq.mu[..., 0] + sx * z[..., 0]
        dy = seq.mu[..., 1] + seq.rho * sy * z[..., 0] + tail * z[..., 1]
        steps = np.stack([dx, dy], axis=-1).transpose(1, 0, 2)   # N x T x 2
        if seq.space == "absolute":
            out[i] = steps
        else:
            if seq.origin is None:
                raise ValueError("displacement-space sequence needs an origin")
            out[i] = seq.origin[:, None, :] + np.cumsum(steps, axis=1)
    return out


def params_to_csv(seq: BiGaussSeq) -> str:
    """Distribution parameters as CSV, one row per (step, pedestrian)."""
    buf = io.StringIO()
    buf.write("t,ped,mu_x,mu_y,sigma_x,sigma_y,rho,abs_mu_x,abs_mu_y\n")
    mean_abs = seq.mean_positions()
    for t in range(seq.pred_len):
        for n in range(seq.n_peds):
            g = seq.single(t, n)
            buf.write(
                f"{t},{n},{g.mu_x:.12g},{g.mu_y:.12g},{g.sigma_x:.12g},"
                f"{g.sigma_y:.12g},{g.rho:.12g},"
                f"{mean_abs[n, t, 0]:.12g},{mean_abs[n, t, 1]:.12g}\n")
    return buf.getvalue()
