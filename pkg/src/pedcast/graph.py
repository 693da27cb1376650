"""Social interaction graphs over per-step pedestrian positions.

Each observation step gets its own weighted adjacency matrix; edge
weights come from a symmetric kernel of the pairwise Euclidean distance.
Normalization follows the symmetric graph-Laplacian convention
D^{-1/2} (A + I) D^{-1/2}, which keeps the spectral radius at or below 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KERNEL_KINDS = ("sim", "l2", "exp", "sim_eps", "ones")


@dataclass(frozen=True)
class Kernel:
    """Edge-weight function of inter-pedestrian distance.

    sim:     1/d, and 0 for coincident pedestrians
    l2:      d itself (distance as weight)
    exp:     exp(-d) / sigma
    sim_eps: 1 / (d + eps)
    ones:    1 for every pair
    """

    kind: str = "sim"
    sigma: float = 1.0
    eps: float = 0.2

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}, expected one of {KERNEL_KINDS}")
        if self.kind == "exp" and self.sigma <= 0.0:
            raise ValueError(f"exp kernel needs sigma > 0, got {self.sigma}")
        if self.kind == "sim_eps" and self.eps <= 0.0:
            raise ValueError(f"sim_eps kernel needs eps > 0, got {self.eps}")

    def weight(self, vi, vj) -> float:
        """Kernel value for one pair of 2-D points."""
        d = float(np.hypot(vi[0] - vj[0], vi[1] - vj[1]))
        return float(self._apply(np.array(d)))

    def _apply(self, d: np.ndarray) -> np.ndarray:
        if self.kind == "sim":
            with np.errstate(divide="ignore"):
                return np.where(d > 0.0, 1.0 / np.where(d > 0.0, d, 1.0), 0.0)
        if self.kind == "l2":
            return d.astype(np.float64)
        if self.kind == "exp":
            return np.exp(-d) / self.sigma
        if self.kind == "sim_eps":
            return 1.0 / (d + self.eps)
        return np.ones_like(d, dtype=np.float64)


@dataclass(frozen=True)
class STGraph:
    """Stacked per-step graphs for one observation window."""

    vertices: np.ndarray   # T x N x 2
    adj_raw: np.ndarray    # T x N x N, zero diagonal, symmetric
    adj_norm: np.ndarray   # T x N x N, symmetric-normalized

    @property
    def n_steps(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_peds(self) -> int:
        return self.vertices.shape[1]


def build_adjacency(positions: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Kernel-weighted adjacency for one step; diagonal forced to zero."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ValueError(f"positions must be N x 2, got {pos.shape}")
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    adj = kernel._apply(dist)
    np.fill_diagonal(adj, 0.0)
    return adj


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """D^{-1/2} (A + I) D^{-1/2} with D from the self-looped row sums.

    Row sums use math.fsum, which is exactly rounded and therefore
    independent of summation order: normalizing a permuted matrix gives
    bit-for-bit the permutation of the normalized original.
    """
    adj = np.asarray(adj, dtype=np.float64)
    n = adj.shape[0]
    if adj.shape != (n, n):
        raise ValueError(f"adjacency must be square, got {adj.shape}")
    if np.any(adj < 0.0):
        raise ValueError("adjacency weights must be non-negative")
    hat = adj + np.eye(n)
    inv_sqrt = np.array([1.0 / math.sqrt(math.fsum(hat[i])) for i in range(n)])
    return hat * inv_sqrt[:, None] * inv_sqrt[None, :]


def build_st_graph(features: np.ndarray, kernel: Kernel) -> STGraph:
    """Per-step graphs from window features shaped N x T x 2.

    Kernel distances are computed on the same coordinates that become
    vertex attributes, so displacement mode weighs relative-motion
    similarity and absolute mode weighs physical proximity.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[2] != 2:
        raise ValueError(f"features must be N x T x 2, got {feats.shape}")
    if feats.shape[0] < 1:
        raise ValueError("need at least one pedestrian")
    vertices = np.transpose(feats, (1, 0, 2)).copy()
    t_steps, n_peds = vertices.shape[0], vertices.shape[1]
    adj_raw = np.empty((t_steps, n_peds, n_peds))
    adj_norm = np.empty_like(adj_raw)
    for t in range(t_steps):
        adj_raw[t] = build_adjacency(vertices[t], kernel)
        adj_norm[t] = normalize_adjacency(adj_raw[t])
    return STGraph(vertices=vertices, adj_raw=adj_raw, adj_norm=adj_norm)


def parse_kernel(kind: str, sigma: float = 1.0, eps: float = 0.2) -> Kernel:
    return Kernel(kind=kind, sigma=sigma, eps=eps)
