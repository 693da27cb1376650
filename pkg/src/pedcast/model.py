"""Forecasting model: graph-convolution front end, temporal-extrapolation
convolution stack, bivariate Gaussian output head.

Layout conventions: vertex features travel as [T, N, F]; the tensor-core
conv/mix ops want channels first, so layers transpose at their edges.
The extrapolator treats observed time as channels over a (P_hat, N) grid
and convolves only along the embedding axis — pedestrian columns never
mix outside graph aggregation, which keeps every stage permutation
equivariant.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensorcore as tc
from .graph import STGraph


@dataclass(frozen=True)
class ModelConfig:
    n_stgcnn: int = 1
    n_txpcnn: int = 5
    input_feat: int = 2
    embed_feat: int = 5
    output_feat: int = 5
    obs_len: int = 8
    pred_len: int = 12
    kernel_t: int = 3
    feature_mode: str = "displacement"

    def __post_init__(self):
        for name in ("n_stgcnn", "n_txpcnn", "input_feat", "embed_feat",
                     "obs_len", "pred_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.output_feat != 5:
            raise ValueError("output head is a bivariate Gaussian; output_feat must be 5")
        if self.kernel_t % 2 == 0 or self.kernel_t < 1:
            raise ValueError(f"temporal kernel must be odd and positive, got {self.kernel_t}")
        if self.feature_mode not in ("displacement", "absolute"):
            raise ValueError(f"unknown feature mode {self.feature_mode!r}")

    def to_fields(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class ModelParams:
    """Named parameter tensors in a fixed, config-derived order."""

    def __init__(self, tensors: dict):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> tc.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        out = {}
        for name, t in self._tensors.items():
            out[name] = tc.Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return ModelParams(out)


def param_spec(config: ModelConfig):
    """Ordered (name, shape, fan_in) triples; fan_in None means a
    constant-initialized parameter (bias or activation slope)."""
    spec = []
    k = config.kernel_t
    for i in range(config.n_stgcnn):
        f_in = config.input_feat if i == 0 else config.embed_feat
        f_out = config.embed_feat
        pre = f"stgcnn.{i}"
        spec.append((f"{pre}.mix_w", (f_out, f_in), f_in))
        spec.append((f"{pre}.mix_b", (f_out,), None))
        spec.append((f"{pre}.act", (), None))
        spec.append((f"{pre}.tconv_w", (f_out, f_out, k), f_out * k))
        spec.append((f"{pre}.tconv_b", (f_out,), None))
        if f_in != f_out:
            # no residual around the temporal conv; output gets its own slope
            spec.append((f"{pre}.act_out", (), None))
    for i in range(config.n_txpcnn):
        c_in = config.obs_len if i == 0 else config.pred_len
        c_out = config.pred_len
        pre = f"txp.{i}"
        spec.append((f"{pre}.w", (c_out, c_in, k), c_in * k))
        spec.append((f"{pre}.b", (c_out,), None))
        spec.append((f"{pre}.act", (), None))
    spec.append(("head.w", (config.output_feat, config.embed_feat), config.embed_feat))
    spec.append(("head.b", (config.output_feat,), None))
    return spec


def param_count(config: ModelConfig) -> int:
    return int(sum(int(np.prod(shape)) for _, shape, _ in param_spec(config)))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """He-style fan-in scaling for weights (variance 2/fan_in), zero
    biases, activation slopes 0.25. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in param_spec(config):
        if fan_in is not None:
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        elif name.endswith(".act") or name.endswith(".act_out"):
            data = np.full(shape, 0.25)
        else:
            data = np.zeros(shape)
        tensors[name] = tc.Tensor(data, requires_grad=True)
    return ModelParams(tensors)


def stgcnn_layer(v: tc.Tensor, adj: tc.Tensor, params: ModelParams, index: int,
                 config: ModelConfig) -> tc.Tensor:
    """One graph-conv block on [T, N, F_in] -> [T, N, F_out].

    h = prelu(aggregate(adj, mix(v))); equal channel counts get the
    residual h + conv_time(h), otherwise prelu(conv_time(h)).
    """
    pre = f"stgcnn.{index}"
    f_in = config.input_feat if index == 0 else config.embed_feat
    pad = (config.kernel_t - 1) // 2

    x = tc.transpose(v, (2, 0, 1))
    x = tc.pointwise_mix(x, params[f"{pre}.mix_w"], params[f"{pre}.mix_b"])
    x = tc.transpose(x, (1, 2, 0))
    h = tc.prelu(tc.graph_aggregate(adj, x), params[f"{pre}.act"])

    t = tc.transpose(h, (2, 0, 1))
    t = tc.conv_time(t, params[f"{pre}.tconv_w"], params[f"{pre}.tconv_b"], padding=pad)
    t = tc.transpose(t, (1, 2, 0))
    if f_in == config.embed_feat:
        return tc.add(h, t)
    return tc.prelu(t, params[f"{pre}.act_out"])


def txpcnn_stack(embedded: tc.Tensor, params: ModelParams,
                 config: ModelConfig) -> tc.Tensor:
    """Extrapolate [T_o, N, P_hat] to raw output [T_p, N, 5].

    Observed steps become channels over the (P_hat, N) grid; the entry
    layer maps T_o -> T_p channels, later layers are residual
    (out = x + prelu(conv(x))), and a pointwise head maps the embedding
    axis to the 5 Gaussian channels.
    """
    pad = (config.kernel_t - 1) // 2
    x = tc.transpose(embedded, (0, 2, 1))           # [T_o, P_hat, N]
    x = tc.conv_time(x, params["txp.0.w"], params["txp.0.b"], padding=pad)
    x = tc.prelu(x, params["txp.0.act"])
    for i in range(1, config.n_txpcnn):
        pre = f"txp.{i}"
        bump = tc.conv_time(x, params[f"{pre}.w"], params[f"{pre}.b"], padding=pad)
        x = tc.add(x, tc.prelu(bump, params[f"{pre}.act"]))
    x = tc.transpose(x, (1, 0, 2))                  # [P_hat, T_p, N]
    x = tc.pointwise_mix(x, params["head.w"], params["head.b"])
    return tc.transpose(x, (1, 2, 0))               # [T_p, N, 5]


def forward(graph: STGraph, params: ModelParams, config: ModelConfig) -> tc.Tensor:
    """Raw Gaussian-parameter sequence [T_p, N, 5] for one window."""
    if graph.n_steps != config.obs_len:
        raise ValueError(
            f"graph covers {graph.n_steps} steps but config expects {config.obs_len}")
    v = tc.Tensor(graph.vertices)
    adj = tc.Tensor(graph.adj_norm)
    for i in range(config.n_stgcnn):
        v = stgcnn_layer(v, adj, params, i, config)
    return txpcnn_stack(v, params, config)
