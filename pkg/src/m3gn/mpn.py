"""Encode-process-decode message passing network.

Each of the ``steps`` rounds updates every directed edge from its sender,
receiver and own embedding, then every node from its embedding and the mean
of its incoming updated edges.  Both updates are residual and use their own
single-hidden-layer MLP (parameters are not shared across rounds).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .meshgraph import GraphSample


@dataclass(frozen=True)
class MPNConfig:
    steps: int = 5
    latent: int = 64
    decoder_hidden: int = 64
    aggregation: str = "mean"
    ordered: bool = False  # canonical-order reductions (bit-exact permutation tests)

    def __post_init__(self):
        if self.steps < 1 or self.latent < 1:
            raise ConfigError("MPN needs steps >= 1 and latent >= 1")
        if self.aggregation not in ("mean", "sum", "max"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")


def respects_order(method):
    """Run a model method under canonical-order numerics when ``self.cfg.ordered``."""

    @functools.wraps(method)
    def wrapped(self, *args, **kwargs):
        with nx.canonical_order(self.cfg.ordered):
            return method(self, *args, **kwargs)

    return wrapped


def init_mpn(
    store: nx.ParamStore,
    prefix: str,
    node_in: int,
    edge_in: int,
    out_dim: int,
    cfg: MPNConfig,
    rng: np.random.Generator,
    out_scale: float = 1.0,
) -> None:
    L = cfg.latent
    nx.init_mlp(store, f"{prefix}.enc_node", [node_in, L, L], rng)
    nx.init_mlp(store, f"{prefix}.enc_edge", [edge_in, L, L], rng)
    for m in range(cfg.steps):
        # first edge layer split by input block: [sender | receiver | edge]
        bound = 1.0 / np.sqrt(3 * L)
        for part in ("ws", "wr", "we"):
            store.add(f"{prefix}.edge{m}.l0.{part}", rng.uniform(-bound, bound, size=(L, L)))
        store.add(f"{prefix}.edge{m}.l0.b", np.zeros(L))
        nx.init_linear(store, f"{prefix}.edge{m}.l1", L, L, rng)
        bound = 1.0 / np.sqrt(2 * L)
        for part in ("wh", "wa"):
            store.add(f"{prefix}.node{m}.l0.{part}", rng.uniform(-bound, bound, size=(L, L)))
        store.add(f"{prefix}.node{m}.l0.b", np.zeros(L))
        nx.init_linear(store, f"{prefix}.node{m}.l1", L, L, rng)
    nx.init_mlp(store, f"{prefix}.dec", [L, cfg.decoder_hidden, out_dim], rng, last_scale=out_scale)


def _input_width(store: nx.ParamStore, prefix: str, part: str) -> int:
    return store[f"{prefix}.enc_{part}.l0.w"].shape[0]


def run(store: nx.ParamStore, prefix: str, sample: GraphSample, cfg: MPNConfig) -> nx.Tensor:
    """Node embeddings after ``cfg.steps`` rounds of message passing."""
    dt = store.dtype
    if sample.node_features.shape[1] != _input_width(store, prefix, "node"):
        raise ConfigError(
            f"{prefix}: node feature width {sample.node_features.shape[1]} != {_input_width(store, prefix, 'node')}"
        )
    if sample.edge_features.shape[1] != _input_width(store, prefix, "edge"):
        raise ConfigError(
            f"{prefix}: edge feature width {sample.edge_features.shape[1]} != {_input_width(store, prefix, 'edge')}"
        )
    return run_tensors(
        store, prefix, nx.Tensor(sample.node_features.astype(dt)), nx.Tensor(sample.edge_features.astype(dt)),
        sample.senders, sample.receivers, cfg,
    )


def run_tensors(store, prefix, node_x: nx.Tensor, edge_x: nx.Tensor, senders, receivers, cfg: MPNConfig) -> nx.Tensor:
    with nx.canonical_order(cfg.ordered):
        return _run(store, prefix, node_x, edge_x, senders, receivers, cfg)


def _run(store, prefix, node_x, edge_x, senders, receivers, cfg):
    n = node_x.shape[0]
    h = nx.mlp_forward(store, f"{prefix}.enc_node", node_x)
    e = nx.mlp_forward(store, f"{prefix}.enc_edge", edge_x)
    for m in range(cfg.steps):
        p = f"{prefix}.edge{m}"
        hs = nx.matmul(h, store[f"{p}.l0.ws"])
        hr = nx.matmul(h, store[f"{p}.l0.wr"])
        pre = nx.gather_rows(hs, senders) + nx.gather_rows(hr, receivers) + nx.matmul(e, store[f"{p}.l0.we"]) + store[f"{p}.l0.b"]
        e = e + nx.linear(store, f"{p}.l1", nx.leaky_relu(pre))

        p = f"{prefix}.node{m}"
        agg = nx.segment_reduce(e, receivers, n, cfg.aggregation, ordered=cfg.ordered)
        pre = nx.matmul(h, store[f"{p}.l0.wh"]) + nx.matmul(agg, store[f"{p}.l0.wa"]) + store[f"{p}.l0.b"]
        h = h + nx.linear(store, f"{p}.l1", nx.leaky_relu(pre))
    return h


def decode(store: nx.ParamStore, prefix: str, h: nx.Tensor) -> nx.Tensor:
    """Per-node output head (linear final layer); canonical order follows the caller."""
    return nx.mlp_forward(store, f"{prefix}.dec", h)
