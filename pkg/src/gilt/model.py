"""End-to-end episode forward pass: graph in, class probabilities out.

This module wires the stages together: aligned features (optionally through
a trainable projection), structural encoding, item representations, token
assembly, the two-stage transformer, and the prototype readout. Every step
runs on the same autodiff tape, so one backward call reaches all
parameters, projection and encoder affines included.

Training-time stochasticity is a pure function of the episode: the
augmentation rng is reseeded from episode.aug_seed on every call, so the
same episode always sees the same feature/edge dropout masks. That keeps
replays reproducible and finite-difference checks honest even with
dropout active.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import encode, encoder_init, normalize_adjacency
from .episodes import Episode
from .features import AlignedFeatures, AlignSpec, align_features
from .graphs import Corpus, Graph
from .head import episode_loss, predict
from .tokens import build_tokens, item_repr, mean_pool
from .transformer import transformer_forward, transformer_init


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    encoder_layers: int = 4
    transformer_layers: int = 2
    n_heads: int = 4
    ffn_hidden: int = 128
    dropout: float = 0.1
    temperature: float = 10.0
    align_mode: str = "pad"            # "pad" | "learnable-projection"
    intermediate_dim: int = 64
    encoder_variant: str = "linear"    # "linear" | "nonlinear"
    unshared_attention: bool = False
    full_token_prediction: bool = False
    dtype: str = "float64"             # "float32" | "float64"
    seed: int = 0

    def np_dtype(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")
        return np.float32 if self.dtype == "float32" else np.float64

    def align_spec(self) -> AlignSpec:
        return AlignSpec(
            unified_dim=self.d,
            mode=self.align_mode,
            intermediate_dim=self.intermediate_dim,
        )


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    dtype = cfg.np_dtype()
    params = encoder_init(cfg.d, cfg.encoder_layers, cfg.encoder_variant, dtype=dtype)
    params.update(transformer_init(
        cfg.d, cfg.transformer_layers, cfg.n_heads, cfg.ffn_hidden,
        unshared=cfg.unshared_attention, seed=cfg.seed, dtype=dtype,
    ))
    if cfg.align_mode == "learnable-projection":
        rng = np.random.default_rng(cfg.seed + 7919)
        bound = 1.0 / np.sqrt(cfg.intermediate_dim)
        params["proj_w"] = rng.uniform(
            -bound, bound, size=(cfg.intermediate_dim, cfg.d)
        ).astype(dtype)
    return params


def params_to_tensors(arrays: dict[str, np.ndarray],
                      requires_grad: bool = True) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


@dataclass
class PreparedGraph:
    graph: Graph
    adj: object                 # CSR normalized adjacency
    aligned: AlignedFeatures


@dataclass
class GraphBank:
    """Per-corpus cache of prepared inputs and (eval-only) encoder outputs."""

    corpus: Corpus
    cfg: ModelConfig
    _prepared: dict = field(default_factory=dict)
    _encoded: dict = field(default_factory=dict)

    def prepared(self, gi: int) -> PreparedGraph:
        if gi not in self._prepared:
            g = self.corpus.graphs[gi]
            adj = normalize_adjacency(g.node_count, g.edges)
            self._prepared[gi] = PreparedGraph(
                graph=g,
                adj=adj.astype(self.cfg.np_dtype()),
                aligned=align_features(g.features, self.cfg.align_spec()),
            )
        return self._prepared[gi]

    def encoded(self, gi: int, params: dict[str, ad.Tensor]) -> ad.Tensor:
        """Deterministic eval-time encoder output, computed once per graph."""
        if gi not in self._encoded:
            prep = self.prepared(gi)
            with ad.no_grad():
                self._encoded[gi] = _encode_graph(
                    prep, params, self.cfg, train=False, rng=None)
        return self._encoded[gi]

    def clear_encoded(self):
        self._encoded.clear()


def _encode_graph(prep: PreparedGraph, params: dict[str, ad.Tensor],
                  cfg: ModelConfig, train: bool, rng,
                  feat_drop: float = 0.0, edge_drop: float = 0.0) -> ad.Tensor:
    dtype = cfg.np_dtype()
    x = ad.Tensor(prep.aligned.x.astype(dtype, copy=False))
    if train and feat_drop > 0.0:
        x = ad.dropout(x, feat_drop, rng)
    if prep.aligned.needs_projection:
        x = ad.matmul(x, params["proj_w"])
    adj = prep.adj
    if train and edge_drop > 0.0:
        edges = prep.graph.edges
        keep = rng.random(edges.shape[0]) >= edge_drop
        adj = normalize_adjacency(prep.graph.node_count, edges[keep]).astype(dtype)
    return encode(adj, x, params, cfg.encoder_layers, cfg.encoder_variant)


def _item_reprs(bank: GraphBank, episode: Episode, params, cfg, train, rng):
    if episode.level in ("node", "link"):
        prep = bank.prepared(episode.graph_index)
        if train:
            h = _encode_graph(prep, params, cfg, train, rng,
                              episode.feat_drop, episode.edge_drop)
        else:
            h = bank.encoded(episode.graph_index, params)
        sup = item_repr(h, episode.level, episode.support_refs)
        qry = item_repr(h, episode.level, episode.query_refs)
        return sup, qry

    # graph level: one pooled row per referenced graph
    def pooled(gi: int) -> ad.Tensor:
        prep = bank.prepared(gi)
        if train:
            h = _encode_graph(prep, params, cfg, train, rng,
                              episode.feat_drop, episode.edge_drop)
        else:
            h = bank.encoded(gi, params)
        return mean_pool(h)

    sup = ad.concat([pooled(int(gi)) for gi in episode.support_refs], axis=0)
    qry = ad.concat([pooled(int(gi)) for gi in episode.query_refs], axis=0)
    return sup, qry


def episode_tokens(bank: GraphBank, episode: Episode,
                   params: dict[str, ad.Tensor], cfg: ModelConfig,
                   train: bool = False,
                   rng: np.random.Generator | None = None):
    """Support and query token matrices for one episode, pre-transformer."""
    sup, qry = _item_reprs(bank, episode, params, cfg, train, rng)
    return build_tokens(sup, episode.support_labels, qry, episode.n_way)


def episode_forward(bank: GraphBank, episode: Episode,
                    params: dict[str, ad.Tensor], cfg: ModelConfig,
                    train: bool = False) -> ad.Tensor:
    """Class probabilities [Q x n_way] for one episode."""
    rng = np.random.default_rng(episode.aug_seed) if train else None
    t_sup, t_qry = episode_tokens(bank, episode, params, cfg, train, rng)
    s_out, q_out = transformer_forward(
        t_sup, t_qry, params, cfg.transformer_layers, cfg.n_heads,
        dropout=cfg.dropout if train else 0.0, rng=rng,
        unshared=cfg.unshared_attention,
    )
    return predict(s_out, q_out, episode.support_labels, episode.n_way,
                   cfg.d, cfg.temperature, cfg.full_token_prediction)


def episode_probs_and_loss(bank: GraphBank, episode: Episode,
                           params: dict[str, ad.Tensor], cfg: ModelConfig,
                           train: bool = False):
    probs = episode_forward(bank, episode, params, cfg, train=train)
    return probs, episode_loss(probs, episode.query_labels)
