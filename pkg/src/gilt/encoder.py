"""Structural encoder: symmetric-normalized propagation with LayerNorm.

The encoder is deliberately weight-light. Each layer multiplies by the
self-loop-augmented, symmetrically normalized adjacency and re-normalizes
rows with LayerNorm; the only learnable pieces are the per-layer affine
(gamma, beta) pairs. There is no nonlinearity and no per-layer weight
matrix in the default variant, so representations stay in the span of the
propagated inputs and depth controls the receptive field alone.

A "nonlinear" variant (identity-initialized square weight plus ReLU ahead
of the LayerNorm) exists for ablation studies.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad

VARIANTS = ("linear", "nonlinear")


def normalize_adjacency(node_count: int, edges: np.ndarray) -> sp.csr_matrix:
    """D^{-1/2} (A + I) D^{-1/2} as CSR; isolated nodes keep a unit self-loop."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    loops = np.arange(node_count, dtype=np.int64)
    rows = np.concatenate([edges[:, 0], edges[:, 1], loops])
    cols = np.concatenate([edges[:, 1], edges[:, 0], loops])
    a = sp.coo_matrix(
        (np.ones(rows.shape[0]), (rows, cols)),
        shape=(node_count, node_count),
    ).tocsr()
    # degree includes the self-loop, so it is always >= 1
    deg = np.asarray(a.sum(axis=1)).ravel()
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    return (d_inv_sqrt @ a @ d_inv_sqrt).tocsr()


def encoder_init(d: int, n_layers: int, variant: str = "linear",
                 dtype=np.float64) -> dict[str, np.ndarray]:
    """Fresh encoder parameters as named arrays (affines, plus W for nonlinear)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown encoder variant {variant!r}")
    params: dict[str, np.ndarray] = {}
    for i in range(n_layers):
        params[f"enc_ln{i}_gamma"] = np.ones(d, dtype=dtype)
        params[f"enc_ln{i}_beta"] = np.zeros(d, dtype=dtype)
        if variant == "nonlinear":
            params[f"enc_w{i}"] = np.eye(d, dtype=dtype)
    return params


def encode(adj: sp.spmatrix, x, params: dict[str, ad.Tensor],
           n_layers: int, variant: str = "linear") -> ad.Tensor:
    """Run the propagation stack; n_layers=0 returns the input unchanged."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown encoder variant {variant!r}")
    h = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x))
    for i in range(n_layers):
        h = ad.const_matmul(adj, h)
        if variant == "nonlinear":
            h = ad.relu(ad.matmul(h, params[f"enc_w{i}"]))
        h = ad.layernorm(h)
        h = ad.add(ad.mul(h, params[f"enc_ln{i}_gamma"]), params[f"enc_ln{i}_beta"])
    return h
