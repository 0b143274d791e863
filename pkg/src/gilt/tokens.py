"""Token construction: turning episode items into transformer inputs.

An item representation is read off the encoder output: a node keeps its
row, a candidate link takes the elementwise product of its endpoint rows,
a whole graph mean-pools its rows. Tokens are asymmetric. A support token
concatenates the item with the L2-normalized mean of its class's support
representations (the class prototype); a query token concatenates the item
with zeros, so nothing about its label can leak in. Both are 2d wide.

TokenSet is the frozen, file-backed form: float32 rows plus the episode
header, written in a small self-describing binary format.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

MAGIC = b"GTOK"
FORMAT_VERSION = 1
PROTO_NORM_FLOOR = 1e-12


def item_repr(h: ad.Tensor, level: str, refs: np.ndarray) -> ad.Tensor:
    """Representations for node or link items of one graph."""
    if level == "node":
        return ad.take_rows(h, np.asarray(refs, dtype=np.int64))
    if level == "link":
        refs = np.asarray(refs, dtype=np.int64).reshape(-1, 2)
        left = ad.take_rows(h, refs[:, 0])
        right = ad.take_rows(h, refs[:, 1])
        return ad.mul(left, right)
    raise ValueError(f"item_repr handles node/link; got {level!r}")


def mean_pool(h: ad.Tensor) -> ad.Tensor:
    """Whole-graph representation: mean over node rows, kept 2-D [1 x d]."""
    return ad.mean(h, axis=0, keepdims=True)


def class_prototypes(reprs: ad.Tensor, labels: np.ndarray, n_way: int) -> ad.Tensor:
    """[n_way x d] L2-normalized class means; a zero mean stays a zero row."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = []
    for c in range(n_way):
        idx = np.nonzero(labels == c)[0]
        if idx.size == 0:
            raise ValueError(f"class {c} has no support rows")
        rows.append(ad.mean(ad.take_rows(reprs, idx), axis=0, keepdims=True))
    means = ad.concat(rows, axis=0)
    norms = ad.clamp_min(ad.l2norm_rows(means), PROTO_NORM_FLOOR)
    return ad.div(means, norms)


def build_tokens(support: ad.Tensor, support_labels: np.ndarray,
                 query: ad.Tensor, n_way: int) -> tuple[ad.Tensor, ad.Tensor]:
    """Assemble [S x 2d] support and [Q x 2d] query token matrices."""
    labels = np.asarray(support_labels, dtype=np.int64)
    protos = class_prototypes(support, labels, n_way)
    t_support = ad.concat([support, ad.take_rows(protos, labels)], axis=1)
    zeros = ad.Tensor(np.zeros_like(query.values))
    t_query = ad.concat([query, zeros], axis=1)
    return t_support, t_query


# ---------------------------------------------------------------------------
# on-disk form
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TokenSet:
    """One episode's tokens, frozen to float32 for storage."""

    support: np.ndarray        # [S x 2d] float32
    query: np.ndarray          # [Q x 2d] float32
    support_labels: np.ndarray  # [S] int64
    query_labels: np.ndarray    # [Q] int64, -1 where unknown
    class_ids: np.ndarray       # [n_way] int64
    n_way: int
    k_shot: int
    d: int

    def __post_init__(self):
        if self.support.shape[1] != 2 * self.d or self.query.shape[1] != 2 * self.d:
            raise ValueError("token rows must be 2*d wide")
        if self.support.shape[0] != self.support_labels.shape[0]:
            raise ValueError("support label count mismatch")
        if self.query.shape[0] != self.query_labels.shape[0]:
            raise ValueError("query label count mismatch")


_HEADER = struct.Struct("<4sHIIIII")


def write_tokens(ts: TokenSet, path) -> Path:
    path = Path(path)
    sup = np.ascontiguousarray(ts.support, dtype=np.float32)
    qry = np.ascontiguousarray(ts.query, dtype=np.float32)
    blob = bytearray()
    blob += _HEADER.pack(MAGIC, FORMAT_VERSION, ts.n_way, ts.k_shot,
                         qry.shape[0], ts.d, sup.shape[0])
    blob += np.ascontiguousarray(ts.class_ids, dtype=np.int64).tobytes()
    blob += np.ascontiguousarray(ts.support_labels, dtype=np.int64).tobytes()
    blob += np.ascontiguousarray(ts.query_labels, dtype=np.int64).tobytes()
    blob += sup.tobytes()
    blob += qry.tobytes()
    path.write_bytes(bytes(blob))
    return path


def read_tokens(path) -> TokenSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"token file {path} is truncated")
    magic, version, n_way, k_shot, n_query, d, n_support = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path} is not a token file (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported token format version {version}")
    off = _HEADER.size
    expect = off + 8 * (n_way + n_support + n_query) + 4 * 2 * d * (n_support + n_query)
    if len(raw) != expect:
        raise ValueError(f"token file {path} has {len(raw)} bytes, expected {expect}")

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    class_ids = take(n_way, np.int64)
    sup_labels = take(n_support, np.int64)
    qry_labels = take(n_query, np.int64)
    support = take(n_support * 2 * d, np.float32).reshape(n_support, 2 * d)
    query = take(n_query * 2 * d, np.float32).reshape(n_query, 2 * d)
    return TokenSet(
        support=support, query=query,
        support_labels=sup_labels, query_labels=qry_labels,
        class_ids=class_ids, n_way=int(n_way), k_shot=int(k_shot), d=int(d),
    )


def freeze_tokens(t_support: ad.Tensor, t_query: ad.Tensor,
                  support_labels, query_labels, class_ids,
                  n_way: int, k_shot: int, d: int) -> TokenSet:
    """Snapshot live token Tensors into the storable float32 form."""
    q = np.asarray(query_labels, dtype=np.int64)
    return TokenSet(
        support=t_support.values.astype(np.float32),
        query=t_query.values.astype(np.float32),
        support_labels=np.asarray(support_labels, dtype=np.int64),
        query_labels=q if q.size else np.full(t_query.values.shape[0], -1, np.int64),
        class_ids=np.asarray(class_ids, dtype=np.int64),
        n_way=n_way, k_shot=k_shot, d=d,
    )
