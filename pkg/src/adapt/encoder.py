"""Polyline subgraphs and the attention stack modeling agent/lane interactions.

Scenes are batched as padded blocks: agents ``(S, N, d)`` and lanes ``(S, M, d)``
with boolean validity masks, so attention never crosses scene boundaries.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import Tensor

MASK_FILL = -1e9
BLOCKS = ("AL", "LL", "LA", "AA")


class PolylineSubgraph(Module):
    """Node MLPs alternating with max-pool context concatenation, pooled to one vector."""

    def __init__(self, n_in: int, d: int, layers: int, rng: np.random.Generator, dtype=None):
        half = d // 2
        self.layers = [MLP(n_in if i == 0 else d, half, half, rng, dtype=dtype) for i in range(layers)]

    def __call__(self, nodes: Tensor, valid: np.ndarray) -> Tensor:
        """``nodes`` is ``(P, L, F)`` with ``valid`` ``(P, L)``; returns ``(P, d)``."""
        mask = valid[..., None]
        v = nodes
        for mlp in self.layers:
            h = mlp(v)
            pooled = T.max_pool(h, axis=1, valid=mask)
            v = T.concat([h, T.expand(T.expand_dims(pooled, 1), h.shape)], axis=-1)
        return T.max_pool(v, axis=1, valid=mask)


def polyline_subgraph(subgraph: PolylineSubgraph, nodes) -> Tensor:
    """Encode one polyline given its ``(n, F)`` node features."""
    nodes = T.as_tensor(nodes, dtype=subgraph.layers[0].fc1.weight.dtype)
    if nodes.shape[0] < 1:
        raise ValueError("polyline has no nodes")
    out = subgraph(T.expand_dims(nodes, 0), np.ones((1, nodes.shape[0]), dtype=bool))
    return T.reshape(out, (out.shape[-1],))


class MHAB(Module):
    """Multi-head attention block: ``norm(f + FFN(f))`` with ``f = norm(q + MHA(q, kv))``."""

    def __init__(self, d: int, d_ff: int, heads: int, rng: np.random.Generator,
                 dropout: float = 0.0, dtype=None):
        if d % heads:
            raise ValueError(f"heads={heads} must divide d={d}")
        self.heads = heads
        self.wq = Linear(d, d, rng, bias=False, dtype=dtype)
        self.wk = Linear(d, d, rng, bias=False, dtype=dtype)
        self.wv = Linear(d, d, rng, bias=False, dtype=dtype)
        self.wo = Linear(d, d, rng, bias=False, dtype=dtype)
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.ff1 = Linear(d, d_ff, rng, dtype=dtype)
        self.ff2 = Linear(d_ff, d, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.dropout = dropout
        self.rng = rng

    def attention(self, fq: Tensor, fkv: Tensor, key_valid: np.ndarray | None = None,
                  capture: list | None = None) -> Tensor:
        """Batched ``(S, Nq, d) x (S, Nk, d) -> (S, Nq, d)`` multi-head attention."""
        S, nq, d = fq.shape
        nk = fkv.shape[1]
        h = self.heads
        dh = d // h
        q = T.transpose(T.reshape(self.wq(fq), (S, nq, h, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(self.wk(fkv), (S, nk, h, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(self.wv(fkv), (S, nk, h, dh)), (0, 2, 1, 3))
        scores = T.matmul(q, k) * (1.0 / math.sqrt(dh))
        if key_valid is not None:
            fill = np.where(key_valid, 0.0, MASK_FILL)[:, None, None, :].astype(fq.dtype)
            scores = scores + fill
        probs = T.softmax(scores, axis=-1)
        if capture is not None:
            capture.append(probs.data.copy())
        probs = T.dropout(probs, self.dropout, self.rng, self.training)
        out = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (S, nq, d))
        return self.wo(out)

    def __call__(self, fq: Tensor, fkv: Tensor, key_valid: np.ndarray | None = None,
                 capture: list | None = None) -> Tensor:
        if fq.shape[-1] != fkv.shape[-1]:
            raise ValueError(f"feature widths differ: {fq.shape[-1]} vs {fkv.shape[-1]}")
        squeeze = fq.ndim == 2
        if squeeze:
            fq, fkv = T.expand_dims(fq, 0), T.expand_dims(fkv, 0)
            key_valid = None if key_valid is None else np.asarray(key_valid)[None]
        ft = self.norm1(fq + self.attention(fq, fkv, key_valid, capture))
        out = self.norm2(ft + self.ff2(T.relu(self.ff1(ft))))
        if key_valid is not None and not key_valid.any(axis=-1).all():
            # scenes without any key keep their query features unchanged
            has_key = key_valid.any(axis=-1)[:, None, None]
            out = T.where(has_key, out, fq)
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        return out


def mhab(fq: Tensor, fkv: Tensor, block: MHAB, capture: list | None = None) -> Tensor:
    """Apply one attention block to unbatched ``(Nq, d)`` / ``(Nk, d)`` features."""
    return block(fq, fkv, None, capture)


class InteractionStack(Module):
    """Four directed attention updates (AL, LL, LA, AA) repeated ``layers`` times.

    ``X``-to-``Y`` updates ``Y`` from ``X``: AL lets lanes attend to agents, LA lets
    agents attend to lanes. With ``iterative=True`` every pass runs all four
    relation types once; otherwise each relation type runs ``layers`` times in
    sequence before the next one starts.
    """

    def __init__(self, d: int, d_ff: int, heads: int, layers: int, rng: np.random.Generator,
                 dropout: float = 0.0, iterative: bool = True, dtype=None):
        self.iterative = iterative
        self.layers = layers
        self.blocks = {name: [MHAB(d, d_ff, heads, rng, dropout, dtype) for _ in range(layers)] for name in BLOCKS}
        # keep a flat, ordered view for parameter discovery
        self.block_list = [self.blocks[name][i] for i in range(layers) for name in BLOCKS]

    def schedule(self) -> list[tuple[int, str]]:
        if self.iterative:
            return [(i, name) for i in range(self.layers) for name in BLOCKS]
        return [(i, name) for name in BLOCKS for i in range(self.layers)]

    def __call__(self, agents: Tensor, lanes: Tensor | None, agent_valid: np.ndarray,
                 lane_valid: np.ndarray | None, capture: list | None = None):
        """Update ``(S, N, d)`` agent and ``(S, M, d)`` lane features; lanes may be ``None``."""
        has_lanes = lanes is not None and lanes.shape[1] > 0
        for i, name in self.schedule():
            if name != "AA" and not has_lanes:
                continue
            block = self.blocks[name][i]
            probs: list | None = [] if capture is not None else None
            if name == "AL":
                lanes = block(lanes, agents, agent_valid, probs)
            elif name == "LL":
                lanes = block(lanes, lanes, lane_valid, probs)
            elif name == "LA":
                agents = block(agents, lanes, lane_valid, probs)
            else:
                agents = block(agents, agents, agent_valid, probs)
            if capture is not None:
                capture.append({"iteration": i, "block": name, "probabilities": probs[0]})
        return agents, lanes

    def named_parameters(self, prefix: str = ""):
        for i, block in enumerate(self.block_list):
            name = BLOCKS[i % 4]
            yield from block.named_parameters(f"{prefix}{name}{i // 4}.")

    def modules(self):
        yield self
        for block in self.block_list:
            yield from block.modules()


def interaction_stack(agent_feats: Tensor, lane_feats: Tensor | None, stack: InteractionStack,
                      capture: list | None = None):
    """Unbatched convenience wrapper over :class:`InteractionStack` for one scene."""
    a = T.expand_dims(agent_feats, 0)
    a_valid = np.ones((1, agent_feats.shape[0]), dtype=bool)
    if lane_feats is None or lane_feats.shape[0] == 0:
        l, l_valid = None, None
    else:
        l = T.expand_dims(lane_feats, 0)
        l_valid = np.ones((1, lane_feats.shape[0]), dtype=bool)
    a, l = stack(a, l, a_valid, l_valid, capture)
    a = T.reshape(a, a.shape[1:])
    return a, (T.reshape(l, l.shape[1:]) if l is not None else lane_feats)


def capture_records(capture: list[dict], scene: int = 0) -> list[dict]:
    """Flatten captured attention maps into ``{iteration, block, head, query_index, probabilities}`` rows."""
    rows = []
    for entry in capture:
        probs = entry["probabilities"][scene]
        for head in range(probs.shape[0]):
            for qi in range(probs.shape[1]):
                rows.append({
                    "iteration": entry["iteration"],
                    "block": entry["block"],
                    "head": head,
                    "query_index": qi,
                    "probabilities": probs[head, qi].tolist(),
                })
    return rows
