"""Endpoint-conditioned trajectory decoding.

The pipeline per agent and mode: propose an endpoint, refine it with an
offset, interpolate the path towards it, and score it. Refinement, path and
score MLPs read the endpoints through ``detach`` so their losses never reach
the endpoint head through the conditioning inputs; the endpoint head still
learns from the refined endpoint itself, which is appended as the final
trajectory step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Module, Parameter
from .tensor import Tensor

META_WIDTH = 5


@dataclass
class DecoderOutput:
    endpoints_raw: Tensor  # (N, K, 2)
    offsets: Tensor  # (N, K, 2)
    endpoints: Tensor  # (N, K, 2) refined
    trajectory: Tensor  # (N, K, T_f, 2)
    scores: Tensor  # (N, K)


class StaticHead(Module):
    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator, dtype=None):
        self.mlp = MLP(d_in, d_hidden, 2, rng, residual=True, dtype=dtype)

    def __call__(self, f: Tensor) -> Tensor:
        return self.mlp(f)


class AdaptiveHead(Module):
    """Endpoint head whose two layers are generated per agent and mode.

    ``f~ = MLP(f)``; ``W1 = reshape(f~ Wd1)``; ``W2 = reshape(f~ Wd2)``;
    ``y = W2 relu(norm(W1 f))``.
    """

    def __init__(self, d_in: int, d_hidden: int, h_dyn: int, rng: np.random.Generator, dtype=None):
        self.d_in = d_in
        self.h_dyn = h_dyn
        self.meta_mlp = MLP(d_in, d_hidden, d_hidden, rng, residual=True, dtype=dtype)
        b1 = 1.0 / np.sqrt(d_hidden)
        b2 = 1.0 / np.sqrt(d_hidden * h_dyn)
        self.wd1 = Parameter(rng.uniform(-b1, b1, (d_hidden, h_dyn * d_in)), dtype=dtype)
        self.wd2 = Parameter(rng.uniform(-b2, b2, (d_hidden, 2 * h_dyn)), dtype=dtype)
        self.norm = LayerNorm(h_dyn, dtype=dtype)

    def generate(self, f: Tensor) -> tuple[Tensor, Tensor]:
        """Dynamic weights ``W1 (..., h_dyn, d_in)`` and ``W2 (..., 2, h_dyn)`` for features ``f``."""
        lead = f.shape[:-1]
        ft = self.meta_mlp(f)
        w1 = T.reshape(T.matmul(ft, self.wd1), lead + (self.h_dyn, self.d_in))
        w2 = T.reshape(T.matmul(ft, self.wd2), lead + (2, self.h_dyn))
        return w1, w2

    def __call__(self, f: Tensor) -> Tensor:
        lead = f.shape[:-1]
        w1, w2 = self.generate(f)
        hidden = T.reshape(T.matmul(w1, T.expand_dims(f, -1)), lead + (self.h_dyn,))
        hidden = T.relu(self.norm(hidden))
        return T.reshape(T.matmul(w2, T.expand_dims(hidden, -1)), lead + (2,))


class Decoder(Module):
    def __init__(self, d: int, k: int, t_future: int, head: str, rng: np.random.Generator,
                 h_dyn: int | None = None, refinement: bool = True, stop_gradient: bool = True, dtype=None):
        d_in = d + META_WIDTH
        self.k = k
        self.t_future = t_future
        self.refinement = refinement
        self.stop_gradient = stop_gradient
        self.mode_embedding = Parameter(rng.normal(0.0, 1.0, (k, d_in)), dtype=dtype)
        if head == "static":
            self.endpoint_head = StaticHead(d_in, d, rng, dtype)
        else:
            self.endpoint_head = AdaptiveHead(d_in, d, h_dyn or d, rng, dtype)
        self.mlp1 = MLP(d_in + 2, d, 2, rng, residual=True, dtype=dtype)
        self.mlp2 = MLP(d_in + 2, d, 2 * (t_future - 1), rng, residual=True, dtype=dtype) if t_future > 1 else None
        self.mlp3 = MLP(d_in + 2, d, 1, rng, residual=True, dtype=dtype)

    def expand_modes(self, features: Tensor, meta) -> Tensor:
        """``cat(features, meta)`` broadcast to ``(N, K, D)`` plus the per-mode embedding."""
        meta = T.as_tensor(meta, dtype=features.dtype)
        f = T.concat([features, meta], axis=-1)
        n, width = f.shape
        return T.expand(T.expand_dims(f, 1), (n, self.k, width)) + self.mode_embedding

    def _cond(self, endpoints: Tensor) -> Tensor:
        return T.detach(endpoints) if self.stop_gradient else endpoints

    def refine(self, f: Tensor, endpoints: Tensor) -> Tensor:
        return self.mlp1(T.concat([f, self._cond(endpoints)], axis=-1))

    def interpolate(self, f: Tensor, endpoints: Tensor) -> Tensor:
        n, k = endpoints.shape[:2]
        last = T.expand_dims(endpoints, 2)
        if self.mlp2 is None:
            return last
        mid = T.reshape(self.mlp2(T.concat([f, self._cond(endpoints)], axis=-1)), (n, k, self.t_future - 1, 2))
        return T.concat([mid, last], axis=2)

    def score(self, f: Tensor, endpoints: Tensor) -> Tensor:
        n, k = endpoints.shape[:2]
        logits = T.reshape(self.mlp3(T.concat([f, self._cond(endpoints)], axis=-1)), (n, k))
        return T.softmax(logits, axis=-1)

    def __call__(self, features: Tensor, meta) -> DecoderOutput:
        f = self.expand_modes(features, meta)
        raw = self.endpoint_head(f)
        if self.refinement:
            offsets = self.refine(f, raw)
            endpoints = raw + offsets
        else:
            offsets = T.Tensor(np.zeros(raw.shape), dtype=raw.dtype)
            endpoints = raw
        traj = self.interpolate(f, endpoints)
        scores = self.score(f, endpoints)
        return DecoderOutput(raw, offsets, endpoints, traj, scores)


def static_head(head: StaticHead, f: Tensor) -> Tensor:
    return head(f)


def adaptive_head(head: AdaptiveHead, f: Tensor) -> Tensor:
    return head(f)


def predict_trajectory(decoder: Decoder, features: Tensor, meta) -> DecoderOutput:
    """Decode ``(N, d)`` agent features and ``(N, 5)`` meta info into K trajectories per agent."""
    return decoder(features, meta)
