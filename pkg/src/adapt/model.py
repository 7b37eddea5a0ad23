"""Batch assembly and the full encoder-decoder model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .decoder import Decoder, DecoderOutput
from .encoder import InteractionStack, PolylineSubgraph
from .nn import Module
from .scene import Scene, meta_info, rotation, to_agent_frame, to_scene_frame, vectorize
from .tensor import Tensor


@dataclass
class Sample:
    """A scene already expressed in its prediction frame, plus the agents to predict."""

    scene: Scene
    targets: list[str]


@dataclass
class Batch:
    agent_nodes: np.ndarray  # (P_a, L_a, F_a)
    agent_node_valid: np.ndarray  # (P_a, L_a)
    agent_slot: np.ndarray  # (P_a,) flat slot in (S * N)
    lane_nodes: np.ndarray  # (P_l, L_l, F_l)
    lane_node_valid: np.ndarray
    lane_slot: np.ndarray
    agent_valid: np.ndarray  # (S, N)
    lane_valid: np.ndarray  # (S, M)
    target_slot: np.ndarray  # (N_t,)
    meta: np.ndarray  # (N_t, 5)
    gt: np.ndarray | None  # (N_t, T_f, 2)
    keys: list[tuple[int, str]]

    @property
    def n_targets(self) -> int:
        return len(self.keys)


def make_samples(scene: Scene, frame: str, targets: list[str] | None = None) -> list[Sample]:
    """Normalize ``scene`` for prediction: one sample per target (agent frame) or one in total (scene frame)."""
    if targets is None:
        targets = [a.id for a in scene.targets()]
    if not targets:
        raise ValueError("scene has no target agents")
    if frame == "scene":
        return [Sample(to_scene_frame(scene), list(targets))]
    return [Sample(to_agent_frame(scene, t), [t]) for t in targets]


def _pad(blocks: list[np.ndarray], width: int) -> tuple[np.ndarray, np.ndarray]:
    longest = max((len(b) for b in blocks), default=0)
    out = np.zeros((len(blocks), max(longest, 1), width))
    valid = np.zeros((len(blocks), max(longest, 1)), dtype=bool)
    for i, b in enumerate(blocks):
        out[i, : len(b), : b.shape[1]] = b
        valid[i, : len(b)] = True
    return out, valid


def build_batch(samples: list[Sample], cfg: ModelConfig, with_gt: bool = True) -> Batch:
    dtype = np.dtype(cfg.dtype)
    fa = cfg.agent_feature_width
    fl = 4 if cfg.dual_subgraph else fa
    a_blocks, a_scene_pos, l_blocks, l_scene_pos = [], [], [], []
    n_max, m_max = 1, 0
    per_scene = []
    for s_idx, sample in enumerate(samples):
        nodes = vectorize(sample.scene, cfg.lane_radius)
        rows = {sample.scene.agents[i].id: r for r, i in enumerate(nodes.agent_index)}
        per_scene.append(rows)
        n_max = max(n_max, len(nodes.agent_nodes))
        m_max = max(m_max, len(nodes.lane_nodes))
        for r, block in enumerate(nodes.agent_nodes):
            a_blocks.append(block)
            a_scene_pos.append((s_idx, r))
        for r, block in enumerate(nodes.lane_nodes):
            l_blocks.append(block)
            l_scene_pos.append((s_idx, r))
    S = len(samples)
    agent_nodes, agent_node_valid = _pad(a_blocks, fa)
    agent_slot = np.array([s * n_max + r for s, r in a_scene_pos], dtype=np.intp)
    agent_valid = np.zeros((S, n_max), dtype=bool)
    agent_valid.reshape(-1)[agent_slot] = True
    lane_valid = np.zeros((S, m_max), dtype=bool)
    if l_blocks:
        lane_nodes, lane_node_valid = _pad(l_blocks, fl)
        lane_slot = np.array([s * m_max + r for s, r in l_scene_pos], dtype=np.intp)
        lane_valid.reshape(-1)[lane_slot] = True
    else:
        lane_nodes = np.zeros((0, 1, fl))
        lane_node_valid = np.zeros((0, 1), dtype=bool)
        lane_slot = np.zeros(0, dtype=np.intp)

    target_slot, meta, gt, keys = [], [], [], []
    for s_idx, sample in enumerate(samples):
        for agent_id in sample.targets:
            agent = sample.scene.agent(agent_id)
            target_slot.append(s_idx * n_max + per_scene[s_idx][agent_id])
            meta.append(meta_info(agent).vector)
            keys.append((s_idx, agent_id))
            if with_gt:
                gt.append(sample.scene.future[agent_id])
    return Batch(
        agent_nodes.astype(dtype), agent_node_valid, agent_slot,
        lane_nodes.astype(dtype), lane_node_valid, lane_slot,
        agent_valid, lane_valid,
        np.array(target_slot, dtype=np.intp), np.array(meta, dtype=dtype).reshape(-1, 5),
        np.array(gt, dtype=dtype) if with_gt else None, keys,
    )


def _scatter(rows: Tensor, slots: np.ndarray, n_slots: int) -> Tensor:
    """Place ``rows`` at ``slots`` of an ``(n_slots, d)`` zero block."""
    d = rows.shape[-1]
    table = T.concat([rows, T.Tensor(np.zeros((1, d)), dtype=rows.dtype)], axis=0)
    index = np.full(n_slots, len(slots), dtype=np.intp)
    index[slots] = np.arange(len(slots))
    return T.take(table, index, axis=0)


class AdaptModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype).type
        rng = np.random.default_rng(cfg.seed)
        self.dropout_rng = np.random.default_rng([cfg.seed, 1])
        self.agent_subgraph = PolylineSubgraph(cfg.agent_feature_width, cfg.d, cfg.subgraph_layers, rng, dtype)
        self.lane_subgraph = (
            PolylineSubgraph(4, cfg.d, cfg.subgraph_layers, rng, dtype) if cfg.dual_subgraph else None
        )
        self.interaction = InteractionStack(cfg.d, cfg.d_ff, cfg.heads, cfg.interaction_layers, rng,
                                            cfg.dropout, cfg.iterative, dtype)
        for block in self.interaction.block_list:
            block.rng = self.dropout_rng
        self.decoder = Decoder(cfg.d, cfg.k, cfg.t_future, cfg.head, rng, cfg.h_dyn,
                               cfg.refinement, cfg.stop_gradient, dtype)

    def encode(self, batch: Batch, capture: list | None = None) -> Tensor:
        """Agent features for every slot, ``(S * N, d)``."""
        S, n_max = batch.agent_valid.shape
        m_max = batch.lane_valid.shape[1]
        agents = self.agent_subgraph(T.Tensor(batch.agent_nodes), batch.agent_node_valid)
        agents = T.reshape(_scatter(agents, batch.agent_slot, S * n_max), (S, n_max, self.cfg.d))
        lanes = None
        if len(batch.lane_slot):
            sub = self.lane_subgraph or self.agent_subgraph
            lanes = sub(T.Tensor(batch.lane_nodes), batch.lane_node_valid)
            lanes = T.reshape(_scatter(lanes, batch.lane_slot, S * m_max), (S, m_max, self.cfg.d))
        agents, _ = self.interaction(agents, lanes, batch.agent_valid, batch.lane_valid if lanes is not None else None,
                                     capture)
        return T.reshape(agents, (S * n_max, self.cfg.d))

    def __call__(self, batch: Batch, capture: list | None = None) -> DecoderOutput:
        feats = T.take(self.encode(batch, capture), batch.target_slot, axis=0)
        return self.decoder(feats, T.Tensor(batch.meta))


@dataclass
class PredictionSet:
    agent_id: str
    endpoints_raw: np.ndarray
    offsets: np.ndarray
    endpoints: np.ndarray
    trajectory: np.ndarray
    scores: np.ndarray


def predict(model: AdaptModel, scene: Scene, targets: list[str] | None = None,
            world: bool = False) -> dict[str, PredictionSet]:
    """Predict every requested target in one forward pass per sample (one in scene frame).

    Outputs are in the prediction frame, or mapped back to world coordinates with ``world=True``.
    """
    samples = make_samples(scene, model.cfg.frame, targets)
    batch = build_batch(samples, model.cfg, with_gt=False)
    with T.no_grad():
        out = model(batch)
    result = {}
    for i, (s_idx, agent_id) in enumerate(batch.keys):
        arrays = [out.endpoints_raw.data[i], out.offsets.data[i], out.endpoints.data[i], out.trajectory.data[i]]
        if world:
            frame = samples[s_idx].scene
            R, o = rotation(frame.theta), frame.origin
            arrays = [a @ R.T + o for a in arrays[:1]] + [arrays[1] @ R.T] + [a @ R.T + o for a in arrays[2:]]
        result[agent_id] = PredictionSet(agent_id, *arrays, out.scores.data[i].copy())
    return result
