"""Agents, lanes and reference frames.

Coordinates are planar meters. A scene carries the rigid pose of its current
frame relative to the world (``origin`` in world coordinates, ``theta`` the
world heading of the frame's +x axis), so every normalization can be undone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

FORMAT = "adapt-scene/1"
WORLD, AGENT_CENTRIC, SCENE_CENTRIC = "world", "agent_centric", "scene_centric"
STATIONARY_EPS = 1e-9


class SceneFormatError(ValueError):
    """Malformed scene record; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = "", line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        at = f" at '{path}'" if path else ""
        super().__init__(f"{where}{message}{at}")
        self.message = message
        self.path = path
        self.line = line


@dataclass
class AgentTrack:
    id: str
    positions: np.ndarray  # (T_p, 2)
    valid: np.ndarray  # (T_p,) bool
    is_target: bool = False

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if len(self.valid) != len(self.positions):
            raise ValueError(f"agent {self.id}: {len(self.positions)} positions but {len(self.valid)} valid flags")
        if self.is_target and not self.valid.all():
            raise ValueError(f"target agent {self.id} must be valid at every past step")


@dataclass
class LanePolyline:
    points: np.ndarray  # (l, 2), l >= 2

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) < 2:
            raise ValueError("a lane polyline needs at least two points")


@dataclass
class Scene:
    agents: list[AgentTrack]
    lanes: list[LanePolyline]
    future: dict[str, np.ndarray] = field(default_factory=dict)
    dt: float = 0.1
    frame: str = WORLD
    frame_agent: str | None = None
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta: float = 0.0
    heading_fallback: bool = False

    def __post_init__(self):
        self.future = {k: np.asarray(v, dtype=np.float64).reshape(-1, 2) for k, v in self.future.items()}
        self.origin = np.asarray(self.origin, dtype=np.float64)

    @property
    def t_past(self) -> int:
        return len(self.agents[0].positions) if self.agents else 0

    @property
    def t_future(self) -> int:
        return len(next(iter(self.future.values()))) if self.future else 0

    def targets(self) -> list[AgentTrack]:
        return [a for a in self.agents if a.is_target]

    def agent(self, agent_id: str) -> AgentTrack:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(f"no agent with id {agent_id!r}")

    def copy(self) -> "Scene":
        return replace(
            self,
            agents=[replace(a, positions=a.positions.copy(), valid=a.valid.copy()) for a in self.agents],
            lanes=[LanePolyline(l.points.copy()) for l in self.lanes],
            future={k: v.copy() for k, v in self.future.items()},
            origin=self.origin.copy(),
        )


@dataclass
class MetaInfo:
    position: np.ndarray
    previous: np.ndarray
    yaw: float
    degenerate: bool = False

    @property
    def vector(self) -> np.ndarray:
        return np.array([*self.position, *self.previous, self.yaw])


def rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _map_points(scene: Scene, fn) -> Scene:
    out = scene.copy()
    for a in out.agents:
        a.positions = fn(a.positions)
    for lane in out.lanes:
        lane.points = fn(lane.points)
    out.future = {k: fn(v) for k, v in out.future.items()}
    return out


def rigid_transform(scene: Scene, angle: float, translation) -> Scene:
    """Move every point by ``p -> R(angle) p + translation`` (a new world placement)."""
    R = rotation(angle)
    t = np.asarray(translation, dtype=np.float64)
    return _map_points(scene, lambda p: p @ R.T + t)


def _reframe(scene: Scene, origin, theta: float, frame: str, frame_agent: str | None) -> Scene:
    """Express ``scene`` in a frame at ``origin`` with heading ``theta`` (both in current coordinates)."""
    o = np.asarray(origin, dtype=np.float64)
    Rinv = rotation(-theta)
    out = _map_points(scene, lambda p: (p - o) @ Rinv.T)
    out.origin = scene.origin + rotation(scene.theta) @ o
    out.theta = _wrap(scene.theta + theta)
    out.frame = frame
    out.frame_agent = frame_agent
    return out


def _wrap(angle: float) -> float:
    wrapped = math.atan2(math.sin(angle), math.cos(angle))
    return math.pi if wrapped == -math.pi else wrapped


def heading(positions: np.ndarray) -> tuple[float, bool]:
    """Yaw of the last displacement, or ``(0.0, True)`` when the agent did not move."""
    d = positions[-1] - positions[-2]
    if math.hypot(d[0], d[1]) <= STATIONARY_EPS:
        return 0.0, True
    yaw = math.atan2(d[1], d[0])
    return (math.pi if yaw == -math.pi else yaw), False


def meta_info(agent: AgentTrack) -> MetaInfo:
    if len(agent.positions) < 2 or not (agent.valid[-1] and agent.valid[-2]):
        raise ValueError(f"agent {agent.id}: positions at t and t-1 must be valid")
    yaw, degenerate = heading(agent.positions)
    return MetaInfo(agent.positions[-1].copy(), agent.positions[-2].copy(), yaw, degenerate)


def to_agent_frame(scene: Scene, target: str) -> Scene:
    """Translate and rotate so ``target`` sits at the origin heading along +x."""
    agent = scene.agent(target)
    if not (agent.valid[-1] and agent.valid[-2]):
        raise ValueError(f"agent {target}: positions at t and t-1 must be valid")
    yaw, degenerate = heading(agent.positions)
    out = _reframe(scene, agent.positions[-1], yaw, AGENT_CENTRIC, target)
    out.heading_fallback = degenerate
    return out


def to_scene_frame(scene: Scene) -> Scene:
    """Translate so the mean of the agents' current positions is the origin; no rotation."""
    current = [a.positions[-1] for a in scene.agents if a.valid[-1]]
    if not current:
        raise ValueError("scene has no agent with a valid current position")
    out = _reframe(scene, np.mean(current, axis=0), 0.0, SCENE_CENTRIC, None)
    out.heading_fallback = False
    return out


def to_world(scene: Scene) -> Scene:
    """Undo any normalization, returning world coordinates."""
    R = rotation(scene.theta)
    o = scene.origin
    out = _map_points(scene, lambda p: p @ R.T + o)
    out.origin = np.zeros(2)
    out.theta = 0.0
    out.frame = WORLD
    out.frame_agent = None
    out.heading_fallback = False
    return out


# ---------------------------------------------------------------------------
# vectorization


@dataclass
class PolylineNodes:
    """Per-polyline node features for one scene.

    ``agent_nodes[i]`` has rows ``(x0, y0, x1, y1, onehot(step))``; ``lane_nodes[j]``
    has rows ``(x0, y0, x1, y1)``. ``agent_index``/``lane_index`` map back into
    ``scene.agents`` / ``scene.lanes``.
    """

    agent_nodes: list[np.ndarray]
    agent_index: list[int]
    lane_nodes: list[np.ndarray]
    lane_index: list[int]

    @property
    def n_nodes(self) -> int:
        return sum(len(n) for n in self.agent_nodes) + sum(len(n) for n in self.lane_nodes)


def agent_nodes(agent: AgentTrack) -> np.ndarray:
    pos, valid = agent.positions, agent.valid
    steps = len(pos) - 1
    ok = np.flatnonzero(valid[:-1] & valid[1:])
    feats = np.zeros((len(ok), 4 + steps))
    feats[:, 0:2] = pos[ok]
    feats[:, 2:4] = pos[ok + 1]
    feats[np.arange(len(ok)), 4 + ok] = 1.0
    return feats


def lane_nodes(lane: LanePolyline) -> np.ndarray:
    return np.concatenate([lane.points[:-1], lane.points[1:]], axis=1)


def vectorize(scene: Scene, radius: float = 50.0) -> PolylineNodes:
    """Segment nodes for agents and for lanes with any point within ``radius`` of an agent."""
    if scene.frame == WORLD:
        raise ValueError("vectorize expects an agent- or scene-centric frame")
    a_nodes, a_idx = [], []
    for i, agent in enumerate(scene.agents):
        feats = agent_nodes(agent)
        if len(feats):
            a_nodes.append(feats)
            a_idx.append(i)
    current = np.array([a.positions[-1] for a in scene.agents if a.valid[-1]]).reshape(-1, 2)
    l_nodes, l_idx = [], []
    for j, lane in enumerate(scene.lanes):
        if len(current) == 0:
            break
        d2 = ((lane.points[:, None, :] - current[None, :, :]) ** 2).sum(-1)
        if d2.min() < radius * radius:
            l_nodes.append(lane_nodes(lane))
            l_idx.append(j)
    return PolylineNodes(a_nodes, a_idx, l_nodes, l_idx)


# ---------------------------------------------------------------------------
# interchange records


def scene_to_dict(scene: Scene) -> dict[str, Any]:
    record: dict[str, Any] = {
        "format": FORMAT,
        "dt": scene.dt,
        "t_past": scene.t_past,
        "t_future": scene.t_future,
        "agents": [
            {
                "id": a.id,
                "is_target": bool(a.is_target),
                "positions": a.positions.tolist(),
                "valid": [bool(v) for v in a.valid],
            }
            for a in scene.agents
        ],
        "lanes": [lane.points.tolist() for lane in scene.lanes],
        "future": {k: v.tolist() for k, v in scene.future.items()},
    }
    if scene.frame != WORLD:
        record["frame"] = {
            "kind": scene.frame,
            "agent": scene.frame_agent,
            "origin": scene.origin.tolist(),
            "theta": scene.theta,
        }
    return record


def _points(value, path: str, n: int | None = None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise SceneFormatError("expected a list of [x, y] points", path) from None
    if arr.ndim != 2 or arr.shape[1] != 2 or (n is not None and len(arr) != n):
        want = f"{n} " if n is not None else ""
        raise SceneFormatError(f"expected {want}[x, y] points, got shape {arr.shape}", path)
    if not np.all(np.isfinite(arr)):
        raise SceneFormatError("non-finite coordinate", path)
    return arr


def _field(record: dict, key: str, path: str):
    if not isinstance(record, dict):
        raise SceneFormatError("expected an object", path)
    if key not in record:
        raise SceneFormatError("missing field", f"{path}.{key}" if path else key)
    return record[key]


def scene_from_dict(record: dict[str, Any]) -> Scene:
    if not isinstance(record, dict):
        raise SceneFormatError("expected an object", "")
    fmt = record.get("format", FORMAT)
    if fmt != FORMAT:
        raise SceneFormatError(f"unsupported format {fmt!r}", "format")
    dt = _field(record, "dt", "")
    t_past = _field(record, "t_past", "")
    t_future = _field(record, "t_future", "")
    for key, val in (("dt", dt), ("t_past", t_past), ("t_future", t_future)):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise SceneFormatError("expected a number", key)
    agents = []
    raw_agents = _field(record, "agents", "")
    if not isinstance(raw_agents, list):
        raise SceneFormatError("expected a list", "agents")
    for i, ra in enumerate(raw_agents):
        path = f"agents[{i}]"
        agent_id = _field(ra, "id", path)
        positions = _points(_field(ra, "positions", path), f"{path}.positions", int(t_past))
        valid = _field(ra, "valid", path)
        if not isinstance(valid, list) or len(valid) != t_past or not all(isinstance(v, bool) for v in valid):
            raise SceneFormatError(f"expected {t_past} booleans", f"{path}.valid")
        is_target = _field(ra, "is_target", path)
        if not isinstance(is_target, bool):
            raise SceneFormatError("expected a boolean", f"{path}.is_target")
        try:
            agents.append(AgentTrack(str(agent_id), positions, np.array(valid), is_target))
        except ValueError as exc:
            raise SceneFormatError(str(exc), path) from None
    raw_lanes = _field(record, "lanes", "")
    if not isinstance(raw_lanes, list):
        raise SceneFormatError("expected a list", "lanes")
    lanes = []
    for j, rl in enumerate(raw_lanes):
        pts = _points(rl, f"lanes[{j}]")
        if len(pts) < 2:
            raise SceneFormatError("a lane needs at least two points", f"lanes[{j}]")
        lanes.append(LanePolyline(pts))
    raw_future = record.get("future", {})
    if not isinstance(raw_future, dict):
        raise SceneFormatError("expected an object", "future")
    future = {str(k): _points(v, f"future.{k}", int(t_future)) for k, v in raw_future.items()}
    scene = Scene(agents, lanes, future, dt=float(dt))
    frame = record.get("frame")
    if frame is not None:
        scene.frame = _field(frame, "kind", "frame")
        scene.frame_agent = frame.get("agent")
        scene.origin = np.asarray(_field(frame, "origin", "frame"), dtype=np.float64)
        scene.theta = float(_field(frame, "theta", "frame"))
    return scene
