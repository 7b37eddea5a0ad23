"""Deterministic synthetic junction scenes and newline-delimited dataset files.

Each scene is built around 1-3 approach corridors meeting near the scene
center. A corridor has a main lane and a parallel lane; the main lane branches
into straight, left-turn and right-turn continuations at its junction point.
Agents move along these centerlines by arc length, so lane-following tracks lie
exactly on the lane polylines.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .scene import (
    AgentTrack,
    LanePolyline,
    Scene,
    SceneFormatError,
    rigid_transform,
    scene_from_dict,
    scene_to_dict,
)

BEHAVIORS = ("lane_follow", "turn", "lane_change", "stop")


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_scenes: int = 100
    agents: tuple[int, int] = (2, 6)
    # number of approach corridors; each contributes six lane polylines
    approaches: tuple[int, int] = (1, 2)
    t_past: int = 10
    t_future: int = 20
    dt: float = 0.1
    behaviors: dict[str, float] = field(
        default_factory=lambda: {"lane_follow": 0.4, "turn": 0.3, "lane_change": 0.15, "stop": 0.15}
    )
    speed: tuple[float, float] = (4.0, 12.0)
    noise_sigma: float = 0.0
    partial_visibility: float = 0.2
    lane_spacing: float = 4.0
    world_extent: float = 500.0

    def __post_init__(self):
        self.agents = tuple(self.agents)
        self.approaches = tuple(self.approaches)
        self.speed = tuple(self.speed)
        self.validate()

    def validate(self) -> None:
        if set(self.behaviors) - set(BEHAVIORS):
            raise ValueError(f"unknown behaviors {sorted(set(self.behaviors) - set(BEHAVIORS))}")
        if any(p < 0 for p in self.behaviors.values()) or abs(sum(self.behaviors.values()) - 1.0) > 1e-9:
            raise ValueError("behavior probabilities must be non-negative and sum to 1")
        for name in ("agents", "approaches", "speed"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {lo} > {hi}")
        if self.agents[0] < 1 or self.approaches[0] < 1:
            raise ValueError("need at least one agent and one approach")
        if self.speed[0] < 0:
            raise ValueError("speed must be non-negative")
        if self.t_past < 2 or self.t_future < 1:
            raise ValueError("need t_past >= 2 and t_future >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# geometry helpers


def _straight(start, direction, length: float, spacing: float) -> np.ndarray:
    n = max(1, int(math.ceil(length / spacing)))
    s = np.linspace(0.0, length, n + 1)
    return np.asarray(start) + s[:, None] * np.asarray(direction)


def _turn(start, heading: float, radius: float, sign: int, tail: float, spacing: float) -> np.ndarray:
    """Quarter-circle arc (``sign`` +1 left, -1 right) followed by a straight tail."""
    n_arc = max(2, int(math.ceil(radius * math.pi / 2 / spacing)))
    center = np.asarray(start) + sign * radius * np.array([-math.sin(heading), math.cos(heading)])
    phi = heading - sign * math.pi / 2 + sign * np.linspace(0.0, math.pi / 2, n_arc + 1)
    arc = center + radius * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    out_heading = heading + sign * math.pi / 2
    d = np.array([math.cos(out_heading), math.sin(out_heading)])
    straight = _straight(arc[-1], d, tail, spacing)
    return np.concatenate([arc, straight[1:]])


def _join(*pieces: np.ndarray) -> np.ndarray:
    out = [pieces[0]]
    for p in pieces[1:]:
        out.append(p[1:] if np.allclose(p[0], out[-1][-1]) else p)
    return np.concatenate(out)


class _Path:
    """Arc-length parameterized polyline."""

    def __init__(self, points: np.ndarray):
        seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
        keep = np.concatenate([[True], seg > 1e-12])
        self.points = points[keep]
        self.cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(self.points, axis=0), axis=1))])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def at(self, s: np.ndarray) -> np.ndarray:
        s = np.clip(s, 0.0, self.length)
        return np.stack([np.interp(s, self.cum, self.points[:, 0]), np.interp(s, self.cum, self.points[:, 1])], axis=1)


def _lane_change_path(base: np.ndarray, offset_dir: np.ndarray, width: float, s0: float, span: float) -> np.ndarray:
    path = _Path(base)
    s = np.arange(0.0, path.length, 0.5)
    s = np.append(s, path.length)
    pts = path.at(s)
    u = np.clip((s - s0) / span, 0.0, 1.0)
    w = u * u * (3 - 2 * u)
    return pts + (width * w)[:, None] * offset_dir


# ---------------------------------------------------------------------------
# generation


def generate_scene(cfg: GeneratorConfig, index: int) -> Scene:
    """Scene ``index`` of the dataset described by ``cfg``; a pure function of both."""
    rng = np.random.default_rng([cfg.seed, index])
    sp = cfg.lane_spacing
    width = 3.5
    approach_len, branch_len = 45.0, 50.0

    corridors = []
    lanes: list[np.ndarray] = []
    n_app = int(rng.integers(cfg.approaches[0], cfg.approaches[1] + 1))
    base_heading = rng.uniform(-math.pi, math.pi)
    for k in range(n_app):
        hdg = base_heading + 2 * math.pi * k / n_app + rng.uniform(-0.3, 0.3)
        u = np.array([math.cos(hdg), math.sin(hdg)])
        left = np.array([-u[1], u[0]])
        end = rng.uniform(-8.0, 8.0, 2)
        main = _straight(end - approach_len * u, u, approach_len, sp)
        para = main + width * left
        para_cont = _straight(para[-1], u, branch_len, sp)
        straight = _straight(end, u, branch_len, sp)
        lturn = _turn(end, hdg, rng.uniform(10.0, 20.0), +1, 35.0, sp)
        rturn = _turn(end, hdg, rng.uniform(8.0, 14.0), -1, 35.0, sp)
        lanes += [main, para, para_cont, straight, lturn, rturn]
        corridors.append({"main": main, "para": para, "para_cont": para_cont,
                          "straight": straight, "left": lturn, "right": rturn, "left_dir": left})

    names = [b for b in BEHAVIORS if cfg.behaviors.get(b, 0.0) > 0]
    probs = np.array([cfg.behaviors[b] for b in names])
    n_agents = int(rng.integers(cfg.agents[0], cfg.agents[1] + 1))
    steps = np.arange(cfg.t_past + cfg.t_future) - (cfg.t_past - 1)
    times = steps * cfg.dt

    agents, future = [], {}
    for i in range(n_agents):
        c = corridors[int(rng.integers(len(corridors)))]
        behavior = names[int(rng.choice(len(names), p=probs))]
        speed = rng.uniform(*cfg.speed)
        on_parallel = behavior in ("lane_follow", "stop") and rng.random() < 0.3
        if behavior == "turn":
            pts = _join(c["main"], c["left"] if rng.random() < 0.5 else c["right"])
        elif on_parallel:
            pts = _join(c["para"], c["para_cont"])
        elif behavior == "lane_change":
            base = _join(c["main"], c["straight"])
            pts = _lane_change_path(base, c["left_dir"], width, rng.uniform(20.0, approach_len), 25.0)
        else:
            pts = _join(c["main"], c["straight"])
        path = _Path(pts)
        past_span = speed * (cfg.t_past - 1) * cfg.dt
        s_now = rng.uniform(past_span, max(past_span, approach_len + 5.0))
        if behavior == "stop" and speed > 0:
            stop_time = rng.uniform(0.5, 1.0) * cfg.t_future * cfg.dt
            decel = speed / stop_time
            t_f = np.clip(times, 0.0, stop_time)
            s = s_now + np.where(times <= 0, speed * times, speed * t_f - 0.5 * decel * t_f**2)
        else:
            s = s_now + speed * times
        track = path.at(s)
        past, fut = track[: cfg.t_past], track[cfg.t_past:]
        valid = np.ones(cfg.t_past, dtype=bool)
        if i > 0 and cfg.t_past > 2 and rng.random() < cfg.partial_visibility:
            valid[: int(rng.integers(1, cfg.t_past - 1))] = False
        past = np.where(valid[:, None], past, 0.0)
        agent_id = str(i)
        is_target = bool(valid.all())
        agents.append(AgentTrack(agent_id, past, valid, is_target))
        if is_target:
            future[agent_id] = fut

    scene = Scene(agents, [LanePolyline(l) for l in lanes], future, dt=cfg.dt)
    phi = rng.uniform(-math.pi, math.pi)
    shift = rng.uniform(-cfg.world_extent, cfg.world_extent, 2)
    noise_rng = np.random.default_rng([cfg.seed, index, 1])
    scene = rigid_transform(scene, phi, shift)
    for a in scene.agents:
        a.positions[~a.valid] = 0.0
    return add_noise(scene, cfg.noise_sigma, noise_rng)


def add_noise(scene: Scene, sigma: float, rng: np.random.Generator) -> Scene:
    """Perturb valid observed past coordinates with N(0, sigma); identity when sigma == 0."""
    if sigma == 0:
        return scene
    out = scene.copy()
    for a in out.agents:
        noise = rng.normal(0.0, sigma, a.positions.shape)
        a.positions = np.where(a.valid[:, None], a.positions + noise, a.positions)
    return out


def generate_dataset(cfg: GeneratorConfig) -> list[Scene]:
    return [generate_scene(cfg, i) for i in range(cfg.n_scenes)]


def filter_moving(scenes: Iterable[Scene], min_displacement: float = 6.0) -> list[Scene]:
    """Demote targets whose start-of-past to end-of-future displacement is below the threshold."""
    out = []
    for scene in scenes:
        scene = scene.copy()
        for a in scene.agents:
            if not a.is_target:
                continue
            fut = scene.future.get(a.id)
            if fut is None:
                raise ValueError(f"target {a.id} has no ground-truth future")
            if np.linalg.norm(fut[-1] - a.positions[0]) < min_displacement:
                a.is_target = False
                del scene.future[a.id]
        out.append(scene)
    return out


# ---------------------------------------------------------------------------
# files


def write_dataset(scenes: Iterable[Scene], path) -> None:
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_dict(scene)))
            fh.write("\n")


def read_dataset(path) -> list[Scene]:
    scenes = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"invalid JSON ({exc.msg})", line=lineno) from None
        try:
            scenes.append(scene_from_dict(record))
        except SceneFormatError as exc:
            raise SceneFormatError(exc.message, exc.path, line=lineno) from None
    return scenes
