"""Inference latency: one scene-centric pass for all agents vs one pass per agent."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .model import AdaptModel, Batch, build_batch, make_samples
from .scene import Scene, vectorize
from .synth import GeneratorConfig, generate_scene

CSV_HEADER = ("n_agents", "m_lanes", "mode", "median_ms", "p90_ms")
MIN_REPEATS = 20


@dataclass
class BenchRow:
    n_agents: int
    m_lanes: int
    mode: str
    median_ms: float
    p90_ms: float
    samples_ms: list[float] = field(default_factory=list, repr=False)


@dataclass
class BenchResult:
    rows: list[BenchRow]
    # log-log slope of median time vs N per mode (None with fewer than two N values)
    slopes: dict[str, float | None]

    def row(self, n_agents: int, mode: str) -> BenchRow:
        return next(r for r in self.rows if r.n_agents == n_agents and r.mode == mode)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r.n_agents, r.m_lanes, r.mode, f"{r.median_ms:.6f}", f"{r.p90_ms:.6f}"])

    def to_dict(self) -> dict:
        return {
            "rows": [{k: getattr(r, k) for k in CSV_HEADER} for r in self.rows],
            "slopes": self.slopes,
        }


def bench_scene(model: AdaptModel, n_agents: int, seed: int = 0, approaches: int = 2) -> Scene:
    """A scene with ``n_agents`` fully observed targets. The lane layout depends only on ``seed``."""
    cfg = GeneratorConfig(
        seed=seed, n_scenes=1, agents=(n_agents, n_agents), approaches=(approaches, approaches),
        t_past=model.cfg.t_past, t_future=model.cfg.t_future, partial_visibility=0.0,
    )
    return generate_scene(cfg, 0)


def single_pass_batch(model: AdaptModel, scene: Scene) -> Batch:
    return build_batch(make_samples(scene, "scene"), model.cfg, with_gt=False)


def loop_batches(model: AdaptModel, scene: Scene, frame: str = "agent") -> list[Batch]:
    """One single-target batch per agent, each normalized to ``frame``."""
    return [build_batch(make_samples(scene, frame, [a.id]), model.cfg, with_gt=False) for a in scene.targets()]


def _time(fn, repeats: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return out


def loglog_slope(ns, times) -> float | None:
    if len(ns) < 2:
        return None
    slope, _ = np.polyfit(np.log(ns), np.log(times), 1)
    return float(slope)


def bench(model: AdaptModel, agents=(2, 8, 32), repeats: int = MIN_REPEATS, warmup: int = 3, threads: int = 1,
          seed: int = 0, modes=("single", "loop"), loop_frame: str = "agent") -> BenchResult:
    """Time forward passes in both modes for each agent count on identical scenes."""
    if repeats < MIN_REPEATS:
        raise ValueError(f"need at least {MIN_REPEATS} repeats, got {repeats}")
    model.eval()
    rows = []
    with threadpool_limits(limits=threads), T.no_grad():
        for n in agents:
            scene = bench_scene(model, n, seed)
            m_lanes = len(vectorize(make_samples(scene, "scene")[0].scene, model.cfg.lane_radius).lane_nodes)
            for mode in modes:
                if mode == "single":
                    batch = single_pass_batch(model, scene)
                    fn = lambda: model(batch)
                else:
                    batches = loop_batches(model, scene, loop_frame)
                    fn = lambda: [model(b) for b in batches]
                ms = _time(fn, repeats, warmup)
                rows.append(BenchRow(n, m_lanes, mode, float(np.median(ms)), float(np.percentile(ms, 90)), ms))
    slopes = {}
    for mode in modes:
        picked = [r for r in rows if r.mode == mode]
        slopes[mode] = loglog_slope([r.n_agents for r in picked], [r.median_ms for r in picked])
    return BenchResult(rows, slopes)
