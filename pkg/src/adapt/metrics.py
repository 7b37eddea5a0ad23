"""Best-of-k displacement metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MISS_THRESHOLD = 2.0


def variety_select(trajectories: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Index of the mode whose endpoint is closest to the ground-truth endpoint.

    ``trajectories`` is ``(..., K, T, 2)`` and ``gt`` ``(..., T, 2)``; ties go to the lowest index.
    """
    d = np.linalg.norm(trajectories[..., -1, :] - gt[..., None, -1, :], axis=-1)
    return np.argmin(d, axis=-1)


@dataclass
class MetricReport:
    values: dict[str, float] = field(default_factory=dict)
    n_agents: int = 0

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def to_dict(self) -> dict:
        return {**self.values, "n_agents": self.n_agents}


def per_agent_metrics(trajectories: np.ndarray, scores: np.ndarray, gt: np.ndarray, k: int) -> dict[str, np.ndarray]:
    """Per-agent ADE/FDE/miss/brier for the best of the top-``k`` scored modes.

    Shapes: ``trajectories (N, K, T, 2)``, ``scores (N, K)``, ``gt (N, T, 2)``.
    """
    n, K = scores.shape
    k = min(k, K)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(trajectories, order[:, :, None, None], axis=1)
    pick = variety_select(top, gt)
    best = order[np.arange(n), pick]
    traj = trajectories[np.arange(n), best]
    err = np.linalg.norm(traj - gt, axis=-1)
    fde = err[:, -1]
    p = scores[np.arange(n), best]
    return {
        "ade": err.mean(axis=1),
        "fde": fde,
        "miss": (fde > MISS_THRESHOLD).astype(float),
        "brier": fde + (1.0 - p) ** 2,
        "mode": best,
    }


def metrics(trajectories: np.ndarray, scores: np.ndarray, gt: np.ndarray, ks=(1, 6)) -> MetricReport:
    """mADE_k, mFDE_k, MR_k and brier-mFDE_k averaged over all agents."""
    report = MetricReport(n_agents=len(gt))
    for k in ks:
        m = per_agent_metrics(trajectories, scores, gt, k)
        report.values[f"mADE_{k}"] = float(m["ade"].mean())
        report.values[f"mFDE_{k}"] = float(m["fde"].mean())
        report.values[f"MR_{k}"] = float(m["miss"].mean())
        report.values[f"brier-mFDE_{k}"] = float(m["brier"].mean())
    return report
