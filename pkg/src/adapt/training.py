"""Variety loss, Adam, learning-rate schedule, augmentation and the training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig, model_config_from_dict, to_dict, train_config_from_dict
from .decoder import DecoderOutput
from .metrics import MetricReport, metrics, variety_select
from .model import AdaptModel, Batch, Sample, build_batch, make_samples
from .scene import Scene
from .synth import add_noise, filter_moving

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "adapt-ckpt/1"


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossParts:
    total: T.Tensor
    end: float
    traj: float
    cls: float
    selected: np.ndarray


def loss(pred: DecoderOutput, gt: np.ndarray) -> LossParts:
    """``L_end + L_traj + L_cls`` through the mode with the closest endpoint, averaged over agents."""
    traj = pred.trajectory
    n, k, t_f, _ = traj.shape
    sel = variety_select(traj.data, gt)
    flat = np.arange(n) * k + sel
    best = T.take(T.reshape(traj, (n * k, t_f, 2)), flat, axis=0)
    best_end = T.take(T.reshape(pred.endpoints, (n * k, 2)), flat, axis=0)
    l_end = T.mean(T.sum_(T.smooth_l1(best_end, gt[:, -1]), axis=-1))
    l_traj = T.mean(T.sum_(T.smooth_l1(best, gt), axis=-1))
    onehot = np.zeros((n, k), dtype=traj.dtype)
    onehot[np.arange(n), sel] = 1.0
    l_cls = T.mean(T.binary_cross_entropy(pred.scores, onehot))
    total = l_end + l_traj + l_cls
    return LossParts(total, l_end.item(), l_traj.item(), l_cls.item(), sel)


# ---------------------------------------------------------------------------
# optimizer and schedule


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction; ``t`` counts from 1."""
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, m, v, self.t, lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Base rate, multiplied by the anneal factor at each milestone (inclusive) already reached."""
    passed = sum(1 for m in cfg.milestones if step >= m * total_steps - 1e-9)
    return cfg.lr * cfg.anneal_factor**passed


# ---------------------------------------------------------------------------
# augmentation


def augment(scene: Scene, rng: np.random.Generator, cfg: TrainConfig, scale: float | None = None) -> Scene:
    """Uniform random scaling of every coordinate and random dropping of non-target agents."""
    if scale is None:
        scale = rng.uniform(*cfg.scale_range)
    out = scene.copy()
    keep = [a for a in out.agents if a.is_target or rng.random() >= cfg.agent_drop]
    out.agents = keep
    if scale != 1.0:
        for a in out.agents:
            a.positions = a.positions * scale
        for lane in out.lanes:
            lane.points = lane.points * scale
        out.future = {k: v * scale for k, v in out.future.items()}
    return out


# ---------------------------------------------------------------------------
# data plumbing


def is_validation(index: int) -> bool:
    """Deterministic ~10% validation membership by index hash."""
    return int(hashlib.sha256(str(index).encode()).hexdigest(), 16) % 10 == 0


def split_dataset(scenes: list[Scene]) -> tuple[list[Scene], list[Scene]]:
    train = [s for i, s in enumerate(scenes) if not is_validation(i)]
    val = [s for i, s in enumerate(scenes) if is_validation(i)]
    return train, val


def agent_of_interest(scene: Scene) -> str:
    return scene.targets()[0].id


def training_samples(scenes: list[Scene], model_cfg: ModelConfig, train_cfg: TrainConfig) -> list[Sample]:
    samples = []
    for scene in scenes:
        if not scene.targets():
            continue
        if model_cfg.frame == "scene":
            samples += make_samples(scene, "scene")
            continue
        main = agent_of_interest(scene)
        targets = [main]
        if train_cfg.extended:
            moving = filter_moving([scene], train_cfg.min_displacement)[0]
            targets += [a.id for a in moving.targets() if a.id != main]
        samples += make_samples(scene, "agent", targets)
    return samples


def evaluation_samples(scenes: list[Scene], frame: str, mode: str) -> list[Sample]:
    """Samples for evaluation: every target (``multi``) or only the agent of interest (``single``)."""
    samples = []
    for scene in scenes:
        if not scene.targets():
            continue
        targets = [a.id for a in scene.targets()] if mode == "multi" else [agent_of_interest(scene)]
        samples += make_samples(scene, frame, targets)
    return samples


def predict_batches(model: AdaptModel, samples: list[Sample], batch_size: int = 64):
    trajs, scores, gts = [], [], []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = build_batch(samples[i:i + batch_size], model.cfg)
            out = model(batch)
            trajs.append(out.trajectory.data)
            scores.append(out.scores.data)
            gts.append(batch.gt)
    return np.concatenate(trajs), np.concatenate(scores), np.concatenate(gts)


def evaluate(model: AdaptModel, scenes: list[Scene], mode: str = "multi", noise_sigma: float = 0.0,
             seed: int = 0, batch_size: int = 64) -> MetricReport:
    """Metrics over ``scenes`` in evaluation mode, optionally perturbing observed pasts."""
    if noise_sigma:
        scenes = [add_noise(s, noise_sigma, np.random.default_rng([seed, i])) for i, s in enumerate(scenes)]
    was_training = model.training
    model.eval()
    try:
        traj, score, gt = predict_batches(model, evaluation_samples(scenes, model.cfg.frame, mode), batch_size)
    finally:
        model.train(was_training)
    return metrics(traj, score, gt, ks=(1, 6))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: AdaptModel, train_cfg: TrainConfig | None = None, optimizer: Adam | None = None,
                    state: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_config": to_dict(model.cfg),
        "train_config": to_dict(train_cfg) if train_cfg is not None else None,
        "state": state or {},
        "dropout_rng": model.dropout_rng.bit_generator.state,
        "adam_t": optimizer.t if optimizer is not None else 0,
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = [k for k, _ in model.named_parameters()]
        for name, m, v in zip(names, optimizer.m, optimizer.v):
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[AdaptModel, dict, dict[str, np.ndarray]]:
    """Model with restored parameters, the metadata dict, and the raw arrays."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} checkpoint")
    model = AdaptModel(model_config_from_dict(meta["model_config"]))
    model.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    model.dropout_rng.bit_generator.state = meta["dropout_rng"]
    return model, meta, arrays


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: AdaptModel
    log: list[dict] = field(default_factory=list)
    reports: list[dict] = field(default_factory=list)


def _diagnose(model: AdaptModel, batch: Batch) -> str:
    try:
        with T.detect_anomaly():
            loss(model(batch), batch.gt)
    except T.AnomalyError as exc:
        return exc.op
    for name, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"gradient of {name}"
    return "unknown"


def train(scenes: list[Scene], model_cfg: ModelConfig, train_cfg: TrainConfig, *,
          val_split: bool = True, log_path=None, checkpoint_path=None, resume=None,
          stop_after_epoch: int | None = None) -> TrainResult:
    """Train from scratch (or ``resume`` from a checkpoint path) and return the model and logs.

    With ``val_split`` the deterministic 90/10 split is applied and a metric
    report on the validation part is recorded after every epoch.
    """
    if val_split:
        train_scenes, val_scenes = split_dataset(scenes)
    else:
        train_scenes, val_scenes = scenes, []
    rng = np.random.default_rng(train_cfg.seed)
    if resume is not None:
        model, meta, arrays = load_checkpoint(resume)
        model_cfg = model.cfg
        state = meta["state"]
        rng.bit_generator.state = state["rng"]
    else:
        model, state, arrays = AdaptModel(model_cfg), {"epoch": 0, "step": 0}, {}
    optimizer = Adam(model.parameters(), train_cfg.adam_betas, train_cfg.adam_eps)
    if resume is not None:
        optimizer.t = int(meta["adam_t"])
        names = [k for k, _ in model.named_parameters()]
        optimizer.m = [arrays[f"adam_m/{n}"].copy() for n in names]
        optimizer.v = [arrays[f"adam_v/{n}"].copy() for n in names]

    samples = training_samples(train_scenes, model_cfg, train_cfg)
    if not samples:
        raise TrainingError("no training samples")
    steps_per_epoch = math.ceil(len(samples) / train_cfg.batch_size)
    total = steps_per_epoch * train_cfg.epochs
    if train_cfg.max_steps is not None:
        total = min(total, train_cfg.max_steps)
    result = TrainResult(model)
    step = state["step"]
    log_fh = open(log_path, "a" if resume is not None else "w") if log_path else None
    model.train()
    try:
        for epoch in range(state["epoch"], train_cfg.epochs):
            if step >= total:
                break
            order = rng.permutation(len(samples))
            for start in range(0, len(samples), train_cfg.batch_size):
                if step >= total:
                    break
                chosen = [samples[i] for i in order[start:start + train_cfg.batch_size]]
                if train_cfg.augment:
                    chosen = [Sample(augment(s.scene, rng, train_cfg), s.targets) for s in chosen]
                batch = build_batch(chosen, model_cfg)
                optimizer.zero_grad()
                parts = loss(model(batch), batch.gt)
                if not np.isfinite(parts.total.item()):
                    raise TrainingError(f"non-finite loss at step {step}; first offending op: {_diagnose(model, batch)}")
                parts.total.backward()
                lr = lr_at(step, total, train_cfg)
                optimizer.step(lr)
                entry = {"step": step, "lr": lr, "loss": parts.total.item(),
                         "L_end": parts.end, "L_traj": parts.traj, "L_cls": parts.cls}
                result.log.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry) + "\n")
                step += 1
            state = {"epoch": epoch + 1, "step": step, "rng": rng.bit_generator.state}
            if val_scenes and train_cfg.validate_every_epoch:
                mode = "multi" if model_cfg.frame == "scene" else "single"
                report = evaluate(model, val_scenes, mode)
                result.reports.append({"epoch": epoch + 1, **report.to_dict()})
                log.info("epoch %d: %s", epoch + 1, report.to_dict())
            if checkpoint_path:
                save_checkpoint(checkpoint_path, model, train_cfg, optimizer, state)
            if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
                break
    finally:
        if log_fh:
            log_fh.close()
        model.eval()
    return result
