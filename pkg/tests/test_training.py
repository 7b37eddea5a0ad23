import json

import numpy as np
import pytest

from adapt import tensor as T
from adapt.config import ModelConfig, TrainConfig, model_config_from_dict, to_dict, train_config_from_dict
from adapt.decoder import DecoderOutput
from adapt.metrics import MISS_THRESHOLD, metrics, per_agent_metrics, variety_select
from adapt.model import AdaptModel
from adapt.scene import AgentTrack, LanePolyline, Scene
from adapt.synth import GeneratorConfig, generate_dataset
from adapt.training import (
    Adam,
    TrainingError,
    adam_step,
    augment,
    evaluate,
    is_validation,
    load_checkpoint,
    loss,
    lr_at,
    save_checkpoint,
    split_dataset,
    train,
    training_samples,
)
from adapt.tensor import Tensor

from oracles import adam_scalar, loss_loops, metrics_loops

TINY = dict(d=16, d_ff=16, heads=2, subgraph_layers=2, interaction_layers=1, k=3, t_past=5, t_future=4, dropout=0.1)


def tiny_scenes(n=12, seed=0):
    return generate_dataset(GeneratorConfig(seed=seed, n_scenes=n, t_past=5, t_future=4, agents=(2, 3)))


def random_prediction(rng, n=4, k=3, t=5):
    traj = rng.normal(scale=3.0, size=(n, k, t, 2))
    logits = rng.normal(size=(n, k))
    scores = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    gt = rng.normal(scale=3.0, size=(n, t, 2))
    return traj, scores, gt


def as_output(traj, scores):
    traj_t = Tensor(traj.copy(), requires_grad=True)
    ends = Tensor(traj[:, :, -1].copy(), requires_grad=True)
    sc = Tensor(scores.copy(), requires_grad=True)
    return DecoderOutput(ends, Tensor(np.zeros_like(traj[:, :, -1])), ends, traj_t, sc)


# variety selection

def test_variety_select_single_mode():
    assert variety_select(np.zeros((1, 3, 2)), np.ones((3, 2))) == 0


def test_variety_select_closest_endpoint():
    traj = np.zeros((3, 1, 2))
    traj[:, 0, 0] = [3.0, 1.0, 2.0]
    assert variety_select(traj, np.zeros((1, 2))) == 1


def test_variety_select_ties_lowest_index():
    traj = np.zeros((3, 1, 2))
    traj[:, 0, 0] = [2.0, -1.0, 1.0]
    assert variety_select(traj, np.zeros((1, 2))) == 1


def test_variety_select_random_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(1, 7))
        traj, gt = rng.normal(size=(k, 4, 2)), rng.normal(size=(4, 2))
        dists = [np.hypot(*(traj[m, -1] - gt[-1])) for m in range(k)]
        assert variety_select(traj, gt) == min(range(k), key=lambda m: (dists[m], m))


# loss

def test_loss_perfect_prediction():
    gt = np.random.default_rng(1).normal(size=(2, 4, 2))
    traj = np.stack([gt, gt + 5.0], axis=1)
    scores = np.array([[1.0, 0.0], [1.0, 0.0]])
    parts = loss(as_output(traj, scores), gt)
    assert parts.end == 0.0 and parts.traj == 0.0
    assert parts.cls < 1e-10


def test_loss_endpoint_offset_closed_form():
    t_f = 5
    gt = np.zeros((1, t_f, 2))
    traj = np.zeros((1, 1, t_f, 2))
    traj[0, 0, -1, 0] = 0.5
    parts = loss(as_output(traj, np.ones((1, 1))), gt)
    assert parts.end == pytest.approx(0.125, abs=1e-15)
    assert parts.traj == pytest.approx(0.125 / t_f, abs=1e-15)


def test_loss_matches_oracle_on_random_cases():
    rng = np.random.default_rng(2)
    for _ in range(100):
        traj, scores, gt = random_prediction(rng, n=int(rng.integers(1, 5)), k=int(rng.integers(1, 5)))
        parts = loss(as_output(traj, scores), gt)
        total, le, lt, lc = loss_loops(traj, traj[:, :, -1], scores, gt)
        assert abs(parts.total.item() - total) < 1e-9
        assert abs(parts.end - le) < 1e-9 and abs(parts.traj - lt) < 1e-9 and abs(parts.cls - lc) < 1e-9


def test_loss_gradient_only_through_selected_mode():
    rng = np.random.default_rng(3)
    traj, scores, gt = random_prediction(rng, n=3, k=4)
    out = as_output(traj, scores)
    parts = loss(out, gt)
    parts.total.backward()
    sel = parts.selected
    for a in range(3):
        for m in range(4):
            g_traj = out.trajectory.grad[a, m]
            g_end = out.endpoints.grad[a, m]
            if m == sel[a]:
                assert np.any(g_traj != 0) and np.any(g_end != 0)
            else:
                assert np.all(g_traj == 0) and np.all(g_end == 0)


# metrics

def test_metrics_match_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        traj, scores, gt = random_prediction(rng, n=5, k=6)
        report = metrics(traj, scores, gt, ks=(1, 6))
        for k in (1, 6):
            o = metrics_loops(traj, scores, gt, k)
            assert abs(report[f"mADE_{k}"] - o["mADE"]) < 1e-9
            assert abs(report[f"mFDE_{k}"] - o["mFDE"]) < 1e-9
            assert abs(report[f"MR_{k}"] - o["MR"]) < 1e-9
            assert abs(report[f"brier-mFDE_{k}"] - o["brier"]) < 1e-9


def test_metrics_invariants():
    rng = np.random.default_rng(5)
    traj, scores, gt = random_prediction(rng, n=20, k=6)
    per = per_agent_metrics(traj, scores, gt, 6)
    p = scores[np.arange(20), per["mode"]]
    np.testing.assert_allclose(per["brier"] - per["fde"], (1 - p) ** 2, atol=1e-9)
    report = metrics(traj, scores, gt)
    assert 0.0 <= report["MR_6"] <= 1.0
    assert report["brier-mFDE_6"] >= report["mFDE_6"] >= 0.0
    assert report["mFDE_6"] <= report["mFDE_1"]


def test_top1_uses_highest_score():
    traj = np.zeros((1, 2, 1, 2))
    traj[0, 0, 0] = [10.0, 0.0]
    scores = np.array([[0.9, 0.1]])
    report = metrics(traj, scores, np.zeros((1, 1, 2)), ks=(1, 2))
    assert report["mFDE_1"] == 10.0 and report["mFDE_2"] == 0.0


def test_miss_threshold_is_two_meters():
    assert MISS_THRESHOLD == 2.0
    traj = np.zeros((2, 1, 1, 2))
    traj[0, 0, 0, 0] = 2.0
    traj[1, 0, 0, 0] = 2.0 + 1e-9
    report = metrics(traj, np.ones((2, 1)), np.zeros((2, 1, 2)), ks=(1,))
    assert report["MR_1"] == 0.5


def test_miss_rate_stable_under_small_perturbations():
    rng = np.random.default_rng(6)
    traj, scores, gt = random_prediction(rng, n=30, k=1)
    base = per_agent_metrics(traj, scores, gt, 1)
    margin = np.abs(base["fde"] - 2.0).min()
    shift = rng.normal(size=traj.shape)
    shift *= 0.49 * margin / np.linalg.norm(shift, axis=-1, keepdims=True)
    moved = per_agent_metrics(traj + shift, scores, gt, 1)
    np.testing.assert_array_equal(moved["miss"], base["miss"])


# optimizer

def test_adam_zero_gradient_leaves_parameters():
    p = np.array([1.0, -2.0])
    m, v = np.zeros(2), np.zeros(2)
    adam_step(p, np.zeros(2), m, v, 1, 0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    lr = 1e-3
    for g in (1e-2, 0.5, -7.0, 300.0):
        p = np.array([0.0])
        adam_step(p, np.array([g]), np.zeros(1), np.zeros(1), 1, lr)
        assert abs(abs(p[0]) - lr) < 1e-6 * lr
        assert np.sign(p[0]) == -np.sign(g)
    # for tiny gradients eps is no longer negligible: the step is lr * |g| / (|g| + eps)
    for g in (1e-3, 1e-6):
        p = np.array([0.0])
        adam_step(p, np.array([g]), np.zeros(1), np.zeros(1), 1, lr)
        assert p[0] == pytest.approx(-lr * g / (g + 1e-8), rel=1e-12)


def test_adam_matches_scalar_trace():
    rng = np.random.default_rng(7)
    grads = rng.normal(size=50)
    p, m, v = np.array([0.3]), np.zeros(1), np.zeros(1)
    trace = []
    for t, g in enumerate(grads, start=1):
        adam_step(p, np.array([g]), m, v, t, 0.01)
        trace.append(p[0])
    np.testing.assert_allclose(trace, adam_scalar(grads, 0.3, 0.01), atol=1e-12, rtol=0)


def test_adam_skips_parameters_without_gradient():
    a, b = Tensor([1.0], requires_grad=True), Tensor([2.0], requires_grad=True)
    opt = Adam([a, b])
    a.grad = np.array([1.0])
    opt.step(0.1)
    assert b.data[0] == 2.0 and a.data[0] != 1.0


# schedule

def test_lr_schedule_table():
    cfg = TrainConfig(lr=1.0, anneal_factor=0.15)
    table = [lr_at(s, 100, cfg) for s in range(100)]
    expected = [1.0] * 70 + [0.15] * 20 + [0.15**2] * 10
    np.testing.assert_allclose(table, expected, rtol=1e-15)
    assert lr_at(0, 100, cfg) == 1.0


def test_lr_milestone_inclusive():
    cfg = TrainConfig(lr=2e-4)
    assert lr_at(70, 100, cfg) == pytest.approx(2e-4 * 0.15)
    assert lr_at(69, 100, cfg) == 2e-4


@pytest.mark.parametrize("kw", [{"anneal_factor": 1.0}, {"anneal_factor": 0.0}, {"milestones": (0.9, 0.7)}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_json_round_trip():
    mc, tc = ModelConfig(**TINY), TrainConfig(epochs=3)
    assert model_config_from_dict(json.loads(json.dumps(to_dict(mc)))) == mc
    assert train_config_from_dict(json.loads(json.dumps(to_dict(tc)))) == tc
    with pytest.raises(ValueError):
        model_config_from_dict({"bogus": 1})


# augmentation

def small_scene(n_context=3):
    agents = [AgentTrack("t", [[0, 0], [1, 0]], [True, True], True)]
    agents += [AgentTrack(f"c{i}", [[i, 1], [i, 2]], [True, True]) for i in range(n_context)]
    return Scene(agents, [LanePolyline([[0, 0], [3, 4]])], {"t": [[2, 0], [3, 0]]})


def coords(scene):
    return np.concatenate([a.positions for a in scene.agents] + [l.points for l in scene.lanes]
                          + list(scene.future.values()))


def test_augment_identity():
    cfg = TrainConfig(agent_drop=0.0)
    scene = small_scene()
    out = augment(scene, np.random.default_rng(0), cfg, scale=1.0)
    np.testing.assert_array_equal(coords(out), coords(scene))


def test_augment_scale_doubles_coordinates():
    cfg = TrainConfig(agent_drop=0.0)
    scene = small_scene()
    out = augment(scene, np.random.default_rng(0), cfg, scale=2.0)
    np.testing.assert_array_equal(coords(out), 2 * coords(scene))


def test_augment_scale_range():
    cfg = TrainConfig(agent_drop=0.0)
    rng = np.random.default_rng(1)
    scales = [augment(small_scene(0), rng, cfg).future["t"][0, 0] / 2.0 for _ in range(500)]
    assert 0.75 <= min(scales) < 0.8 and 1.2 < max(scales) <= 1.25


def test_augment_drop_rate_and_targets_kept():
    cfg = TrainConfig()
    rng = np.random.default_rng(2)
    scene = small_scene(10)
    dropped = 0
    for _ in range(10_000):
        out = augment(scene, rng, cfg, scale=1.0)
        assert out.agents[0].id == "t"
        dropped += 11 - len(out.agents)
    assert abs(dropped / 100_000 - 0.1) < 0.01


# data plumbing

def test_validation_split_deterministic():
    flags = [is_validation(i) for i in range(2000)]
    assert flags == [is_validation(i) for i in range(2000)]
    assert 0.08 < np.mean(flags) < 0.12
    train_s, val_s = split_dataset(list(range(50)))
    assert len(train_s) + len(val_s) == 50 and not set(train_s) & set(val_s)


def test_agent_frame_training_samples_use_moving_extra_agents():
    scenes = tiny_scenes(20, seed=3)
    mc = ModelConfig(**{**TINY, "frame": "agent", "head": "static"})
    with_extra = training_samples(scenes, mc, TrainConfig(extended=True))
    only_main = training_samples(scenes, mc, TrainConfig(extended=False))
    assert len(only_main) == len(scenes)
    assert len(with_extra) > len(only_main)
    for s in with_extra:
        agent = s.scene.agent(s.targets[0])
        assert s.scene.frame_agent == agent.id


# training loop

def quick_train(tmp_path=None, **kw):
    mc = ModelConfig(**TINY)
    tc = TrainConfig(**{"batch_size": 4, "epochs": 2, "lr": 1e-3, "seed": 0, **kw})
    return mc, tc


def test_train_logs_and_learns(tmp_path):
    mc, tc = quick_train(epochs=6)
    log_path = tmp_path / "log.jsonl"
    result = train(tiny_scenes(12), mc, tc, val_split=False, log_path=log_path)
    lines = [json.loads(l) for l in log_path.read_text().splitlines()]
    assert lines == result.log
    assert set(lines[0]) == {"step", "lr", "loss", "L_end", "L_traj", "L_cls"}
    first = np.mean([l["loss"] for l in lines[:3]])
    last = np.mean([l["loss"] for l in lines[-3:]])
    assert last < first
    assert not result.model.training


def test_validation_reports_each_epoch():
    mc, tc = quick_train(epochs=2)
    result = train(tiny_scenes(30), mc, tc)
    assert [r["epoch"] for r in result.reports] == [1, 2]
    assert "mFDE_6" in result.reports[0]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    mc, tc = quick_train(epochs=2)
    scenes = tiny_scenes(12)
    full = train(scenes, mc, tc, val_split=False)
    ckpt = tmp_path / "ckpt.npz"
    train(scenes, mc, tc, val_split=False, checkpoint_path=ckpt, stop_after_epoch=1)
    resumed = train(scenes, mc, tc, val_split=False, resume=ckpt)
    for (name, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=name)


def test_checkpoint_round_trip(tmp_path):
    model = AdaptModel(ModelConfig(**TINY))
    opt = Adam(model.parameters())
    path = tmp_path / "m.npz"
    save_checkpoint(path, model, TrainConfig(), opt, {"epoch": 1, "step": 3})
    loaded, meta, arrays = load_checkpoint(path)
    assert meta["format"] == "adapt-ckpt/1" and meta["state"]["step"] == 3
    assert loaded.cfg == model.cfg
    for (n, p), (_, q) in zip(model.named_parameters(), loaded.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    assert any(k.startswith("adam_m/") for k in arrays)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_operation_name():
    scenes = tiny_scenes(4)
    for s in scenes:
        for a in s.agents:
            if not a.is_target:
                a.positions[:] = np.nan
                a.valid[:] = True
        s.agents[0].positions[0, 0] = np.inf
    mc, tc = quick_train(augment=False)
    with pytest.raises(TrainingError, match="first offending op: [a-z_]+"):
        train(scenes, mc, tc, val_split=False)


def test_evaluate_noise_zero_is_identity():
    model = AdaptModel(ModelConfig(**TINY))
    scenes = tiny_scenes(6)
    a = evaluate(model, scenes).to_dict()
    b = evaluate(model, scenes, noise_sigma=0.0).to_dict()
    assert a == b
    c = evaluate(model, scenes, noise_sigma=1.0).to_dict()
    assert c != a
