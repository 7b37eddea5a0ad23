import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapt.scene import (
    AGENT_CENTRIC,
    SCENE_CENTRIC,
    AgentTrack,
    LanePolyline,
    Scene,
    SceneFormatError,
    meta_info,
    rigid_transform,
    rotation,
    scene_from_dict,
    scene_to_dict,
    to_agent_frame,
    to_scene_frame,
    to_world,
    vectorize,
)
from adapt.synth import GeneratorConfig, generate_scene


def all_points(scene):
    pts = [a.positions[a.valid] for a in scene.agents]
    pts += [l.points for l in scene.lanes]
    pts += [scene.future[k] for k in sorted(scene.future)]
    return np.concatenate(pts)


def random_scene(seed):
    return generate_scene(GeneratorConfig(seed=seed, agents=(2, 5)), 0)


def assert_same_scene(a, b, atol):
    np.testing.assert_allclose(all_points(a), all_points(b), atol=atol)


# agent frame

def test_agent_frame_identity_when_already_normalized():
    agent = AgentTrack("a", [[-2.0, 0.0], [-1.0, 0.0], [0.0, 0.0]], [True] * 3, True)
    other = AgentTrack("b", [[3.0, 1.0], [3.5, 1.5], [4.0, 2.0]], [True] * 3)
    scene = Scene([agent, other], [LanePolyline([[0, -1], [5, -1]])], {"a": [[1.0, 0.0], [2.0, 0.0]]})
    out = to_agent_frame(scene, "a")
    assert_same_scene(out, scene, 1e-12)
    assert out.frame == AGENT_CENTRIC and out.frame_agent == "a"


def test_agent_frame_places_target_at_origin_heading_x():
    scene = random_scene(1)
    target = scene.targets()[0].id
    out = to_agent_frame(scene, target)
    a = out.agent(target)
    np.testing.assert_allclose(a.positions[-1], 0.0, atol=1e-9)
    d = a.positions[-1] - a.positions[-2]
    assert abs(d[1]) < 1e-9 and d[0] > 0


def test_agent_frame_round_trip_to_world():
    scene = random_scene(2)
    out = to_agent_frame(scene, scene.targets()[0].id)
    assert_same_scene(to_world(out), scene, 1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), angle=st.floats(-math.pi, math.pi), tx=st.floats(-1e3, 1e3), ty=st.floats(-1e3, 1e3))
def test_agent_frame_cancels_rigid_transforms(seed, angle, tx, ty):
    scene = random_scene(seed)
    target = scene.targets()[0].id
    moved = rigid_transform(scene, angle, (tx, ty))
    assert_same_scene(to_agent_frame(moved, target), to_agent_frame(scene, target), 1e-9)


def test_rigid_transform_inverse_recovers_scene():
    scene = random_scene(3)
    moved = rigid_transform(scene, 0.7, (10.0, -4.0))
    back = rigid_transform(moved, -0.7, -(rotation(-0.7) @ np.array([10.0, -4.0])))
    assert_same_scene(back, scene, 1e-9)


def test_transforms_preserve_pairwise_distances():
    scene = random_scene(4)
    base = all_points(scene)
    dist = np.linalg.norm(base[:, None] - base[None], axis=-1)
    for out in (to_agent_frame(scene, scene.targets()[0].id), to_scene_frame(scene), rigid_transform(scene, 2.0, (5, 5))):
        p = all_points(out)
        np.testing.assert_allclose(np.linalg.norm(p[:, None] - p[None], axis=-1), dist, atol=1e-9)


def test_stationary_target_falls_back_to_zero_yaw():
    agent = AgentTrack("a", [[2.0, 3.0]] * 4, [True] * 4, True)
    out = to_agent_frame(Scene([agent], []), "a")
    assert out.heading_fallback
    np.testing.assert_allclose(out.agent("a").positions, 0.0)


def test_agent_frame_requires_valid_last_two_steps():
    agent = AgentTrack("a", [[0, 0], [1, 0], [2, 0]], [True, False, True])
    with pytest.raises(ValueError):
        to_agent_frame(Scene([agent], []), "a")


# scene frame

def test_scene_frame_single_agent():
    agent = AgentTrack("a", [[1.0, 2.0], [3.0, 4.0]], [True, True], True)
    out = to_scene_frame(Scene([agent], []))
    np.testing.assert_allclose(out.agent("a").positions[-1], [0.0, 0.0])
    assert out.frame == SCENE_CENTRIC


def test_scene_frame_two_agents_symmetric():
    a = AgentTrack("a", [[-1.0, 0.0], [-1.0, 0.0]], [True, True])
    b = AgentTrack("b", [[1.0, 0.0], [1.0, 0.0]], [True, True])
    out = to_scene_frame(Scene([a, b], []))
    np.testing.assert_allclose(out.agent("a").positions[-1], [-1.0, 0.0])
    np.testing.assert_allclose(out.agent("b").positions[-1], [1.0, 0.0])
    np.testing.assert_allclose(out.origin, [0.0, 0.0])


def test_scene_frame_translation_invariant():
    scene = random_scene(5)
    moved = rigid_transform(scene, 0.0, (100.0, -50.0))
    assert_same_scene(to_scene_frame(moved), to_scene_frame(scene), 1e-9)


def test_scene_frame_round_trip():
    scene = random_scene(6)
    assert_same_scene(to_world(to_scene_frame(scene)), scene, 1e-9)


# meta info

def test_meta_info_stationary():
    m = meta_info(AgentTrack("a", [[2.0, 3.0], [2.0, 3.0]], [True, True]))
    np.testing.assert_array_equal(m.vector, [2, 3, 2, 3, 0])
    assert m.degenerate


def test_meta_info_diagonal_yaw():
    m = meta_info(AgentTrack("a", [[0.0, 0.0], [1.0, 1.0]], [True, True]))
    assert m.yaw == pytest.approx(math.pi / 4, abs=1e-15)


def test_meta_info_yaw_matches_atan2_and_range():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pos = rng.normal(size=(5, 2))
        m = meta_info(AgentTrack("a", pos, [True] * 5))
        d = pos[-1] - pos[-2]
        assert abs(m.yaw - math.atan2(d[1], d[0])) < 1e-12
        assert -math.pi < m.yaw <= math.pi
    m = meta_info(AgentTrack("a", [[1.0, 0.0], [0.0, 0.0]], [True, True]))
    assert m.yaw == math.pi


def test_meta_info_requires_valid_last_steps():
    with pytest.raises(ValueError):
        meta_info(AgentTrack("a", [[0, 0], [1, 0]], [True, False]))


# vectorize

def centered(agents, lanes=()):
    return to_scene_frame(Scene(agents, [LanePolyline(l) for l in lanes]))


def test_vectorize_collinear_steps():
    agent = AgentTrack("a", [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], [True] * 3, True)
    nodes = vectorize(centered([agent]))
    feats = nodes.agent_nodes[0]
    assert feats.shape == (2, 6)
    np.testing.assert_allclose(feats[:, 2:4] - feats[:, 0:2], [[1, 0], [1, 0]])
    np.testing.assert_array_equal(feats[:, 4:], np.eye(2))


def test_vectorize_drops_far_lanes():
    agent = AgentTrack("a", [[0.0, 0.0], [1.0, 0.0]], [True, True], True)
    near = [[0.0, 10.0], [5.0, 10.0]]
    far = [[0.0, 60.0], [5.0, 60.0]]
    nodes = vectorize(centered([agent], [near, far]), radius=50.0)
    assert nodes.lane_index == [0]


def test_vectorize_agents_only_scene_allowed():
    agent = AgentTrack("a", [[0.0, 0.0], [1.0, 0.0]], [True, True], True)
    nodes = vectorize(centered([agent]))
    assert nodes.lane_nodes == [] and len(nodes.agent_nodes) == 1


def test_vectorize_rejects_world_frame():
    with pytest.raises(ValueError):
        vectorize(random_scene(0))


def test_vectorize_skips_invalid_pairs():
    agent = AgentTrack("b", [[0, 0], [9, 9], [1, 0], [2, 0], [3, 0]], [True, False, True, True, True])
    target = AgentTrack("a", [[0, 1], [1, 1], [2, 1], [3, 1], [4, 1]], [True] * 5, True)
    nodes = vectorize(centered([target, agent]))
    feats = nodes.agent_nodes[1]
    # only pairs (2,3) and (3,4) are fully observed
    np.testing.assert_array_equal(np.argmax(feats[:, 4:], axis=1), [2, 3])


@pytest.mark.parametrize("seed", range(10))
def test_vectorize_node_count_and_provenance(seed):
    scene = to_scene_frame(random_scene(seed))
    nodes = vectorize(scene, radius=50.0)
    current = np.array([a.positions[-1] for a in scene.agents if a.valid[-1]])
    expected_lanes = [j for j, l in enumerate(scene.lanes)
                      if np.min(np.linalg.norm(l.points[:, None] - current[None], axis=-1)) < 50.0]
    assert nodes.lane_index == expected_lanes
    expected = sum(int((a.valid[:-1] & a.valid[1:]).sum()) for a in scene.agents)
    expected += sum(len(scene.lanes[j].points) - 1 for j in expected_lanes)
    assert nodes.n_nodes == expected
    for i, feats in zip(nodes.agent_index, nodes.agent_nodes):
        a = scene.agents[i]
        for row in feats:
            t = int(np.argmax(row[4:]))
            np.testing.assert_array_equal(row[:2], a.positions[t])
            np.testing.assert_array_equal(row[2:4], a.positions[t + 1])


# interchange format

def test_record_round_trip_through_json():
    scene = to_agent_frame(random_scene(7), random_scene(7).targets()[0].id)
    back = scene_from_dict(json.loads(json.dumps(scene_to_dict(scene))))
    assert_same_scene(back, scene, 1e-9)
    assert back.frame == scene.frame and back.frame_agent == scene.frame_agent
    assert back.theta == pytest.approx(scene.theta, abs=1e-12)
    assert [a.is_target for a in back.agents] == [a.is_target for a in scene.agents]


@pytest.mark.parametrize("mutate, path", [
    (lambda r: r.pop("dt"), "dt"),
    (lambda r: r["agents"][1].update(valid=[True]), "agents[1].valid"),
    (lambda r: r["agents"][0].update(positions=[[0, 0]]), "agents[0].positions"),
    (lambda r: r["agents"][0].pop("id"), "agents[0].id"),
    (lambda r: r.update(lanes=[[[0, 0]]]), "lanes[0]"),
    (lambda r: r.update(format="other/2"), "format"),
])
def test_record_errors_name_field_path(mutate, path):
    record = scene_to_dict(random_scene(8))
    mutate(record)
    with pytest.raises(SceneFormatError) as info:
        scene_from_dict(record)
    assert info.value.path == path


def test_target_must_be_fully_visible():
    with pytest.raises(ValueError):
        AgentTrack("a", [[0, 0], [1, 0]], [False, True], is_target=True)
