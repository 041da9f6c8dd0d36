import json

import numpy as np
import pytest

from difftraffic.geometry import polyline_length, wrap_angle
from difftraffic.roadmap import RoadGraph, generate_map
from difftraffic.tensors import SignalState, decompose
from difftraffic.world import (Scenario, WorldScriptConfig, assign_slots,
                               export_windows, occlusion_visibility,
                               simulate_ground_truth,
                               validity_archetype_counts)


@pytest.fixture(scope="module")
def small_map():
    return generate_map(1, 1, 120.0, seed=0)


@pytest.fixture(scope="module")
def grid_map():
    return generate_map(2, 2, 120.0, seed=0)


class TestGenerateMap:
    def test_single_intersection_counts(self, small_map):
        assert len(small_map.signal_heads) == 4
        assert len(small_map.stop_lines) == 4
        assert len(small_map.entry_lane_ids) == 4
        assert len(small_map.exit_lane_ids) == 4

    def test_three_by_three_intersections(self):
        g = generate_map(3, 3, 120.0, seed=1)
        # 4 approaches per node, one signal head each
        assert len(g.signal_heads) == 9 * 4

    def test_lane_graph_strongly_connected(self):
        g = generate_map(3, 3, 120.0, seed=1)
        ids = list(g.lanes)

        def reachable(start, forward=True):
            seen = {start}
            stack = [start]
            while stack:
                cur = stack.pop()
                nxt = g.lanes[cur].successors if forward else g.lanes[cur].predecessors
                for n in nxt:
                    if n not in seen:
                        seen.add(n)
                        stack.append(n)
            return seen

        assert reachable(ids[0], forward=True) == set(ids)
        assert reachable(ids[0], forward=False) == set(ids)

    def test_deterministic_per_seed(self):
        a = generate_map(2, 2, 120.0, seed=5)
        b = generate_map(2, 2, 120.0, seed=5)
        assert json.dumps(a.to_json_dict()) == json.dumps(b.to_json_dict())

    def test_different_seeds_differ(self):
        a = generate_map(2, 2, 120.0, seed=5)
        b = generate_map(2, 2, 120.0, seed=6)
        assert json.dumps(a.to_json_dict()) != json.dumps(b.to_json_dict())

    def test_rejects_bad_dimensions(self):
        with pytest.raises(ValueError):
            generate_map(0, 3)

    def test_signal_heads_reference_existing_lanes(self, grid_map):
        grid_map.validate()

    def test_serialization_round_trip(self, grid_map, tmp_path):
        p = tmp_path / "map.json"
        grid_map.save(p)
        back = RoadGraph.load(p)
        assert json.dumps(back.to_json_dict()) == \
            json.dumps(grid_map.to_json_dict())

    def test_parking_lots_off_road(self, grid_map):
        for poly in grid_map.parking_polygons:
            center = poly.mean(axis=0)
            assert not grid_map.is_on_road(center)


class TestSimulate:
    def test_zero_spawn_rate_only_ego(self, small_map):
        cfg = WorldScriptConfig(spawn_rate=0.0, mean_initial_agents=0.0,
                                parked_per_lot=0.0, seed=1)
        sc = simulate_ground_truth(small_map, cfg, 50)
        assert len(sc.tracks) == 1
        assert sc.tracks[0].id == 0
        assert sc.agent_visible[0].all()

    def test_signal_cycle_period_and_transitions(self, small_map):
        cfg = WorldScriptConfig(green_s=5.0, yellow_s=2.0, red_s=5.0, seed=1)
        sc = simulate_ground_truth(small_map, cfg, 240)
        allowed = {(SignalState.GREEN, SignalState.YELLOW),
                   (SignalState.YELLOW, SignalState.RED),
                   (SignalState.RED, SignalState.GREEN)}
        for sig in sc.signals:
            states = sig.states
            np.testing.assert_array_equal(states[:120], states[120:240])
            for a, b in zip(states[:-1], states[1:]):
                if a != b:
                    assert (SignalState(a), SignalState(b)) in allowed
            # each of G/Y/R occupies its configured share of the period
            assert (states[:120] == SignalState.GREEN).sum() == 50
            assert (states[:120] == SignalState.YELLOW).sum() == 20
            assert (states[:120] == SignalState.RED).sum() == 50

    def test_agent_exits_at_boundary(self, small_map):
        cfg = WorldScriptConfig(spawn_rate=0.0, mean_initial_agents=0.0,
                                parked_per_lot=0.0, seed=2)
        sc = simulate_ground_truth(small_map, cfg, 400)
        ego = sc.tracks[0]
        assert ego.death_step == 400  # the ego never leaves

    def test_deterministic(self, small_map):
        cfg = WorldScriptConfig(seed=3)
        a = simulate_ground_truth(small_map, cfg, 60)
        b = simulate_ground_truth(small_map, cfg, 60)
        assert json.dumps(a.to_json_dict()) == json.dumps(b.to_json_dict())

    def test_poses_continuous(self, grid_map):
        sc = simulate_ground_truth(grid_map, WorldScriptConfig(seed=4), 120)
        for t in sc.tracks:
            sl = slice(t.birth_step, t.death_step)
            d = np.hypot(np.diff(t.pos[sl, 0]), np.diff(t.pos[sl, 1]))
            assert np.all(d <= 12.0 * 0.1 + 0.5)

    def test_birth_before_death(self, grid_map):
        sc = simulate_ground_truth(grid_map, WorldScriptConfig(seed=4), 120)
        for t in sc.tracks:
            assert t.birth_step <= t.death_step

    def test_scenario_round_trip(self, small_map, tmp_path):
        sc = simulate_ground_truth(small_map, WorldScriptConfig(seed=5), 40)
        p = tmp_path / "scenario.json"
        sc.save(p)
        back = Scenario.load(p)
        assert json.dumps(back.to_json_dict()) == json.dumps(sc.to_json_dict())

    def test_trace_view(self, small_map):
        sc = simulate_ground_truth(small_map, WorldScriptConfig(seed=5), 40)
        tr = sc.to_trace()
        assert tr.n_steps == 40
        assert tr.valid.shape[0] == len(sc.tracks)
        assert tr.valid[0].all()
        assert (tr.agent_id[0] == 0).all()


class TestOcclusion:
    def test_lone_agent_ahead_visible(self):
        pos = np.array([[0.0, 0.0], [10.0, 0.0]])
        headings = np.zeros(2)
        boxes = np.array([[4.6, 1.9], [4.6, 1.9]])
        vis, _ = occlusion_visibility(pos, headings, boxes, [True, True], 0,
                                      np.zeros((0, 3)), 100.0)
        assert vis.tolist() == [True, True]

    def test_pedestrian_hidden_behind_bus(self):
        # ego at origin, a bus at 10 m, a pedestrian right behind it
        pos = np.array([[0.0, 0.0], [10.0, 0.0], [16.0, 0.0]])
        headings = np.zeros(3)
        boxes = np.array([[4.6, 1.9], [12.0, 2.5], [0.5, 0.5]])
        vis, _ = occlusion_visibility(pos, headings, boxes,
                                      [True, True, True], 0,
                                      np.zeros((0, 3)), 100.0)
        assert vis.tolist() == [True, True, False]

    def test_range_cut(self):
        pos = np.array([[0.0, 0.0], [150.0, 0.0]])
        vis, _ = occlusion_visibility(pos, np.zeros(2),
                                      np.array([[4.6, 1.9]] * 2),
                                      [True, True], 0, np.zeros((0, 3)), 100.0)
        assert vis.tolist() == [True, False]

    def test_ego_always_visible(self):
        pos = np.array([[0.0, 0.0]])
        vis, _ = occlusion_visibility(pos, np.zeros(1), np.array([[4.6, 1.9]]),
                                      [True], 0, np.zeros((0, 3)), 100.0)
        assert vis.tolist() == [True]

    def test_signals_blocked_and_ranged(self):
        pos = np.array([[0.0, 0.0], [10.0, 0.0]])
        sigs = np.array([[16.0, 0.0, 5.0], [0.0, 150.0, 5.0], [0.0, 20.0, 5.0]])
        _, svis = occlusion_visibility(pos, np.zeros(2),
                                       np.array([[4.6, 1.9], [12.0, 2.5]]),
                                       [True, True], 0, sigs, 100.0)
        assert svis.tolist() == [False, False, True]

    def test_no_blockers_everything_in_range_visible(self, grid_map):
        sc = simulate_ground_truth(
            grid_map, WorldScriptConfig(seed=6, spawn_rate=0.0,
                                        mean_initial_agents=0.0,
                                        parked_per_lot=0.0), 30)
        # only the ego exists: all in-range signals must be visible
        for step in range(30):
            ego = sc.ego_pose(step)
            for k, sig in enumerate(sc.signals):
                d = np.hypot(sig.position[0] - ego[0], sig.position[1] - ego[1])
                if d <= 100.0:
                    assert sc.signal_visible[k, step]


class TestAssignSlots:
    def test_reuse_respects_history_gap(self):
        w = 40
        vis = np.zeros((2, w), dtype=bool)
        vis[0, 0:10] = True      # occupant dies at step 9
        vis[1, 25:] = True       # next agent appears at 25 (gap 15 >= 11)
        dist = np.ones((2, w))
        slot_of, slot_valid, _ = assign_slots(vis, dist, 1, history_len=11)
        assert slot_of.tolist() == [0, 0]
        assert slot_valid[0, 0:10].all() and slot_valid[0, 25:].all()

    def test_no_reuse_within_gap(self):
        w = 30
        vis = np.zeros((2, w), dtype=bool)
        vis[0, 0:10] = True
        vis[1, 15:] = True       # gap 5 < 11: needs its own slot
        dist = np.ones((2, w))
        slot_of, _, _ = assign_slots(vis, dist, 1, history_len=11)
        assert slot_of[0] == 0
        assert slot_of[1] == -1  # dropped, no free slot

    def test_nearest_first_on_overflow(self):
        w = 10
        vis = np.ones((3, w), dtype=bool)
        dist = np.stack([np.full(w, 30.0), np.full(w, 10.0), np.full(w, 20.0)])
        slot_of, _, _ = assign_slots(vis, dist, 2, history_len=11)
        assert slot_of[1] == 0   # nearest gets the first slot
        assert slot_of[2] == 1
        assert slot_of[0] == -1  # farthest dropped

    def test_concurrent_agents_get_distinct_slots(self):
        vis = np.ones((4, 20), dtype=bool)
        dist = np.ones((4, 20))
        slot_of, _, _ = assign_slots(vis, dist, 8, history_len=11)
        used = slot_of[slot_of >= 0]
        assert len(np.unique(used)) == len(used) == 4


class TestExportWindows:
    @pytest.fixture(scope="class")
    def scenario(self, grid_map):
        return simulate_ground_truth(grid_map, WorldScriptConfig(seed=7), 151)

    def test_window_count(self, scenario, grid_map):
        wins = export_windows(scenario, grid_map, window_len=91, stride=91)
        assert len(wins) == 1
        wins = export_windows(scenario, grid_map, window_len=91, stride=30)
        assert len(wins) == 3

    def test_too_short_rejected(self, small_map):
        sc = simulate_ground_truth(small_map, WorldScriptConfig(seed=1), 50)
        with pytest.raises(ValueError):
            export_windows(sc, small_map, window_len=91)

    def test_ego_at_anchor_is_origin(self, scenario, grid_map):
        wins = export_windows(scenario, grid_map, history_len=11)
        a = wins[0].multi_tensor.agents.data
        anchor = 10  # history_len - 1
        assert a[0, anchor, 0] == pytest.approx(0.0, abs=1e-9)
        assert a[0, anchor, 1] == pytest.approx(0.0, abs=1e-9)
        assert a[0, anchor, 3] == pytest.approx(0.0, abs=1e-9)
        assert a[0, :, -1].min() == 1.0  # ego valid throughout

    def test_validity_matches_visibility_pattern(self, scenario, grid_map):
        wins = export_windows(scenario, grid_map)
        w = wins[0]
        a = w.multi_tensor.agents.data
        for slot in range(1, 32):
            tensor_valid = a[slot, :, -1] > 0
            union = np.zeros(91, dtype=bool)
            for aid, first, last in w.agent_slot_occupancy[slot]:
                row = next(i for i, t in enumerate(scenario.tracks)
                           if t.id == aid)
                vis = scenario.agent_visible[row, w.start_step:w.start_step + 91]
                seg = np.zeros(91, dtype=bool)
                seg[first:last + 1] = vis[first:last + 1]
                union |= seg
            # slot validity is exactly the union of its occupants' visibility
            np.testing.assert_array_equal(tensor_valid, union)

    def test_slot_reuse_never_overlaps(self, scenario, grid_map):
        for w in export_windows(scenario, grid_map, stride=30):
            for occ in w.agent_slot_occupancy:
                occ = sorted(occ, key=lambda rec: rec[1])
                for (_, _, last_a), (_, first_b, _) in zip(occ, occ[1:]):
                    assert first_b - last_a > 11  # history gap respected

    def test_spawn_pattern_imputed(self, scenario, grid_map):
        wins = export_windows(scenario, grid_map)
        a = wins[0].multi_tensor.agents.data
        valid = a[..., -1] > 0
        spawners = [e for e in range(32)
                    if not valid[e, 0] and valid[e].any()]
        assert spawners, "expected at least one spawning agent in the window"
        e = spawners[0]
        first = int(np.argmax(valid[e]))
        assert np.all(a[e, :first, :-1] == 0.0)
        assert np.all(a[e, :first, -1] == -1.0)

    def test_archetypes_present_at_default_config(self, grid_map):
        counts = {"spawn": 0, "occlusion": 0, "disocclusion": 0, "removal": 0}
        for seed in range(4):
            sc = simulate_ground_truth(grid_map, WorldScriptConfig(seed=seed), 91)
            wins = export_windows(sc, grid_map)
            valid = wins[0].multi_tensor.agents.data[1:, :, -1] > 0
            for k, v in validity_archetype_counts(valid).items():
                counts[k] += v
        assert all(v > 0 for v in counts.values()), counts

    def test_normalized_within_bounds(self, scenario, grid_map):
        for w in export_windows(scenario, grid_map, stride=30):
            w.multi_tensor.agents.validate()
            w.multi_tensor.lights.validate()

    def test_light_states_one_hot(self, scenario, grid_map):
        wins = export_windows(scenario, grid_map)
        l = wins[0].multi_tensor.lights.data
        lvalid = l[..., -1] > 0
        assert lvalid.any(), "expected visible lights in the window"
        onehot = l[..., 3:12]
        hot_count = (onehot[lvalid] == 1.0).sum(axis=-1)
        np.testing.assert_array_equal(hot_count, 1)
