import numpy as np
import pytest
import torch

from difftraffic.diffusion import ClipMode
from difftraffic.model import DenoiserConfig, SceneDenoiser
from difftraffic.rollout import (DiffusionController, FrozenValidityController,
                                 IDMController, Prediction, RolloutConfig,
                                 commit_validity, prediction_from_tensors,
                                 recenter_window, rollout)
from difftraffic.roadmap import generate_map
from difftraffic.tensors import NormConfig
from difftraffic.world import WorldScriptConfig, simulate_ground_truth


@pytest.fixture(scope="module")
def small_map():
    return generate_map(1, 1, 120.0, seed=0)


@pytest.fixture(scope="module")
def init_scenario(small_map):
    cfg = WorldScriptConfig(seed=11, mean_initial_agents=6.0,
                            parked_per_lot=0.5, spawn_rate=0.1)
    return simulate_ground_truth(small_map, cfg, 30)


SMALL = dict(e_agents=8, e_lights=2, window_len=31, history_len=11,
             n_replan_steps=10, sampler_steps=2)


def small_cfg(**kw):
    return RolloutConfig(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(7)
    return SceneDenoiser(DenoiserConfig(
        hidden_dim=32, n_layers=1, n_heads=2, n_context_latents=8,
        e_agents=8, e_lights=2, n_timesteps=31))


class TestCommitValidity:
    def test_all_confident_valid(self):
        m = np.ones((3, 4))
        assert commit_validity(m).all()

    def test_tie_break_at_threshold(self):
        m = np.array([[0.49, 0.50, 0.51]])
        assert commit_validity(m).tolist() == [[False, True, True]]

    def test_entering_and_exiting(self):
        m = np.array([[0.9, 0.1, 0.9, 0.9]])
        prev = np.array([False])
        valid, entering, exiting = commit_validity(m, 0.5, prev)
        assert valid.tolist() == [[True, False, True, True]]
        assert entering.tolist() == [[True, False, True, False]]
        assert exiting.tolist() == [[False, True, False, False]]

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            commit_validity(np.array([[1.2]]))


class TestRecenter:
    def window(self, n=4, h=5):
        rng = np.random.default_rng(0)
        return {
            "x": rng.uniform(-50, 50, (n, h)),
            "y": rng.uniform(-50, 50, (n, h)),
            "z": np.zeros((n, h)),
            "heading": rng.uniform(-3, 3, (n, h)),
            "box": np.tile(np.array([4.6, 1.9, 1.6]), (n, h, 1)),
            "type": np.ones((n, h), dtype=int),
            "valid": np.ones((n, h), dtype=bool),
            "sig_x": np.zeros((1, h)), "sig_y": np.zeros((1, h)),
            "sig_z": np.full((1, h), 5.0),
            "sig_state": np.full((1, h), 4), "sig_valid": np.ones((1, h), bool),
        }

    def test_identity_pose_is_pure_normalization(self):
        w = self.window()
        mt = recenter_window(w, (0.0, 0.0, 0.0), NormConfig(), 4, 1, 8)
        np.testing.assert_allclose(mt.agents.data[:, :5, 0] * 80.0, w["x"],
                                   atol=1e-9)

    def test_round_trip_through_prediction(self):
        w = self.window()
        pose = (12.0, -7.0, 0.8)
        mt = recenter_window(w, pose, NormConfig(), 4, 1, 8)
        x_hat = {"agents": mt.agents.data[None], "lights": mt.lights.data[None]}
        pred = prediction_from_tensors(x_hat, pose, NormConfig(), slice(0, 5))
        np.testing.assert_allclose(pred.agent_x, w["x"], atol=1e-9)
        np.testing.assert_allclose(pred.agent_y, w["y"], atol=1e-9)
        wrapped = (w["heading"] + np.pi) % (2 * np.pi) - np.pi
        np.testing.assert_allclose(pred.agent_heading, wrapped, atol=1e-9)
        np.testing.assert_allclose(pred.agent_box[..., 0], w["box"][..., 0],
                                   atol=1e-9)
        assert (pred.agent_type == 1).all()

    def test_agent_ahead_normalizes_to_unit(self):
        w = self.window(n=2, h=1)
        # ego at origin heading north; the other agent 80 m ahead
        w["x"][:] = [[0.0], [0.0]]
        w["y"][:] = [[0.0], [80.0]]
        w["heading"][:] = np.pi / 2
        mt = recenter_window(w, (0.0, 0.0, np.pi / 2), NormConfig(), 2, 1, 4)
        assert abs(mt.agents.data[1, 0, 0]) == pytest.approx(1.0, abs=1e-9)
        assert abs(mt.agents.data[1, 0, 1]) == pytest.approx(0.0, abs=1e-9)


def scripted_controller(valid_prob_fn, e_agents=8, e_lights=2):
    """Controller whose validity follows a scripted function of (slot, k)."""

    class Scripted:
        name = "scripted"

        def predict(self, history, n_steps, rng):
            w = history.window()
            vp = np.zeros((e_agents, n_steps))
            for e in range(e_agents):
                for k in range(n_steps):
                    vp[e, k] = valid_prob_fn(e, k, w)
            zeros = np.zeros((e_agents, n_steps))
            return Prediction(
                agent_x=np.repeat(w["x"][:, -1:], n_steps, 1),
                agent_y=np.repeat(w["y"][:, -1:], n_steps, 1),
                agent_z=zeros.copy(),
                agent_heading=np.repeat(w["heading"][:, -1:], n_steps, 1),
                agent_box=np.repeat(w["box"][:, -1:, :], n_steps, 1),
                agent_type=np.repeat(w["type"][:, -1:], n_steps, 1),
                agent_valid_prob=vp,
                signal_x=np.zeros((e_lights, n_steps)),
                signal_y=np.zeros((e_lights, n_steps)),
                signal_z=np.zeros((e_lights, n_steps)),
                signal_state=np.zeros((e_lights, n_steps), dtype=int),
                signal_valid_prob=np.zeros((e_lights, n_steps)),
            )

    return Scripted()


class TestEngineBasics:
    def test_trivial_rollout_equals_init(self, small_map, init_scenario):
        cfg = small_cfg(n_rollout_steps=11)
        world = IDMController(small_map, seed=1)
        planner = IDMController(small_map, seed=2)
        trace = rollout(world, planner, init_scenario, small_map, cfg)
        assert trace.n_steps == 11
        assert trace.provenance == []
        assert trace.valid[0].all()

    def test_interval_arithmetic_600_by_40(self, small_map, init_scenario):
        cfg = RolloutConfig(n_rollout_steps=600, n_replan_steps=40,
                            e_agents=8, e_lights=2)
        world = IDMController(small_map, seed=1)
        planner = IDMController(small_map, seed=2)
        trace = rollout(world, planner, init_scenario, small_map, cfg)
        assert len(trace.provenance) == 15  # ceil((600 - 11) / 40)
        assert trace.n_steps == 600

    def test_idm_world_freezes_validity(self, small_map, init_scenario):
        cfg = small_cfg(n_rollout_steps=101)
        trace = rollout(IDMController(small_map, seed=1),
                        IDMController(small_map, seed=2),
                        init_scenario, small_map, cfg)
        v = trace.valid
        # after the init window the valid set never changes
        for s in range(12, 101):
            np.testing.assert_array_equal(v[:, s], v[:, 11])
        assert not trace.signal_valid[:, 11:].any()

    def test_deterministic_trace_files(self, small_map, init_scenario, tmp_path):
        cfg = small_cfg(n_rollout_steps=51)
        paths = []
        for run in range(2):
            trace = rollout(IDMController(small_map, seed=1),
                            IDMController(small_map, seed=2),
                            init_scenario, small_map, cfg)
            p = tmp_path / f"trace_{run}.json"
            trace.save(p)
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_requires_full_history(self, small_map):
        short = simulate_ground_truth(small_map, WorldScriptConfig(seed=1), 5)
        with pytest.raises(ValueError):
            rollout(IDMController(small_map, 1), IDMController(small_map, 2),
                    short, small_map, small_cfg(n_rollout_steps=31))

    def test_replan_must_fit_window(self):
        with pytest.raises(ValueError):
            RolloutConfig(window_len=31, history_len=11, n_replan_steps=30)

    def test_length_mismatch_aborts(self, small_map, init_scenario):
        class Bad:
            name = "bad"

            def predict(self, history, n_steps, rng):
                good = IDMController(small_map, seed=3)
                return good.predict(history, max(1, n_steps - 1), rng)

        with pytest.raises(RuntimeError, match="steps"):
            rollout(Bad(), IDMController(small_map, seed=2), init_scenario,
                    small_map, small_cfg(n_rollout_steps=31))


class TestObservationContract:
    def test_history_reads_never_cover_uncommitted_steps(self, small_map,
                                                         init_scenario):
        seen = []

        class Spy:
            name = "spy"

            def __init__(self, inner):
                self.inner = inner

            def predict(self, history, n_steps, rng):
                out = self.inner.predict(history, n_steps, rng)
                seen.append((history.start, history.start + history.length,
                             list(history.access_log)))
                return out

        cfg = small_cfg(n_rollout_steps=41)
        rollout(Spy(IDMController(small_map, seed=1)),
                Spy(IDMController(small_map, seed=2)),
                init_scenario, small_map, cfg)
        expected_ends = [11, 21, 31]
        ends = sorted({e for _, e, _ in seen})
        assert ends == expected_ends
        for start, end, log in seen:
            assert end - start == cfg.history_len
            assert log, "controllers must read through the instrumented view"
            for reader, what, s, e in log:
                assert e <= end  # no read beyond committed history


class TestFrozenWrapper:
    def test_suppresses_spawns_and_exits(self, small_map, init_scenario):
        # inner spawns slot 5 and kills slot 1 immediately
        def script(e, k, w):
            if e == 5:
                return 1.0
            if e == 1:
                return 0.0
            return float(w["valid"][e, -1])

        inner = scripted_controller(script)
        frozen = FrozenValidityController(inner, freeze_signals=True)
        cfg = small_cfg(n_rollout_steps=41)
        trace = rollout(frozen, IDMController(small_map, seed=2),
                        init_scenario, small_map, cfg)
        v = trace.valid
        for s in range(12, 41):
            np.testing.assert_array_equal(v[:, s], v[:, 11])
        assert not trace.signal_valid[:, 11:].any()

    def test_inner_changes_apply_without_wrapper(self, small_map, init_scenario):
        def script(e, k, w):
            if e == 5:
                return 1.0
            if e == 1:
                return 0.0
            return float(w["valid"][e, -1])

        cfg = small_cfg(n_rollout_steps=41)
        trace = rollout(scripted_controller(script),
                        IDMController(small_map, seed=2),
                        init_scenario, small_map, cfg)
        assert trace.valid[5, 12:].all()
        assert not trace.valid[1, 12:].any()


class TestIdBookkeeping:
    def test_slot_reuse_after_gap_is_new_agent(self, small_map, init_scenario):
        gap = {"start": 12, "end": 12 + 12}  # 12 >= history_len invalid steps

        def script(e, k, w):
            return 1.0 if e == 4 else float(w["valid"][e, -1])

        class GapController:
            name = "gap"
            inner = scripted_controller(script)

            def predict(self, history, n_steps, rng):
                pred = self.inner.predict(history, n_steps, rng)
                start = history.start + history.length
                for k in range(n_steps):
                    step = start + k
                    if gap["start"] <= step < gap["end"]:
                        pred.agent_valid_prob[4, k] = 0.0
                return pred

        cfg = small_cfg(n_rollout_steps=61)
        trace = rollout(GapController(), IDMController(small_map, seed=2),
                        init_scenario, small_map, cfg)
        before = trace.agent_id[4, 11]
        after = trace.agent_id[4, gap["end"] + 1]
        assert trace.valid[4, 11] and trace.valid[4, gap["end"] + 1]
        assert before >= 0 and after >= 0 and before != after
        # ids never return after retirement
        all_ids = trace.agent_id[trace.valid]
        for aid in np.unique(all_ids):
            steps = np.sort(np.flatnonzero((trace.agent_id == aid).any(axis=0)))
            assert np.all(np.diff(steps) <= cfg.history_len)

    def test_short_gap_keeps_identity(self, small_map, init_scenario):
        gap = {"start": 12, "end": 12 + 5}  # 5 < history_len invalid steps

        def script(e, k, w):
            return 1.0 if e == 4 else float(w["valid"][e, -1])

        class GapController:
            name = "gap"
            inner = scripted_controller(script)

            def predict(self, history, n_steps, rng):
                pred = self.inner.predict(history, n_steps, rng)
                start = history.start + history.length
                for k in range(n_steps):
                    step = start + k
                    if gap["start"] <= step < gap["end"]:
                        pred.agent_valid_prob[4, k] = 0.0
                return pred

        cfg = small_cfg(n_rollout_steps=41)
        trace = rollout(GapController(), IDMController(small_map, seed=2),
                        init_scenario, small_map, cfg)
        assert trace.agent_id[4, 11] == trace.agent_id[4, gap["end"] + 1]


class TestDiffusionController:
    def test_rollout_with_random_model(self, small_map, init_scenario,
                                       tiny_model):
        cfg = small_cfg(n_rollout_steps=31, world_seed=1, planner_seed=2)
        world = DiffusionController(tiny_model, cfg)
        planner = DiffusionController(tiny_model, cfg)
        trace = rollout(world, planner, init_scenario, small_map, cfg)
        assert trace.n_steps == 31
        assert np.isfinite(trace.x).all()
        assert trace.valid[0].all()
        assert len(trace.provenance) == 2

    def test_equal_seeds_with_shared_model_rejected(self, small_map,
                                                    init_scenario, tiny_model):
        cfg = small_cfg(world_seed=3, planner_seed=3, n_rollout_steps=31)
        world = DiffusionController(tiny_model, cfg)
        planner = DiffusionController(tiny_model, cfg)
        with pytest.raises(ValueError, match="seed"):
            rollout(world, planner, init_scenario, small_map, cfg)

    def test_seed_isolation_changes_world_stream(self, small_map,
                                                 init_scenario, tiny_model):
        traces = []
        for ws in (1, 5):
            cfg = small_cfg(n_rollout_steps=31, world_seed=ws, planner_seed=2)
            trace = rollout(DiffusionController(tiny_model, cfg),
                            IDMController(small_map, seed=9),
                            init_scenario, small_map, cfg)
            traces.append(trace)
        a, b = traces
        assert not np.array_equal(a.x[1:, 11:], b.x[1:, 11:]) or \
            not np.array_equal(a.valid[1:, 11:], b.valid[1:, 11:])
        # the planner stream is identical: same controller, same seed
        np.testing.assert_array_equal(a.x[0], b.x[0])

    def test_clip_modes_run(self, small_map, init_scenario, tiny_model):
        for mode in ClipMode:
            cfg = small_cfg(n_rollout_steps=21, clip_mode=mode)
            trace = rollout(DiffusionController(tiny_model, cfg),
                            IDMController(small_map, seed=9),
                            init_scenario, small_map, cfg)
            assert trace.n_steps == 21


class TestWarnings:
    def test_teleporting_planner_logged(self, small_map, init_scenario):
        class Teleport:
            name = "teleport"
            inner = IDMController(small_map, seed=4)

            def predict(self, history, n_steps, rng):
                pred = self.inner.predict(history, n_steps, rng)
                pred.agent_x[0, :] = pred.agent_x[0, :] + \
                    np.arange(n_steps) * 50.0
                return pred

        cfg = small_cfg(n_rollout_steps=31)
        trace = rollout(IDMController(small_map, seed=1), Teleport(),
                        init_scenario, small_map, cfg)
        assert any("displacement" in w for w in trace.warnings)
