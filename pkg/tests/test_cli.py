import json
from pathlib import Path

import numpy as np
import pytest
import torch

from difftraffic import cli
from difftraffic.render import uniform_frame_steps


def run(*args):
    return cli.main([str(a) for a in args])


TINY_MODEL_FLAGS = ["--hidden", 32, "--layers", 1, "--heads", 2,
                    "--latents", 8, "--e-agents", 8, "--e-lights", 2,
                    "--window-len", 31, "--history-len", 11]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--out", out, "--rows", 1, "--cols", 1,
               "--n-scenarios", 3, "--scenario-steps", 31, "--seed", 5,
               "--initial-agents", 6, "--parked-per-lot", 0.5) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--data", dataset, "--out", out, "--steps", 3,
               "--batch-size", 2, "--seed", 1, "--window-stride", 10,
               *TINY_MODEL_FLAGS) == 0
    return out / "checkpoint.npz"


class TestGenData:
    def test_single_scenario_manifest(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--rows", 1, "--cols", 1,
                   "--n-scenarios", 1, "--scenario-steps", 31) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["n_scenarios"] == 1
        assert len(manifest["scenarios"]) == 1
        assert (tmp_path / "scenario_0000.json").exists()
        assert (tmp_path / "map.json").exists()
        assert (tmp_path / "run_config.json").exists()

    def test_same_seed_identical_checksums(self, tmp_path):
        msums = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert run("gen-data", "--out", out, "--rows", 1, "--cols", 1,
                       "--n-scenarios", 2, "--scenario-steps", 31,
                       "--seed", 9) == 0
            manifest = json.loads((out / "manifest.json").read_text())
            msums.append([e["sha256"] for e in manifest["scenarios"]]
                         + [manifest["map"]["sha256"]])
        assert msums[0] == msums[1]

    def test_archetype_counts_reported(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--rows", 2, "--cols", 2,
                   "--n-scenarios", 4, "--scenario-steps", 91,
                   "--seed", 0) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        arch = manifest["validity_archetypes"]
        assert all(arch[k] > 0 for k in
                   ("spawn", "occlusion", "disocclusion", "removal")), arch


class TestTrain:
    def test_zero_steps_checkpoint_equals_init(self, dataset, tmp_path):
        from difftraffic.model import DenoiserConfig, SceneDenoiser, load_checkpoint

        assert run("train", "--data", dataset, "--out", tmp_path, "--steps", 0,
                   "--seed", 7, *TINY_MODEL_FLAGS) == 0
        ck = load_checkpoint(tmp_path / "checkpoint.npz")
        torch.manual_seed(7)
        fresh = SceneDenoiser(ck["config"])
        for k, v in fresh.state_dict().items():
            torch.testing.assert_close(ck["model"].state_dict()[k], v,
                                       atol=0.0, rtol=0.0)

    def test_resume_equals_uninterrupted(self, dataset, tmp_path):
        from difftraffic.model import load_checkpoint

        a = tmp_path / "full"
        assert run("train", "--data", dataset, "--out", a, "--steps", 6,
                   "--batch-size", 2, "--seed", 3, "--window-stride", 10,
                   *TINY_MODEL_FLAGS) == 0
        b1 = tmp_path / "half"
        assert run("train", "--data", dataset, "--out", b1, "--steps", 3,
                   "--batch-size", 2, "--seed", 3, "--window-stride", 10,
                   *TINY_MODEL_FLAGS) == 0
        b2 = tmp_path / "resumed"
        assert run("train", "--data", dataset, "--out", b2, "--steps", 3,
                   "--batch-size", 2, "--seed", 3, "--window-stride", 10,
                   "--resume", b1 / "checkpoint.npz", *TINY_MODEL_FLAGS) == 0
        full = load_checkpoint(a / "checkpoint.npz")
        resumed = load_checkpoint(b2 / "checkpoint.npz")
        assert full["step"] == resumed["step"] == 6
        for k, v in full["model"].state_dict().items():
            torch.testing.assert_close(resumed["model"].state_dict()[k], v,
                                       atol=0.0, rtol=0.0)

    def test_loss_log_written(self, checkpoint):
        losses = json.loads((checkpoint.parent / "loss.json").read_text())
        assert len(losses) == 3


class TestRollout:
    def test_idm_pair_produces_frozen_trace(self, dataset, tmp_path):
        out = tmp_path / "ro"
        assert run("rollout", "--map", dataset / "map.json",
                   "--init-scenario", dataset / "scenario_0000.json",
                   "--out", out, "--world", "idm", "--planner", "idm",
                   "--rollout-steps", 91, "--replan", 20,
                   "--e-agents", 8, "--e-lights", 2, "--window-len", 31) == 0
        from difftraffic.traces import TraceData

        trace = TraceData.load(out / "trace.json")
        assert trace.n_steps == 91
        assert len(trace.provenance) == 4  # ceil((91 - 11) / 20)
        v = trace.valid
        for s in range(12, 91):
            np.testing.assert_array_equal(v[:, s], v[:, 11])

    def test_byte_identical_reruns(self, dataset, tmp_path):
        blobs = []
        for sub in ("r1", "r2"):
            out = tmp_path / sub
            assert run("rollout", "--map", dataset / "map.json",
                       "--init-scenario", dataset / "scenario_0000.json",
                       "--out", out, "--world", "idm", "--planner", "idm",
                       "--rollout-steps", 51, "--replan", 20,
                       "--e-agents", 8, "--e-lights", 2,
                       "--window-len", 31) == 0
            blobs.append((out / "trace.json").read_bytes())
        assert blobs[0] == blobs[1]

    def test_diffusion_roles_need_checkpoint(self, dataset, tmp_path):
        rc = run("rollout", "--map", dataset / "map.json",
                 "--init-scenario", dataset / "scenario_0000.json",
                 "--out", tmp_path / "x", "--world", "diff",
                 "--planner", "idm")
        assert rc == 2

    def test_diffusion_rollout_runs(self, dataset, checkpoint, tmp_path):
        out = tmp_path / "dro"
        assert run("rollout", "--map", dataset / "map.json",
                   "--init-scenario", dataset / "scenario_0000.json",
                   "--out", out, "--world", "diff", "--planner", "idm",
                   "--checkpoint", checkpoint, "--rollout-steps", 31,
                   "--replan", 10, "--sampler-steps", 2) == 0
        assert (out / "trace.json").exists()

    def test_frozen_variant_runs(self, dataset, checkpoint, tmp_path):
        out = tmp_path / "fro"
        assert run("rollout", "--map", dataset / "map.json",
                   "--init-scenario", dataset / "scenario_0000.json",
                   "--out", out, "--world", "diff-frozen", "--planner", "idm",
                   "--checkpoint", checkpoint, "--rollout-steps", 31,
                   "--replan", 10, "--sampler-steps", 2) == 0
        from difftraffic.traces import TraceData

        trace = TraceData.load(out / "trace.json")
        v = trace.valid
        for s in range(12, 31):
            np.testing.assert_array_equal(v[:, s], v[:, 11])


class TestEvaluate:
    def test_reference_against_itself_is_zero(self, dataset, tmp_path):
        out = tmp_path / "eval"
        assert run("evaluate", "--traces", dataset, "--reference", dataset,
                   "--map", dataset / "map.json", "--out", out,
                   "--window-len", 31, "--stride", 31) == 0
        report = json.loads((out / "report.json").read_text())
        for f, v in report["feature_jsd"].items():
            if v is not None:
                assert v == pytest.approx(0.0, abs=1e-12), f
        assert report["composite"] == pytest.approx(0.0, abs=1e-12)
        assert (out / "report.txt").exists()
        assert (out / "curves.json").exists()

    def test_idm_rollout_has_absent_tl_metrics(self, dataset, tmp_path):
        ro = tmp_path / "ro"
        assert run("rollout", "--map", dataset / "map.json",
                   "--init-scenario", dataset / "scenario_0000.json",
                   "--out", ro, "--world", "idm", "--planner", "idm",
                   "--rollout-steps", 31, "--replan", 10,
                   "--e-agents", 8, "--e-lights", 2, "--window-len", 31) == 0
        # evaluating the 31-step trace against the 31-step scenarios
        out = tmp_path / "eval"
        assert run("evaluate", "--traces", ro, "--reference", dataset,
                   "--map", dataset / "map.json", "--out", out,
                   "--window-len", 31, "--stride", 31) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["tl_transition_jsd"] is None or \
            report["tl_transition_jsd"] >= 0.0
        assert report["composite"] >= 0.0


class TestRender:
    def test_uniform_frame_arithmetic(self):
        assert uniform_frame_steps(600, 5) == [0, 150, 300, 450, 599]
        assert uniform_frame_steps(91, 1) == [0]

    def test_frames_and_raster(self, dataset, tmp_path):
        out = tmp_path / "render"
        assert run("render", "--trace", dataset / "scenario_0000.json",
                   "--map", dataset / "map.json", "--out", out,
                   "--n-frames", 3) == 0
        assert (out / "validity.png").exists()
        frames = sorted(out.glob("frame_*.png"))
        assert [f.name for f in frames] == \
            ["frame_000000.png", "frame_000016.png", "frame_000030.png"]

    def test_explicit_steps_and_range_check(self, dataset, tmp_path):
        assert run("render", "--trace", dataset / "scenario_0000.json",
                   "--map", dataset / "map.json", "--out", tmp_path / "r2",
                   "--steps", "0,5") == 0
        rc = run("render", "--trace", dataset / "scenario_0000.json",
                 "--map", dataset / "map.json", "--out", tmp_path / "r3",
                 "--steps", "99")
        assert rc == 2

    def test_empty_scene_frame(self, tmp_path):
        empty = tmp_path / "empty"
        assert run("gen-data", "--out", empty, "--rows", 1, "--cols", 1,
                   "--n-scenarios", 1, "--scenario-steps", 31,
                   "--spawn-rate", 0, "--initial-agents", 0,
                   "--parked-per-lot", 0) == 0
        out = tmp_path / "er"
        assert run("render", "--trace", empty / "scenario_0000.json",
                   "--map", empty / "map.json", "--out", out,
                   "--steps", "0") == 0
        assert (out / "frame_000000.png").exists()


class TestExitCodesAndConfig:
    def test_usage_error_is_one(self):
        assert run("gen-data") == 1          # missing --out
        assert run("no-such-command") == 1

    def test_runtime_error_is_two(self, tmp_path):
        assert run("evaluate", "--traces", tmp_path / "missing",
                   "--reference", tmp_path / "missing",
                   "--map", tmp_path / "missing.json",
                   "--out", tmp_path / "o") == 2

    def test_config_file_overrides_flags(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n-scenarios": 2, "scenario-steps": 31,
                                   "rows": 1, "cols": 1}))
        out = tmp_path / "d"
        assert run("gen-data", "--out", out, "--n-scenarios", 99,
                   "--config", cfg) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["n_scenarios"] == 2

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus-key": 1}))
        assert run("gen-data", "--out", tmp_path / "x", "--config", cfg) == 1

    def test_run_config_written_next_to_outputs(self, dataset):
        rc = json.loads((Path(dataset) / "run_config.json").read_text())
        assert rc["command"] == "gen-data"
        assert rc["seed"] == 5
