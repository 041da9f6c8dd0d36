"""The fixed-seed desk-scale benchmark recipe.

Everything the long-running evaluations need — dataset, trained model,
reference traces, closed-loop rollouts — is produced by pure functions of
the recipe constants below and cached on disk keyed by a hash of the
parameters that produced it, so repeated runs are cheap while the first
run computes everything from scratch.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import ClipMode
from .idm import IDMParams
from .model import DenoiserConfig, SceneDenoiser, load_checkpoint, save_checkpoint
from .roadmap import RoadGraph, generate_map
from .rollout import (DiffusionController, FrozenValidityController,
                      IDMController, RolloutConfig, rollout)
from .tensors import Conditioning
from .traces import TraceData
from .training import (TrainConfig, WindowDataset, ema_model,
                       generate, init_train_state, train)
from .world import Scenario, WorldScriptConfig, export_windows, simulate_ground_truth


@dataclass(frozen=True)
class BenchmarkRecipe:
    # map and world
    map_rows: int = 2
    map_cols: int = 2
    map_block_m: float = 120.0
    map_seed: int = 0
    spawn_rate: float = 0.15
    mean_initial_agents: float = 16.0
    parked_per_lot: float = 1.5
    green_s: float = 5.0
    yellow_s: float = 2.0
    red_s: float = 5.0
    # training data
    n_scenarios: int = 200
    scenario_steps: int = 121
    scenario_seed_base: int = 1000
    window_stride: int = 30
    history_len: int = 11
    # model (desk scale)
    hidden_dim: int = 96
    n_layers: int = 3
    n_heads: int = 4
    n_context_latents: int = 24
    e_agents: int = 32
    e_lights: int = 8
    window_len: int = 91
    # training
    train_steps: int = 5000
    batch_size: int = 4
    lr: float = 1e-3
    ema_decay: float = 0.995
    train_seed: int = 0
    # generation / rollout
    sample_steps: int = 16
    rollout_sampler_steps: int = 8
    n_rollout_steps: int = 600
    n_replan_steps: int = 40
    # reference data
    n_reference: int = 64
    reference_steps: int = 600
    reference_seed_base: int = 51000
    init_seed_base: int = 72000
    # metrics
    metric_stride: int = 30

    def world_config(self, seed: int) -> WorldScriptConfig:
        return WorldScriptConfig(
            spawn_rate=self.spawn_rate,
            mean_initial_agents=self.mean_initial_agents,
            parked_per_lot=self.parked_per_lot,
            green_s=self.green_s, yellow_s=self.yellow_s, red_s=self.red_s,
            seed=seed, idm=IDMParams())

    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            hidden_dim=self.hidden_dim, n_layers=self.n_layers,
            n_heads=self.n_heads, n_context_latents=self.n_context_latents,
            e_agents=self.e_agents, e_lights=self.e_lights,
            n_timesteps=self.window_len)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.train_steps, batch_size=self.batch_size,
                           lr=self.lr, seed=self.train_seed,
                           history_len=self.history_len,
                           ema_decay=self.ema_decay)

    def key(self, *parts) -> str:
        payload = json.dumps([asdict(self), parts], sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


DEFAULT_RECIPE = BenchmarkRecipe()


def get_map(recipe: BenchmarkRecipe = DEFAULT_RECIPE) -> RoadGraph:
    return generate_map(recipe.map_rows, recipe.map_cols, recipe.map_block_m,
                        seed=recipe.map_seed)


def _scenario_cache(cache_dir, tag, seeds, steps, recipe, roadgraph):
    """Generate (or reload) scripted scenarios for the given seeds."""
    root = Path(cache_dir) / f"{tag}-{recipe.key(tag, seeds, steps)}"
    root.mkdir(parents=True, exist_ok=True)
    out = []
    for i, seed in enumerate(seeds):
        path = root / f"scenario_{i:04d}.json"
        if not path.exists():
            sc = simulate_ground_truth(roadgraph, recipe.world_config(seed), steps)
            sc.save(path)
        out.append(Scenario.load(path))
    return out


def get_training_scenarios(cache_dir, recipe: BenchmarkRecipe = DEFAULT_RECIPE):
    roadgraph = get_map(recipe)
    seeds = [recipe.scenario_seed_base + i for i in range(recipe.n_scenarios)]
    return roadgraph, _scenario_cache(cache_dir, "train", seeds,
                                      recipe.scenario_steps, recipe, roadgraph)


def get_training_windows(cache_dir, recipe: BenchmarkRecipe = DEFAULT_RECIPE):
    roadgraph, scenarios = get_training_scenarios(cache_dir, recipe)
    windows = []
    for sc in scenarios:
        windows.extend(export_windows(
            sc, roadgraph, window_len=recipe.window_len,
            stride=recipe.window_stride, e_agents=recipe.e_agents,
            e_lights=recipe.e_lights, history_len=recipe.history_len))
    return roadgraph, windows


def get_model(cache_dir, recipe: BenchmarkRecipe = DEFAULT_RECIPE,
              log=None):
    """The trained benchmark model (EMA weights) plus its loss curve."""
    import torch

    path = Path(cache_dir) / f"model-{recipe.key('model')}.npz"
    loss_path = path.with_suffix(".loss.json")
    if not path.exists():
        roadgraph, windows = get_training_windows(cache_dir, recipe)
        mcfg = recipe.model_config()
        dataset = WindowDataset.build(
            [(w.multi_tensor, roadgraph, w.ego_pose) for w in windows], mcfg)
        torch.manual_seed(recipe.train_seed)
        state = init_train_state(SceneDenoiser(mcfg), recipe.train_config())
        state = train(state, dataset, recipe.train_config(), log=log)
        save_checkpoint(path, state.model, step=state.step, ema_state=state.ema)
        loss_path.write_text(json.dumps(state.loss_curve))
    ck = load_checkpoint(path)
    model = ck["model"]
    if "ema" in ck:
        model.load_state_dict(ck["ema"])
    model.eval()
    losses = json.loads(loss_path.read_text()) if loss_path.exists() else []
    return model, losses


def get_reference_traces(cache_dir, recipe: BenchmarkRecipe = DEFAULT_RECIPE):
    roadgraph = get_map(recipe)
    seeds = [recipe.reference_seed_base + i for i in range(recipe.n_reference)]
    scenarios = _scenario_cache(cache_dir, "reference", seeds,
                                recipe.reference_steps, recipe, roadgraph)
    return roadgraph, [sc.to_trace() for sc in scenarios]


def get_init_scenarios(cache_dir, n: int,
                       recipe: BenchmarkRecipe = DEFAULT_RECIPE):
    roadgraph = get_map(recipe)
    seeds = [recipe.init_seed_base + i for i in range(n)]
    return _scenario_cache(cache_dir, "init", seeds, 3 * recipe.history_len,
                           recipe, roadgraph)


def _make_controller(kind, model, roadgraph, rcfg, seed):
    if kind == "idm":
        return IDMController(roadgraph, seed=seed)
    if kind == "diff":
        return DiffusionController(model, rcfg)
    if kind == "diff-frozen":
        return FrozenValidityController(DiffusionController(model, rcfg),
                                        freeze_signals=True, name="diff-frozen")
    raise ValueError(kind)


def get_rollout_trace(cache_dir, seed_idx: int, world: str = "diff",
                      planner: str = "diff", clip_mode: ClipMode = ClipMode.SOFT,
                      n_rollout_steps: int | None = None,
                      n_replan_steps: int | None = None,
                      recipe: BenchmarkRecipe = DEFAULT_RECIPE) -> TraceData:
    """One cached closed-loop rollout of the benchmark model."""
    steps = n_rollout_steps or recipe.n_rollout_steps
    replan = n_replan_steps or recipe.n_replan_steps
    key = recipe.key("rollout", seed_idx, world, planner, clip_mode.value,
                     steps, replan)
    path = Path(cache_dir) / f"rollout-{key}.json"
    if path.exists():
        return TraceData.load(path)
    roadgraph = get_map(recipe)
    init = get_init_scenarios(cache_dir, 8, recipe)[seed_idx]
    rcfg = RolloutConfig(
        n_rollout_steps=steps, n_replan_steps=replan,
        history_len=recipe.history_len,
        sampler_steps=recipe.rollout_sampler_steps, clip_mode=clip_mode,
        world_seed=101 + 2 * seed_idx, planner_seed=102 + 2 * seed_idx,
        e_agents=recipe.e_agents, e_lights=recipe.e_lights,
        window_len=recipe.window_len)
    model = None
    if "diff" in world or "diff" in planner:
        model, _ = get_model(cache_dir, recipe)
    trace = rollout(_make_controller(world, model, roadgraph, rcfg, rcfg.world_seed),
                    _make_controller(planner, model, roadgraph, rcfg,
                                     rcfg.planner_seed),
                    init, roadgraph, rcfg)
    trace.save(path)
    return trace


def get_reference_summary(cache_dir, recipe: BenchmarkRecipe = DEFAULT_RECIPE):
    """Cached reference-side metric pools for the benchmark world."""
    from . import metrics

    path = Path(cache_dir) / f"refsummary-{recipe.key('refsummary')}.json"
    if path.exists():
        return json.loads(path.read_text())
    roadgraph, ref_traces = get_reference_traces(cache_dir, recipe)
    summary = metrics.reference_summary(ref_traces, roadgraph,
                                        window_len=recipe.window_len,
                                        stride=recipe.metric_stride)
    path.write_text(json.dumps(summary))
    return summary


def report_for(cache_dir, sim_traces, recipe: BenchmarkRecipe = DEFAULT_RECIPE):
    """Metric report of sim traces against the cached benchmark reference."""
    from . import metrics

    summary = get_reference_summary(cache_dir, recipe)
    return metrics.compute_report(sim_traces, [], get_map(recipe),
                                  window_len=recipe.window_len,
                                  stride=recipe.metric_stride,
                                  ref_summary=summary)


def get_scenegen_samples(cache_dir, n_samples: int = 64,
                         recipe: BenchmarkRecipe = DEFAULT_RECIPE) -> dict:
    """Unconditional SceneGen samples from the benchmark model (cached)."""
    key = recipe.key("scenegen", n_samples)
    path = Path(cache_dir) / f"scenegen-{key}.npz"
    if path.exists():
        with np.load(path) as z:
            return {"agents": z["agents"], "lights": z["lights"]}
    model, _ = get_model(cache_dir, recipe)
    roadgraph = get_map(recipe)
    _, windows = get_training_windows(cache_dir, recipe)
    ctx, _ = model.encode_context(roadgraph, windows[0].ego_pose)
    shapes = {"agents": (n_samples, recipe.e_agents, recipe.window_len, 12),
              "lights": (n_samples, recipe.e_lights, recipe.window_len, 13)}
    cond = Conditioning.empty(shapes)
    out = generate(model, cond, ctx, recipe.sample_steps, ClipMode.SOFT,
                   np.random.default_rng(7))
    np.savez_compressed(path, agents=out["agents"], lights=out["lights"])
    return out


def validity_durations(agents_batch) -> tuple:
    """Per-sample agent presence durations and valid-agent counts."""
    from .tensors import decompose

    durations, counts = [], []
    for b in range(agents_batch.shape[0]):
        valid = decompose(agents_batch[b])[1] >= 0.5
        per = valid.sum(axis=1)
        durations.extend(int(d) for d in per if d > 0)
        counts.append(int((per > 0).sum()))
    return durations, counts


DURATION_EDGES = np.linspace(0.0, 91.0, 14)
