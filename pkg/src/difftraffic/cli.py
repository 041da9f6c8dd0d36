"""Operator command line: data generation, training, rollout, evaluation,
rendering. Every run writes its resolved configuration next to its
outputs so any artifact can be re-derived.

Exit codes: 0 success, 1 usage error, 2 runtime abort. Precedence:
built-in defaults, then command-line flags, then --config file entries.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .diffusion import ClipMode
from .roadmap import RoadGraph, generate_map
from .traces import TraceData
from .world import (Scenario, WorldScriptConfig, export_windows,
                    simulate_ground_truth, validity_archetype_counts)

CONTROLLER_KINDS = ("diff", "diff-frozen", "idm")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _apply_thread_env():
    n = os.environ.get("DIFFTRAFFIC_THREADS")
    if n:
        import torch

        torch.set_num_threads(int(n))


def _write_run_config(out_dir: Path, payload: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=str))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_trace_file(path) -> TraceData:
    """Load either a rollout trace or a ground-truth scenario as a trace."""
    d = json.loads(Path(path).read_text())
    if "tracks" in d:
        return Scenario.from_json_dict(d).to_trace()
    return TraceData.from_json_dict(d)


def load_trace_dir(path) -> list:
    files = sorted(p for p in Path(path).glob("*.json")
                   if p.name not in ("manifest.json", "map.json",
                                     "run_config.json", "report.json",
                                     "curves.json", "loss.json"))
    if not files:
        raise FileNotFoundError(f"no trace files in {path}")
    return [load_trace_file(p) for p in files]


def load_dataset(path):
    """(roadgraph, scenarios) from a gen-data output directory."""
    root = Path(path)
    roadgraph = RoadGraph.load(root / "map.json")
    scenarios = [Scenario.load(p) for p in sorted(root.glob("scenario_*.json"))]
    if not scenarios:
        raise FileNotFoundError(f"no scenario files in {path}")
    return roadgraph, scenarios


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    roadgraph = generate_map(args.rows, args.cols, args.block_size, seed=args.seed)
    roadgraph.save(out / "map.json")
    wcfg_base = {
        "spawn_rate": args.spawn_rate, "mean_initial_agents": args.initial_agents,
        "parked_per_lot": args.parked_per_lot, "green_s": args.green,
        "yellow_s": args.yellow, "red_s": args.red,
        "max_range_m": args.max_range, "occlusion": not args.no_occlusion,
    }
    entries = []
    archetypes = {"spawn": 0, "occlusion": 0, "disocclusion": 0, "removal": 0}
    for i in range(args.n_scenarios):
        seed = args.seed * 100_000 + i
        cfg = WorldScriptConfig(seed=seed, **wcfg_base)
        scenario = simulate_ground_truth(roadgraph, cfg, args.scenario_steps)
        path = out / f"scenario_{i:04d}.json"
        scenario.save(path)
        counts = validity_archetype_counts(scenario.agent_visible)
        for k in archetypes:
            archetypes[k] += counts[k]
        entries.append({"file": path.name, "seed": seed,
                        "n_agents": len(scenario.tracks),
                        "sha256": _sha256(path)})
    manifest = {
        "n_scenarios": args.n_scenarios,
        "scenario_steps": args.scenario_steps,
        "map": {"rows": args.rows, "cols": args.cols,
                "block_size": args.block_size, "seed": args.seed,
                "sha256": _sha256(out / "map.json")},
        "world_config": wcfg_base,
        "validity_archetypes": archetypes,
        "scenarios": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _write_run_config(out, {"command": "gen-data", **vars(args)})
    print(f"wrote {args.n_scenarios} scenarios to {out}")
    return 0


def cmd_train(args) -> int:
    _apply_thread_env()
    import torch

    from .model import DenoiserConfig, SceneDenoiser, load_checkpoint, save_checkpoint
    from .training import (TrainConfig, WindowDataset, init_train_state,
                           resume_train_state, train)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    roadgraph, scenarios = load_dataset(args.data)

    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                       seed=args.seed, history_len=args.history_len,
                       ema_decay=args.ema_decay)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        state = resume_train_state(ckpt, tcfg)
        mcfg = state.model.cfg
    else:
        mcfg = DenoiserConfig(hidden_dim=args.hidden, n_layers=args.layers,
                              n_heads=args.heads, n_context_latents=args.latents,
                              e_agents=args.e_agents, e_lights=args.e_lights,
                              n_timesteps=args.window_len)
        torch.manual_seed(args.seed)
        state = init_train_state(SceneDenoiser(mcfg), tcfg)

    windows = []
    for sc in scenarios:
        for w in export_windows(sc, roadgraph, window_len=mcfg.n_timesteps,
                                stride=args.window_stride, e_agents=mcfg.e_agents,
                                e_lights=mcfg.e_lights,
                                history_len=args.history_len):
            windows.append((w.multi_tensor, roadgraph, w.ego_pose))
    dataset = WindowDataset.build(windows, mcfg)
    print(f"training on {len(dataset)} windows from {len(scenarios)} scenarios")

    state = train(state, dataset, tcfg, log=print)
    save_checkpoint(out / "checkpoint.npz", state.model, state.optimizer,
                    step=state.step, rng_numpy=state.rng_np,
                    rng_torch=state.rng_torch, ema_state=state.ema)
    (out / "loss.json").write_text(json.dumps(state.loss_curve))
    _write_run_config(out, {"command": "train", **vars(args),
                            "model_config": mcfg.__dict__,
                            "n_windows": len(dataset)})
    if state.loss_curve:
        print(f"final loss {state.loss_curve[-1]:.5f} at step {state.step}")
    return 0


def make_controller(kind: str, roadgraph, rcfg, model=None, idm_seed: int = 0):
    from .rollout import DiffusionController, FrozenValidityController, IDMController

    if kind == "idm":
        return IDMController(roadgraph, seed=idm_seed)
    if model is None:
        raise ValueError(f"controller '{kind}' needs a checkpoint")
    if kind == "diff":
        return DiffusionController(model, rcfg)
    if kind == "diff-frozen":
        return FrozenValidityController(DiffusionController(model, rcfg),
                                        freeze_signals=True, name="diff-frozen")
    raise ValueError(f"unknown controller kind {kind!r}")


def cmd_rollout(args) -> int:
    _apply_thread_env()
    from .rollout import RolloutConfig, rollout

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    roadgraph = RoadGraph.load(args.map)
    init_scenario = Scenario.load(args.init_scenario)

    model = None
    if any(kind.startswith("diff") for kind in (args.world, args.planner)):
        from .model import load_checkpoint

        if not args.checkpoint:
            raise ValueError("--checkpoint is required for diffusion controllers")
        ckpt = load_checkpoint(args.checkpoint)
        model = ckpt["model"]
        model.eval()
    rcfg = RolloutConfig(
        n_rollout_steps=args.rollout_steps, n_replan_steps=args.replan,
        history_len=args.history_len, sampler_steps=args.sampler_steps,
        clip_mode=ClipMode(args.clip_mode), world_seed=args.world_seed,
        planner_seed=args.planner_seed,
        e_agents=model.cfg.e_agents if model else args.e_agents,
        e_lights=model.cfg.e_lights if model else args.e_lights,
        window_len=model.cfg.n_timesteps if model else args.window_len)

    world = make_controller(args.world, roadgraph, rcfg, model,
                            idm_seed=args.world_seed)
    planner = make_controller(args.planner, roadgraph, rcfg, model,
                              idm_seed=args.planner_seed)
    trace = rollout(world, planner, init_scenario, roadgraph, rcfg)
    trace.save(out / "trace.json")
    _write_run_config(out, {"command": "rollout", **vars(args),
                            "rollout_config": rcfg.to_dict()})
    print(f"rolled out {trace.n_steps} steps "
          f"({len(trace.provenance)} replan intervals) to {out}")
    return 0


def cmd_evaluate(args) -> int:
    from . import metrics

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = load_trace_dir(args.traces)
    ref = load_trace_dir(args.reference)
    roadgraph = RoadGraph.load(args.map)
    report = metrics.compute_report(sim, ref, roadgraph,
                                    window_len=args.window_len, stride=args.stride)
    metrics.save_report(report, out / "report.json", out / "report.txt")
    curves = {}
    for f, v in report.feature_jsd.items():
        if v is None:
            continue
        curves[f] = metrics.jsd_curve(sim, ref, f, roadgraph,
                                      window_len=args.window_len, stride=args.stride)
    (out / "curves.json").write_text(json.dumps(curves, indent=2, sort_keys=True))
    _write_run_config(out, {"command": "evaluate", **vars(args)})
    print(report.to_text_table())
    return 0


def cmd_render(args) -> int:
    from . import render

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace = load_trace_file(args.trace)
    roadgraph = RoadGraph.load(args.map)
    if args.steps:
        steps = [int(s) for s in args.steps.split(",")]
    else:
        steps = render.uniform_frame_steps(trace.n_steps, args.n_frames)
    for s in steps:
        render.draw_frame(trace, roadgraph, s, out / f"frame_{s:06d}.png")
    render.validity_raster(trace, out / "validity.png")
    _write_run_config(out, {"command": "render", **vars(args), "steps": steps})
    print(f"wrote {len(steps)} frames and the validity raster to {out}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="difftraffic",
                description="diffusion traffic world simulation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scenario dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-scenarios", type=int, default=10)
    g.add_argument("--scenario-steps", type=int, default=91)
    g.add_argument("--rows", type=int, default=2)
    g.add_argument("--cols", type=int, default=2)
    g.add_argument("--block-size", type=float, default=120.0)
    g.add_argument("--spawn-rate", type=float, default=0.12)
    g.add_argument("--initial-agents", type=float, default=12.0)
    g.add_argument("--parked-per-lot", type=float, default=1.2)
    g.add_argument("--green", type=float, default=5.0)
    g.add_argument("--yellow", type=float, default=2.0)
    g.add_argument("--red", type=float, default=5.0)
    g.add_argument("--max-range", type=float, default=100.0)
    g.add_argument("--no-occlusion", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the scene denoiser")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--ema-decay", type=float, default=None)
    t.add_argument("--resume")
    t.add_argument("--hidden", type=int, default=128)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--latents", type=int, default=32)
    t.add_argument("--e-agents", type=int, default=32)
    t.add_argument("--e-lights", type=int, default=8)
    t.add_argument("--window-len", type=int, default=91)
    t.add_argument("--window-stride", type=int, default=91)
    t.add_argument("--history-len", type=int, default=11)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("rollout", help="closed-loop world/planner rollout")
    r.add_argument("--map", required=True)
    r.add_argument("--init-scenario", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--checkpoint")
    r.add_argument("--world", choices=CONTROLLER_KINDS, default="diff")
    r.add_argument("--planner", choices=CONTROLLER_KINDS, default="diff")
    r.add_argument("--rollout-steps", type=int, default=600)
    r.add_argument("--replan", type=int, default=40)
    r.add_argument("--history-len", type=int, default=11)
    r.add_argument("--sampler-steps", type=int, default=32)
    r.add_argument("--clip-mode", choices=[m.value for m in ClipMode],
                   default="soft")
    r.add_argument("--world-seed", type=int, default=1)
    r.add_argument("--planner-seed", type=int, default=2)
    r.add_argument("--e-agents", type=int, default=32)
    r.add_argument("--e-lights", type=int, default=8)
    r.add_argument("--window-len", type=int, default=91)
    r.set_defaults(fn=cmd_rollout)

    e = sub.add_parser("evaluate", help="metric report: sim traces vs reference")
    e.add_argument("--traces", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--map", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--window-len", type=int, default=91)
    e.add_argument("--stride", type=int, default=91)
    e.set_defaults(fn=cmd_evaluate)

    d = sub.add_parser("render", help="render trace frames and validity raster")
    d.add_argument("--trace", required=True)
    d.add_argument("--map", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.add_argument("--n-frames", type=int, default=5)
    d.add_argument("--steps", help="comma-separated step indices")
    d.set_defaults(fn=cmd_render)
    return p


def _apply_config_file(args):
    if getattr(args, "config", None):
        overrides = json.loads(Path(args.config).read_text())
        for key, value in overrides.items():
            dest = key.replace("-", "_")
            if not hasattr(args, dest):
                raise _UsageError(f"unknown config key {key!r}")
            setattr(args, dest, value)


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        _apply_config_file(args)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
