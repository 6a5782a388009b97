"""Command-line entry point: gen-data, train, distill, generate, bench, serve, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import bench as bench_mod
from . import pipeline, report
from .config import ConfigError, RunConfig, load_config, save_config
from .dataset import generate_dataset, load_split
from .model import PRESETS, config_from_preset
from .sampling import SampleConfig
from .world import action_id


def _load_run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return RunConfig()


def _store_config(out_dir: Path, cfg: RunConfig) -> None:
    save_config(out_dir / "config.json", cfg)


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    data = cfg.data
    if args.episodes:
        data = dataclasses.replace(data, num_episodes=args.episodes)
    if args.length:
        data = dataclasses.replace(data, episode_length=args.length)
    if args.seed is not None:
        data = dataclasses.replace(data, seed=args.seed)
    out = Path(args.out)
    meta = generate_dataset(
        out, data.num_episodes, data.episode_length, seed=data.seed,
        repeat_p=data.repeat_p, config=cfg.world,
        val_frac=data.val_frac, test_frac=data.test_frac,
    )
    _store_config(out, dataclasses.replace(cfg, data=data))
    print(f"wrote {meta.split_sizes} episodes of length {meta.episode_length} to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    model_cfg = config_from_preset(args.preset, conditioning=args.conditioning) if args.preset else cfg.model
    if args.conditioning and not args.preset:
        model_cfg = dataclasses.replace(model_cfg, conditioning=args.conditioning)
    train_cfg = cfg.train
    if args.steps:
        train_cfg = dataclasses.replace(train_cfg, steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _store_config(out, dataclasses.replace(cfg, model=model_cfg, train=train_cfg))
    ckpt = pipeline.train_base(args.data, model_cfg, train_cfg, out, patch=cfg.data.patch, progress=True)
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.stage == "finetune":
        ft_cfg = cfg.finetune
        if args.steps:
            ft_cfg = dataclasses.replace(ft_cfg, steps=args.steps)
        _store_config(out, dataclasses.replace(cfg, finetune=ft_cfg))
        ckpt = pipeline.train_base(args.data, cfg.model, ft_cfg, out,
                                   patch=cfg.data.patch, progress=True,
                                   init_from=args.teacher, ckpt_name="finetuned.pt")
        print(f"stage-1 fine-tuned checkpoint written to {ckpt}")
        return 0
    d_cfg = cfg.distill
    if args.steps:
        d_cfg = dataclasses.replace(d_cfg, steps=args.steps)
    if args.lambda_adv is not None:
        d_cfg = dataclasses.replace(d_cfg, lambda_adv=args.lambda_adv)
    _store_config(out, dataclasses.replace(cfg, distill=d_cfg))
    ckpt = pipeline.run_distill(args.teacher, args.data, d_cfg, out, progress=True)
    print(f"distilled student written to {ckpt}")
    return 0


def read_action_file(path: str | Path) -> list[int]:
    ids = []
    for line in Path(path).read_text().splitlines():
        name = line.strip()
        if name:
            ids.append(action_id(name))
    if not ids:
        raise ValueError(f"action file {path} contains no actions")
    return ids


def cmd_generate(args) -> int:
    cfg = _load_run_config(args)
    actions = read_action_file(args.actions)
    overrides = dict(mode=args.mode, num_steps=args.steps, speculative_n=args.speculative,
                     use_kv_cache=None if not args.no_kv_cache else False)
    trace = pipeline.generate_to_dir(args.ckpt, actions, args.out, seed=args.seed,
                                     world_config=cfg.world, **overrides)
    print(json.dumps(trace["spec_stats"]))
    return 0


def cmd_bench(args) -> int:
    cfg = _load_run_config(args)
    episodes = load_split(args.data, "test")[: cfg.bench.quality_episodes] if args.data else None
    out_path = Path(args.out) if args.out else None
    if args.suite:
        ckpt_dir = Path(args.ckpt_dir or ".")
        names = ["student", "cond_adaln_zero", "cond_cross_attention", "cond_in_context",
                 "scm_adv_0.0_1.6", "scm_adv_0.2_1.6", "scm_0.0_1.6", "scm_0.2_1.6"]
        ckpts = {n: p if (p := ckpt_dir / f"{n}.pt").exists() else None for n in names}
        reports = bench_mod.ablation_suite(ckpts, episodes=episodes,
                                           num_frames=cfg.bench.num_frames, trials=cfg.bench.trials)
    else:
        sample_cfg = SampleConfig(
            mode=args.mode or "ode", num_steps=args.steps or (4 if args.mode == "consistency" else 18),
            speculative_n=args.speculative or 1, use_kv_cache=not args.no_kv_cache,
        )
        row = bench_mod.bench_row("bench", args.ckpt, sample_cfg,
                                  warmup=cfg.bench.warmup, num_frames=cfg.bench.num_frames,
                                  trials=cfg.bench.trials, episodes=episodes)
        reports = [row]
    print(report.render_text_table(reports))
    if out_path:
        bench_mod.write_reports(reports, out_path)
        print(f"reports written to {out_path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    cfg = _load_run_config(args)
    svc = cfg.service
    app = create_app(args.ckpt_dir, max_sessions=args.max_sessions or svc.max_sessions,
                     queue_bound=svc.queue_bound, idle_timeout=svc.idle_timeout,
                     world_config=cfg.world)
    uvicorn.run(app, host=svc.host, port=args.port or svc.port, log_level="warning")
    return 0


def cmd_report(args) -> int:
    written = report.write_report_bundle(args.run, args.out)
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="framecast",
                                description="action-conditioned next-frame generation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="simulate and write an episode dataset")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--length", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train the base velocity model")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--conditioning", choices=["adaln_zero", "cross_attention", "in_context"])
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("distill", help="two-stage distillation into a few-step student")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stage", choices=["finetune", "distill"], default="distill")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lambda-adv", type=float, dest="lambda_adv")
    sp.set_defaults(fn=cmd_distill)

    sp = sub.add_parser("generate", help="offline rollout from an action file")
    sp.add_argument("--config")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--actions", required=True, help="newline-delimited action names")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mode", choices=["ode", "consistency"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--speculative", type=int)
    sp.add_argument("--no-kv-cache", action="store_true")
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("bench", help="throughput/quality rows or the full ablation suite")
    sp.add_argument("--config")
    sp.add_argument("--ckpt")
    sp.add_argument("--ckpt-dir")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--suite", action="store_true")
    sp.add_argument("--mode", choices=["ode", "consistency"])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--speculative", type=int)
    sp.add_argument("--no-kv-cache", action="store_true")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("serve", help="run the interactive generation service")
    sp.add_argument("--config")
    sp.add_argument("--ckpt-dir", required=True)
    sp.add_argument("--port", type=int)
    sp.add_argument("--max-sessions", type=int)
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("report", help="render CSV tables and figures for a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
