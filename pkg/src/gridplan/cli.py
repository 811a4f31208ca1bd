"""Command-line interface.

Subcommands: gen-data, train, eval, experiment, inspect-plan.  Every command
is a thin wrapper over library calls and is reproducible from its flags plus
the config file; the only environment overrides honoured are GRIDPLAN_OUT_DIR
and GRIDPLAN_WORKERS.

Exit codes: 0 success, 2 usage error, 3 data or config error, 4 training or
sampling fault.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import data as data_mod
from .agents import get_agent
from .baselines import train_goal_policy, train_il
from .checkpoint import CheckpointError, load_arrays
from .config import (
    ConfigError,
    ExperimentConfig,
    apply_env_overrides,
    desk_profile,
    get_profile,
    load_config,
)
from .diffusion import DiffusionError, SamplerFault, TrainingFault
from .env import DecodeError, EnvConfig, EnvError, EnvKind, encode_observation, normalize, reset
from .experiments import PROTOCOLS, format_summary, run_experiment
from .inverse_dynamics import IvdError, IvdTrainConfig, load_ivd, train_ivd
from .planner import (
    ConditioningMode,
    OodAgentError,
    PlannerTrainConfig,
    build_example_context,
    load_planner,
    make_bundle,
    sample_plan,
    train_planner,
)
from .policy import PolicyHandle, evaluate, make_ucap_plan_fn, save_report
from .baselines import BaselineError, load_il
from .render import ascii_panels, panels_rgb, write_png

USAGE_ERROR, DATA_ERROR, TRAINING_FAULT = 2, 3, 4

_DATA_ERRORS = (
    data_mod.DataError, ConfigError, CheckpointError, EnvError, DecodeError,
    IvdError, BaselineError, OodAgentError, OSError,
)
_TRAINING_ERRORS = (TrainingFault, SamplerFault, DiffusionError)


def _env_kind(value: str) -> EnvKind:
    try:
        return EnvKind(value)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown env {value!r}; choose from "
            f"{', '.join(k.value for k in EnvKind)}") from None


def _load_cfg(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        kind = getattr(args, "env", None)
        cfg = get_profile(
            getattr(args, "profile", "desk") or "desk",
            kind.value if isinstance(kind, EnvKind) else "gotoobj",
        )
    return apply_env_overrides(cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridplan",
        description="Cross-agent planning experiments on masked-action gridworlds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate expert trajectory datasets")
    p.add_argument("--env", type=_env_kind, required=True)
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--agent", type=int, help="one builtin agent id")
    grp.add_argument("--all-id", action="store_true",
                     help="all six ID agents plus the pooled mixture")
    p.add_argument("--n", type=int, required=True, help="records per agent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--visual", action="store_true",
                   help="tint the agent cell by agent type")
    p.add_argument("--granularity", type=int, default=1,
                   help="keep every n-th observation (drops actions for n>1)")
    p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--kind", required=True,
                   choices=("planner", "ivd", "il", "goal"))
    p.add_argument("--data", required=True, action="append",
                   help="dataset path (repeat to pool)")
    p.add_argument("--cond", default="none",
                   choices=[m.value for m in ConditioningMode],
                   help="planner conditioning mode")
    p.add_argument("--variant", default="single",
                   choices=("single", "union-onehot", "agent-heads"),
                   help="imitation baseline variant (kind=il)")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--profile", default="desk", choices=("desk", "paper"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", default=None,
                   help="planner checkpoint to resume from")

    p = sub.add_parser("eval", help="closed-loop episode evaluation")
    p.add_argument("--policy", required=True, help="planner or IL checkpoint")
    p.add_argument("--ivd", default=None,
                   help="IVD checkpoint (required for planner policies)")
    p.add_argument("--env", type=_env_kind, required=True)
    p.add_argument("--agent", type=int, required=True)
    p.add_argument("--episodes", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replan-every", type=int, default=3, choices=(1, 2, 3))
    p.add_argument("--visual", action="store_true")
    p.add_argument("--out", default=None, help="report JSON path")

    p = sub.add_parser("experiment", help="run a full experiment protocol")
    p.add_argument("--protocol", required=True, choices=PROTOCOLS)
    p.add_argument("--manifest", default=None,
                   help="INI config file (defaults to the desk profile)")
    p.add_argument("--profile", default="desk", choices=("desk", "paper"))
    p.add_argument("--env", type=_env_kind, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--n-agents", type=int, default=None,
                   help="generated agent count (diversity protocol)")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("inspect-plan", help="render generated plan frames")
    p.add_argument("--checkpoint", required=True, help="planner checkpoint")
    p.add_argument("--env", type=_env_kind, required=True)
    p.add_argument("--agent", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", default="ascii", choices=("ascii", "png"))
    p.add_argument("--out", default=None, help="PNG path (format=png)")

    return parser


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out_dir = args.out or cfg.run.out_dir
    os.makedirs(out_dir, exist_ok=True)
    env_cfg = EnvConfig.make(args.env)
    if args.n < 1:
        raise data_mod.DataError("need --n >= 1")
    agent_ids = list(range(6)) if args.all_id else [args.agent]
    parts = []
    for aid in agent_ids:
        spec = get_agent(aid)
        records, manifest = data_mod.generate_dataset(
            env_cfg, spec, args.n, args.seed, visual=args.visual)
        if args.granularity != 1:
            records, manifest = data_mod.subsample_dataset(
                records, manifest, args.granularity)
        tag = f"{args.env.value}_a{aid}_n{args.n}_s{args.seed}"
        if args.visual:
            tag += "_vis"
        if args.granularity != 1:
            tag += f"_g{args.granularity}"
        path = os.path.join(out_dir, f"data_{tag}.gpds")
        data_mod.write_dataset(path, records, manifest)
        print(path)
        parts.append((records, manifest))
    if args.all_id:
        records, manifest = data_mod.pool(parts)
        tag = f"{args.env.value}_mix_n{len(records)}_s{args.seed}"
        if args.visual:
            tag += "_vis"
        if args.granularity != 1:
            tag += f"_g{args.granularity}"
        path = os.path.join(out_dir, f"data_{tag}.gpds")
        data_mod.write_dataset(path, records, manifest)
        print(path)
    return 0


def _pooled_data(paths):
    parts = [data_mod.load_dataset(p, validate="checksum") for p in paths]
    if len(parts) == 1:
        return parts[0]
    return data_mod.pool(parts)


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    records, manifest = _pooled_data(args.data)
    env_cfg = EnvConfig.make(EnvKind(manifest.env_kind))
    specs = manifest.agent_specs()
    if args.kind == "planner":
        p = cfg.planner
        train_cfg = PlannerTrainConfig(
            updates=p.updates, batch_size=p.batch_size, lr=p.lr,
            width=p.width, depth=p.depth, log_every=p.log_every,
            seed=args.seed, threads=cfg.run.workers,
        )
        mode = ConditioningMode(args.cond)
        if mode == ConditioningMode.VISUAL and not manifest.visual:
            raise data_mod.DataError(
                "visual conditioning needs a dataset generated with --visual")
        result = train_planner(records, specs, env_cfg, mode, train_cfg,
                               diff_cfg=cfg.diffusion, out_path=args.out,
                               resume_from=args.resume)
        print(f"{args.out}: {result.updates_done} updates, "
              f"final loss {result.curve[-1][1]:.4f}")
    elif args.kind == "ivd":
        if len(specs) != 1:
            raise data_mod.DataError("ivd training needs a single-agent dataset")
        i = cfg.ivd
        train_cfg = IvdTrainConfig(
            epochs=i.epochs, batch_size=i.batch_size, lr=i.lr,
            width=i.width, depth=i.depth, seed=args.seed,
            threads=cfg.run.workers,
        )
        result = train_ivd(records, specs[0], train_cfg, out_path=args.out)
        print(f"{args.out}: consistent accuracy {result.accuracy:.4f}")
    else:
        from .baselines import IlTrainConfig

        il = cfg.il
        epochs = {"single": il.epochs_small, "union-onehot": il.epochs_union,
                  "agent-heads": il.epochs_heads}.get(args.variant,
                                                      il.epochs_small)
        train_cfg = IlTrainConfig(
            epochs=epochs, batch_size=il.batch_size, lr=il.lr,
            width=il.width, depth=il.depth, hidden=il.hidden,
            seed=args.seed, threads=cfg.run.workers,
        )
        if args.kind == "goal":
            if len(specs) != 1:
                raise data_mod.DataError(
                    "goal policy training needs a single-agent dataset")
            result = train_goal_policy(records, specs[0], il.goal_horizon,
                                       train_cfg, manifest.env_kind,
                                       out_path=args.out)
        else:
            result = train_il(records, args.variant, specs, train_cfg,
                              manifest.env_kind, out_path=args.out)
        print(f"{args.out}: holdout accuracy {result.accuracy:.4f}")
    return 0


def _checkpoint_kind(path: str) -> str:
    header, _ = load_arrays(path)
    return header.get("kind", "")


def _cmd_eval(args, parser) -> int:
    cfg = _load_cfg(args)
    env_cfg = EnvConfig.make(args.env)
    spec = get_agent(args.agent)
    kind = _checkpoint_kind(args.policy)
    if kind == "planner":
        if not args.ivd:
            parser.error("planner policies need --ivd")
        trained = load_planner(args.policy)
        handle = PolicyHandle(
            kind="ucap",
            plan_fn=make_ucap_plan_fn(trained, env_cfg),
            ivds={args.agent: load_ivd(args.ivd)},
            replan_every=args.replan_every,
            visual=args.visual or trained.mode == ConditioningMode.VISUAL,
        )
    elif kind == "il":
        handle = PolicyHandle(kind="il", il=load_il(args.policy),
                              visual=args.visual)
    else:
        raise data_mod.DataError(
            f"{args.policy}: not a planner or imitation checkpoint")
    report = evaluate(handle, env_cfg, spec, episodes=args.episodes,
                      seed=args.seed)
    print(f"completion_rate {report.completion_rate:.4f} "
          f"mean_steps {report.mean_steps:.2f} "
          f"episodes {report.episodes}")
    if args.out:
        save_report(args.out, report)
        print(args.out)
    return 0


def _cmd_experiment(args) -> int:
    if args.manifest:
        cfg = apply_env_overrides(load_config(args.manifest))
    else:
        kind = args.env.value if args.env else "gotoobj"
        cfg = apply_env_overrides(get_profile(args.profile, kind))
    progress = None if args.quiet else lambda msg: print(msg, file=sys.stderr)
    kwargs = {}
    if args.protocol == "diversity" and args.n_agents:
        kwargs["n_agents"] = args.n_agents
    report = run_experiment(args.protocol, cfg, out_dir=args.out,
                            progress=progress, **kwargs)
    print(format_summary(report))
    return 0


def _cmd_inspect_plan(args, parser) -> int:
    trained = load_planner(args.checkpoint)
    env_cfg = EnvConfig.make(args.env)
    spec = get_agent(args.agent)
    state, instruction = reset(env_cfg, args.seed)
    mode = trained.mode
    tint = spec.agent_id if mode == ConditioningMode.VISUAL else None
    x0 = encode_observation(state, tint)
    instr = None if trained.env_kind == EnvKind.GOTO_OBJ.value else instruction
    example = None
    if mode == ConditioningMode.EXAMPLE:
        example = build_example_context(spec, env_cfg, seed=0,
                                        context_len=trained.model.context_len)
    bundle = make_bundle(mode, normalize(x0), instr, spec=spec,
                         example_frames=example)
    plan = sample_plan(trained.model, bundle, args.seed)
    frames = [x0] + plan.decoded_frames()
    labels = ["x0", "frame 1", "frame 2", "frame 3"]
    if args.format == "ascii":
        print(f"mission: {instruction.text}")
        print(ascii_panels(frames, labels))
    else:
        out = args.out or "plan.png"
        write_png(out, panels_rgb(frames))
        print(out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args, parser)
        if args.command == "experiment":
            return _cmd_experiment(args)
        if args.command == "inspect-plan":
            return _cmd_inspect_plan(args, parser)
    except _TRAINING_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return TRAINING_FAULT
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
