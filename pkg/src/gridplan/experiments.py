"""Experiment protocols: the evaluation grids behind the headline tables.

Five protocols are provided:

* ``transfer``    -- per-agent single-dataset planners (small and large)
                     against mixture planners under the four conditioning
                     modes, evaluated on ID agents and, where conditioning
                     permits, on OOD agents.
* ``baselines``   -- imitation-learning variants (single, union one-hot,
                     agent heads, each with a finetuned version) against the
                     action-space planner and its finetuned version.
* ``granularity`` -- planners trained on stride-n subsampled data for
                     n in {1, 2, 4}, executed through the oracle goal mover,
                     plus the 1-step-IVD vs 2-step-goal-policy comparison.
* ``diversity``   -- mixture drawn from many generated agent types instead
                     of the six builtin ID agents, evaluated on OOD agents.
* ``visual``      -- agent type written into the observation as a tint
                     colour instead of passed to the network.

Every artifact (dataset, checkpoint, per-cell report) is written under the
output directory with a name derived from its parameters and reused when it
already exists, so an interrupted protocol resumes where it stopped and a
rerun is free.  Training runs sequentially; evaluation cells can fan out
over worker processes.  With one worker everything is byte-deterministic.
"""

from __future__ import annotations

import dataclasses
import json
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Optional, Sequence

from . import data as data_mod
from .agents import AgentTypeSpec, builtin_agents, sample_diverse_agents
from .baselines import (
    IlTrainConfig,
    finetune_il,
    load_il,
    save_il,
    train_goal_policy,
    train_il,
)
from .config import ExperimentConfig, desk_profile
from .env import EnvConfig, EnvKind
from .inverse_dynamics import IvdTrainConfig, load_ivd, train_ivd
from .planner import (
    ConditioningMode,
    PlannerTrainConfig,
    load_planner,
    train_planner,
)
from .policy import (
    PolicyHandle,
    evaluate,
    make_ucap_plan_fn,
    save_report,
    standard_error,
)

PROTOCOLS = ("transfer", "baselines", "granularity", "diversity", "visual")
ID_AGENTS = (0, 1, 2, 3, 4, 5)
OOD_AGENTS = (6, 7)

Progress = Optional[Callable[[str], None]]


class ExperimentError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class CellResult:
    row: str
    agent_id: int
    seed: int
    episodes: int
    completion_rate: float
    mean_steps: float


@dataclasses.dataclass(frozen=True)
class ExperimentReport:
    protocol: str
    env_kind: str
    profile: str
    seeds: tuple
    cells: tuple  # CellResult, ...
    summary: dict  # row -> split -> {mean, se, per_seed}


def summarize(cells: Sequence[CellResult]) -> dict:
    """Aggregate: mean completion per (row, split, seed) over agents, then
    mean and standard error over seeds (the error-bar convention)."""
    by_row: dict[str, dict[str, dict[int, list[float]]]] = {}
    for c in cells:
        split = "id" if c.agent_id in ID_AGENTS else "ood"
        by_row.setdefault(c.row, {}).setdefault(split, {}).setdefault(
            c.seed, []
        ).append(c.completion_rate)
    summary: dict = {}
    for row, splits in sorted(by_row.items()):
        summary[row] = {}
        for split, per_seed in sorted(splits.items()):
            seed_means = [
                sum(v) / len(v) for _, v in sorted(per_seed.items())
            ]
            summary[row][split] = {
                "mean": sum(seed_means) / len(seed_means),
                "se": standard_error(seed_means),
                "per_seed": seed_means,
            }
    return summary


def save_experiment_report(path, report: ExperimentReport) -> None:
    payload = {
        "protocol": report.protocol,
        "env_kind": report.env_kind,
        "profile": report.profile,
        "seeds": list(report.seeds),
        "cells": [dataclasses.asdict(c) for c in report.cells],
        "summary": report.summary,
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")


def load_experiment_report(path) -> ExperimentReport:
    with open(path) as f:
        payload = json.load(f)
    return ExperimentReport(
        protocol=payload["protocol"],
        env_kind=payload["env_kind"],
        profile=payload["profile"],
        seeds=tuple(payload["seeds"]),
        cells=tuple(CellResult(**c) for c in payload["cells"]),
        summary=payload["summary"],
    )


def format_summary(report: ExperimentReport) -> str:
    """Fixed-width text table of the summary, one row per method."""
    lines = [f"protocol={report.protocol} env={report.env_kind} "
             f"profile={report.profile} seeds={list(report.seeds)}"]
    width = max((len(r) for r in report.summary), default=10)
    header = f"{'row':<{width}}  {'id':>16}  {'ood':>16}"
    lines.append(header)
    lines.append("-" * len(header))
    for row, splits in report.summary.items():
        cols = []
        for split in ("id", "ood"):
            if split in splits:
                s = splits[split]
                cols.append(f"{s['mean']:.3f} ({s['se']:.3f})")
            else:
                cols.append("-")
        lines.append(f"{row:<{width}}  {cols[0]:>16}  {cols[1]:>16}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Artifact store
# ---------------------------------------------------------------------------


def _say(progress: Progress, msg: str) -> None:
    if progress is not None:
        progress(msg)


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _agent_token(spec: AgentTypeSpec) -> str:
    # generated agents reuse the id range 8+ across different draws, so
    # their cache key carries the mask bits
    if spec.agent_id < 8:
        return f"a{spec.agent_id}"
    return f"a{spec.agent_id}m{spec.mask.as_int():05x}"


def dataset_path(shared: str, kind: str, token: str, n: int, seed: int,
                 visual: bool = False, granularity: int = 1) -> str:
    tag = f"{kind}_{token}_n{n}_s{seed}"
    if visual:
        tag += "_vis"
    if granularity != 1:
        tag += f"_g{granularity}"
    return os.path.join(shared, f"data_{tag}.gpds")


def ensure_dataset(shared: str, env_cfg: EnvConfig, spec: AgentTypeSpec,
                   n: int, seed: int, visual: bool = False,
                   progress: Progress = None):
    path = dataset_path(shared, env_cfg.kind.value, _agent_token(spec), n,
                        seed, visual)
    if not os.path.exists(path):
        _say(progress, f"generating {os.path.basename(path)}")
        data_mod.generate_dataset(env_cfg, spec, n, seed, visual=visual,
                                  out_path=path)
    return data_mod.load_dataset(path, validate="checksum")


def ensure_granularity_dataset(shared: str, env_cfg: EnvConfig,
                               specs: Sequence[AgentTypeSpec], n_each: int,
                               seed: int, granularity: int,
                               progress: Progress = None):
    """Pooled mixture subsampled to the given stride, cached as one file."""
    path = dataset_path(shared, env_cfg.kind.value, "mix", n_each * len(specs),
                        seed, granularity=granularity)
    if not os.path.exists(path):
        parts = [
            ensure_dataset(shared, env_cfg, s, n_each, seed, progress=progress)
            for s in specs
        ]
        records, manifest = data_mod.pool(parts)
        if granularity != 1:
            records, manifest = data_mod.subsample_dataset(
                records, manifest, granularity)
        _say(progress, f"writing {os.path.basename(path)}")
        data_mod.write_dataset(path, records, manifest)
    return data_mod.load_dataset(path, validate="checksum")


def ensure_mixture(shared: str, env_cfg: EnvConfig,
                   specs: Sequence[AgentTypeSpec], n_each: int, seed: int,
                   visual: bool = False, progress: Progress = None):
    parts = [
        ensure_dataset(shared, env_cfg, s, n_each, seed, visual=visual,
                       progress=progress)
        for s in specs
    ]
    return data_mod.pool(parts)


def ensure_ivd(shared: str, env_cfg: EnvConfig, spec: AgentTypeSpec,
               cfg: ExperimentConfig, visual: bool = False,
               progress: Progress = None) -> str:
    """Train (or reuse) the inverse dynamics model for one agent."""
    tag = f"{env_cfg.kind.value}_a{spec.agent_id}" + ("_vis" if visual else "")
    path = os.path.join(shared, f"ivd_{tag}.gpck")
    if not os.path.exists(path):
        records, _ = ensure_dataset(shared, env_cfg, spec, cfg.data.n_small, 0,
                                    visual=visual, progress=progress)
        _say(progress, f"training {os.path.basename(path)}")
        train_cfg = IvdTrainConfig(
            epochs=cfg.ivd.epochs, batch_size=cfg.ivd.batch_size,
            lr=cfg.ivd.lr, width=cfg.ivd.width, depth=cfg.ivd.depth,
            seed=0, threads=cfg.run.workers,
        )
        train_ivd(records, spec, train_cfg, out_path=path)
    return path


def _planner_train_cfg(cfg: ExperimentConfig, seed: int,
                       updates: Optional[int] = None) -> PlannerTrainConfig:
    p = cfg.planner
    return PlannerTrainConfig(
        updates=p.updates if updates is None else updates,
        batch_size=p.batch_size, lr=p.lr, width=p.width, depth=p.depth,
        log_every=p.log_every, seed=seed, threads=cfg.run.workers,
    )


def ensure_planner(out_dir: str, name: str, records, specs, env_cfg,
                   mode: ConditioningMode, cfg: ExperimentConfig, seed: int,
                   updates: Optional[int] = None, init_path: Optional[str] = None,
                   progress: Progress = None) -> str:
    path = os.path.join(out_dir, f"planner_{name}.gpck")
    if not os.path.exists(path):
        _say(progress, f"training {os.path.basename(path)} "
                       f"({updates or cfg.planner.updates} updates)")
        init_model = load_planner(init_path).model if init_path else None
        train_planner(
            records, specs, env_cfg, mode,
            _planner_train_cfg(cfg, seed, updates),
            diff_cfg=cfg.diffusion, out_path=path, init_model=init_model,
        )
    return path


def _il_train_cfg(cfg: ExperimentConfig, epochs: int, seed: int) -> IlTrainConfig:
    il = cfg.il
    return IlTrainConfig(
        epochs=epochs, batch_size=il.batch_size, lr=il.lr, width=il.width,
        depth=il.depth, hidden=il.hidden, seed=seed, threads=cfg.run.workers,
    )


# ---------------------------------------------------------------------------
# Parallel cell evaluation
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class EvalTask:
    """Everything one evaluation cell needs, as paths and scalars so the
    task can cross a process boundary."""

    row: str
    kind: str  # PolicyHandle kind
    env_kind: str
    agent_id: int
    seed: int
    episodes: int
    replan_every: int = 3
    goal_budget: int = 4
    visual: bool = False
    planner_path: Optional[str] = None
    ivd_path: Optional[str] = None
    il_path: Optional[str] = None
    goal_path: Optional[str] = None
    oracle_goals: bool = False
    report_path: Optional[str] = None


def _run_eval_task(task: EvalTask) -> CellResult:
    env_cfg = EnvConfig.make(EnvKind(task.env_kind))
    spec = builtin_agents()[task.agent_id]
    handle_kwargs = dict(
        replan_every=task.replan_every,
        goal_budget=task.goal_budget,
        visual=task.visual,
    )
    if task.kind in ("ucap", "ucap-2step"):
        plan_fn = make_ucap_plan_fn(load_planner(task.planner_path), env_cfg)
        if task.kind == "ucap":
            handle = PolicyHandle(
                kind="ucap", plan_fn=plan_fn,
                ivds={task.agent_id: load_ivd(task.ivd_path)}, **handle_kwargs,
            )
        else:
            handle = PolicyHandle(
                kind="ucap-2step", plan_fn=plan_fn,
                oracle_goals=task.oracle_goals,
                goal_policy=load_il(task.goal_path) if task.goal_path else None,
                **handle_kwargs,
            )
    elif task.kind == "il":
        handle = PolicyHandle(kind="il", il=load_il(task.il_path), **handle_kwargs)
    else:
        handle = PolicyHandle(kind=task.kind, **handle_kwargs)
    report = evaluate(handle, env_cfg, spec, episodes=task.episodes,
                      seed=task.seed)
    if task.report_path:
        save_report(task.report_path, report)
    return CellResult(
        row=task.row, agent_id=task.agent_id, seed=task.seed,
        episodes=task.episodes, completion_rate=report.completion_rate,
        mean_steps=report.mean_steps,
    )


def run_eval_tasks(tasks: Sequence[EvalTask], workers: int = 1,
                   progress: Progress = None) -> list[CellResult]:
    if workers <= 1:
        results = []
        for t in tasks:
            _say(progress, f"eval {t.row} agent {t.agent_id} seed {t.seed}")
            results.append(_run_eval_task(t))
        return results
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(_run_eval_task, tasks))


def _report_path(proto_dir: str, task_row: str, agent_id: int, seed: int) -> str:
    return os.path.join(proto_dir, f"eval_{task_row}_a{agent_id}_s{seed}.json")


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------


MIXTURE_MODES = (
    ConditioningMode.NONE,
    ConditioningMode.EXAMPLE,
    ConditioningMode.AGENT_ID,
    ConditioningMode.ACTION_SPACE,
)


def _setup(cfg: ExperimentConfig, out_dir, protocol: str):
    out_dir = out_dir or cfg.run.out_dir
    shared = _ensure_dir(os.path.join(out_dir, "shared"))
    proto_dir = _ensure_dir(os.path.join(out_dir, protocol))
    env_cfg = EnvConfig.make(EnvKind(cfg.env.kind))
    agents = builtin_agents()
    return out_dir, shared, proto_dir, env_cfg, agents


def run_transfer(cfg: ExperimentConfig, out_dir=None,
                 progress: Progress = None) -> ExperimentReport:
    """Single-agent small/large planners vs the four mixture planners."""
    _, shared, proto_dir, env_cfg, agents = _setup(cfg, out_dir, "transfer")
    id_specs = [agents[i] for i in ID_AGENTS]
    all_ids = ID_AGENTS + OOD_AGENTS
    n_small = cfg.data.n_small
    n_large = n_small * cfg.data.mixture_factor
    ivd_paths = {
        a: ensure_ivd(shared, env_cfg, agents[a], cfg, progress=progress)
        for a in all_ids
    }
    mix_records, _ = ensure_mixture(shared, env_cfg, id_specs, n_small, 0,
                                    progress=progress)
    tasks = []
    for seed in cfg.run.seeds:
        for mode in MIXTURE_MODES:
            name = f"mixture-{mode.value}_s{seed}"
            path = ensure_planner(proto_dir, name, mix_records, id_specs,
                                  env_cfg, mode, cfg, seed, progress=progress)
            row = f"mixture-{mode.value}"
            eval_agents = ID_AGENTS if mode == ConditioningMode.AGENT_ID \
                else all_ids
            # agent-id conditioning has no embedding for OOD ids; those
            # cells are undefined rather than zero
            for a in eval_agents:
                tasks.append(EvalTask(
                    row=row, kind="ucap", env_kind=cfg.env.kind, agent_id=a,
                    seed=seed, episodes=cfg.eval.episodes,
                    replan_every=cfg.eval.replan_every,
                    planner_path=path, ivd_path=ivd_paths[a],
                    report_path=_report_path(proto_dir, row, a, seed),
                ))
        for a in all_ids:
            small_records, _ = ensure_dataset(shared, env_cfg, agents[a],
                                              n_small, 0, progress=progress)
            large_records, _ = ensure_dataset(shared, env_cfg, agents[a],
                                              n_large, 1, progress=progress)
            for row, records in (("single-small", small_records),
                                 ("single-large", large_records)):
                path = ensure_planner(
                    proto_dir, f"{row}_a{a}_s{seed}", records, [agents[a]],
                    env_cfg, ConditioningMode.NONE, cfg, seed,
                    progress=progress,
                )
                tasks.append(EvalTask(
                    row=row, kind="ucap", env_kind=cfg.env.kind, agent_id=a,
                    seed=seed, episodes=cfg.eval.episodes,
                    replan_every=cfg.eval.replan_every,
                    planner_path=path, ivd_path=ivd_paths[a],
                    report_path=_report_path(proto_dir, row, a, seed),
                ))
    cells = run_eval_tasks(tasks, cfg.run.workers, progress)
    report = ExperimentReport(
        protocol="transfer", env_kind=cfg.env.kind, profile=cfg.run.profile,
        seeds=tuple(cfg.run.seeds), cells=tuple(cells),
        summary=summarize(cells),
    )
    save_experiment_report(os.path.join(proto_dir, "report.json"), report)
    return report


def run_baselines(cfg: ExperimentConfig, out_dir=None,
                  progress: Progress = None) -> ExperimentReport:
    """Imitation variants and their finetuned versions vs the action-space
    planner and its finetuned version."""
    _, shared, proto_dir, env_cfg, agents = _setup(cfg, out_dir, "baselines")
    id_specs = [agents[i] for i in ID_AGENTS]
    all_ids = ID_AGENTS + OOD_AGENTS
    n_small = cfg.data.n_small
    n_large = n_small * cfg.data.mixture_factor
    il = cfg.il
    ivd_paths = {
        a: ensure_ivd(shared, env_cfg, agents[a], cfg, progress=progress)
        for a in all_ids
    }
    small = {
        a: ensure_dataset(shared, env_cfg, agents[a], n_small, 0,
                          progress=progress)[0]
        for a in all_ids
    }
    mix_records, _ = ensure_mixture(shared, env_cfg, id_specs, n_small, 0,
                                    progress=progress)
    tasks = []
    for seed in cfg.run.seeds:
        # per-agent single policies
        for row, n, epochs, dseed in (
            ("il-single-small", n_small, il.epochs_small, 0),
            ("il-single-large", n_large, il.epochs_large, 1),
        ):
            for a in all_ids:
                path = os.path.join(proto_dir, f"{row}_a{a}_s{seed}.gpck")
                if not os.path.exists(path):
                    records, _ = ensure_dataset(shared, env_cfg, agents[a], n,
                                                dseed, progress=progress)
                    _say(progress, f"training {os.path.basename(path)}")
                    train_il(records, "single", [agents[a]],
                             _il_train_cfg(cfg, epochs, seed), cfg.env.kind,
                             out_path=path)
                tasks.append(EvalTask(
                    row=row, kind="il", env_kind=cfg.env.kind, agent_id=a,
                    seed=seed, episodes=cfg.eval.episodes, il_path=path,
                    report_path=_report_path(proto_dir, row, a, seed),
                ))
        # mixture-trained IL, plain and finetuned per agent
        for variant, epochs in (("union-onehot", il.epochs_union),
                                ("agent-heads", il.epochs_heads)):
            short = "il-union" if variant == "union-onehot" else "il-agent-heads"
            base_path = os.path.join(proto_dir, f"{short}_s{seed}.gpck")
            if not os.path.exists(base_path):
                _say(progress, f"training {os.path.basename(base_path)}")
                train_il(mix_records, variant, id_specs,
                         _il_train_cfg(cfg, epochs, seed), cfg.env.kind,
                         out_path=base_path)
            base = load_il(base_path)
            for a in all_ids:
                eval_path = base_path
                if variant == "agent-heads" and a in OOD_AGENTS:
                    # unseen agent: fresh untrained head, as the method
                    # degrades in the un-finetuned case
                    eval_path = os.path.join(
                        proto_dir, f"{short}_a{a}_s{seed}_untrained.gpck")
                    if not os.path.exists(eval_path):
                        save_il(eval_path, finetune_il(
                            base, small[a], agents[a],
                            _il_train_cfg(cfg, 0, seed), cfg.env.kind))
                tasks.append(EvalTask(
                    row=short, kind="il", env_kind=cfg.env.kind, agent_id=a,
                    seed=seed, episodes=cfg.eval.episodes, il_path=eval_path,
                    report_path=_report_path(proto_dir, short, a, seed),
                ))
                ft_row = f"{short}-finetuned"
                ft_path = os.path.join(proto_dir, f"{ft_row}_a{a}_s{seed}.gpck")
                if not os.path.exists(ft_path):
                    _say(progress, f"training {os.path.basename(ft_path)}")
                    save_il(ft_path, finetune_il(
                        base, small[a], agents[a],
                        _il_train_cfg(cfg, il.finetune_epochs, seed),
                        cfg.env.kind))
                tasks.append(EvalTask(
                    row=ft_row, kind="il", env_kind=cfg.env.kind, agent_id=a,
                    seed=seed, episodes=cfg.eval.episodes, il_path=ft_path,
                    report_path=_report_path(proto_dir, ft_row, a, seed),
                ))
        # the action-space planner, plain and finetuned per agent
        ucap_path = ensure_planner(
            proto_dir, f"ucap-action-space_s{seed}", mix_records, id_specs,
            env_cfg, ConditioningMode.ACTION_SPACE, cfg, seed,
            progress=progress,
        )
        for a in all_ids:
            tasks.append(EvalTask(
                row="ucap-action-space", kind="ucap", env_kind=cfg.env.kind,
                agent_id=a, seed=seed, episodes=cfg.eval.episodes,
                replan_every=cfg.eval.replan_every, planner_path=ucap_path,
                ivd_path=ivd_paths[a],
                report_path=_report_path(proto_dir, "ucap-action-space", a, seed),
            ))
            ft_path = ensure_planner(
                proto_dir, f"ucap-action-space-ft_a{a}_s{seed}", small[a],
                [agents[a]], env_cfg, ConditioningMode.ACTION_SPACE, cfg, seed,
                updates=cfg.planner.finetune_updates, init_path=ucap_path,
                progress=progress,
            )
            tasks.append(EvalTask(
                row="ucap-action-space-finetuned", kind="ucap",
                env_kind=cfg.env.kind, agent_id=a, seed=seed,
                episodes=cfg.eval.episodes,
                replan_every=cfg.eval.replan_every, planner_path=ft_path,
                ivd_path=ivd_paths[a],
                report_path=_report_path(
                    proto_dir, "ucap-action-space-finetuned", a, seed),
            ))
    cells = run_eval_tasks(tasks, cfg.run.workers, progress)
    report = ExperimentReport(
        protocol="baselines", env_kind=cfg.env.kind, profile=cfg.run.profile,
        seeds=tuple(cfg.run.seeds), cells=tuple(cells),
        summary=summarize(cells),
    )
    save_experiment_report(os.path.join(proto_dir, "report.json"), report)
    return report


GRANULARITIES = (1, 2, 4)


def run_granularity(cfg: ExperimentConfig, out_dir=None,
                    progress: Progress = None) -> ExperimentReport:
    """Stride-n planners through the oracle goal mover, and the trained
    goal-policy comparison at stride 2 against stride-1 IVD execution."""
    _, shared, proto_dir, env_cfg, agents = _setup(cfg, out_dir, "granularity")
    id_specs = [agents[i] for i in ID_AGENTS]
    all_ids = ID_AGENTS + OOD_AGENTS
    n_small = cfg.data.n_small
    planner_paths = {}
    tasks = []
    for seed in cfg.run.seeds:
        for g in GRANULARITIES:
            records, _ = ensure_granularity_dataset(
                shared, env_cfg, id_specs, n_small, 0, g, progress=progress)
            path = ensure_planner(
                proto_dir, f"stride{g}_s{seed}", records, id_specs, env_cfg,
                ConditioningMode.NONE, cfg, seed, progress=progress)
            planner_paths[(g, seed)] = path
            row = f"oracle-{g}step"
            for a in all_ids:
                tasks.append(EvalTask(
                    row=row, kind="ucap-2step", env_kind=cfg.env.kind,
                    agent_id=a, seed=seed, episodes=cfg.eval.episodes,
                    goal_budget=cfg.eval.goal_budget, planner_path=path,
                    oracle_goals=True,
                    report_path=_report_path(proto_dir, row, a, seed),
                ))
        for a in all_ids:
            # stride-1 planner with the agent's IVD (the 1-step method)
            ivd_path = ensure_ivd(shared, env_cfg, agents[a], cfg,
                                  progress=progress)
            tasks.append(EvalTask(
                row="1step-ivd", kind="ucap", env_kind=cfg.env.kind,
                agent_id=a, seed=seed, episodes=cfg.eval.episodes,
                replan_every=cfg.eval.replan_every,
                planner_path=planner_paths[(1, seed)], ivd_path=ivd_path,
                report_path=_report_path(proto_dir, "1step-ivd", a, seed),
            ))
            # stride-2 planner with a trained goal policy
            goal_path = os.path.join(proto_dir, f"goal_a{a}_s{seed}.gpck")
            if not os.path.exists(goal_path):
                records, _ = ensure_dataset(shared, env_cfg, agents[a],
                                            n_small, 0, progress=progress)
                _say(progress, f"training {os.path.basename(goal_path)}")
                train_goal_policy(
                    records, agents[a], cfg.il.goal_horizon,
                    _il_train_cfg(cfg, cfg.il.epochs_small, seed),
                    cfg.env.kind, out_path=goal_path)
            tasks.append(EvalTask(
                row="2step-goal-policy", kind="ucap-2step",
                env_kind=cfg.env.kind, agent_id=a, seed=seed,
                episodes=cfg.eval.episodes, goal_budget=cfg.eval.goal_budget,
                planner_path=planner_paths[(2, seed)], goal_path=goal_path,
                report_path=_report_path(proto_dir, "2step-goal-policy", a, seed),
            ))
    cells = run_eval_tasks(tasks, cfg.run.workers, progress)
    report = ExperimentReport(
        protocol="granularity", env_kind=cfg.env.kind,
        profile=cfg.run.profile, seeds=tuple(cfg.run.seeds),
        cells=tuple(cells), summary=summarize(cells),
    )
    save_experiment_report(os.path.join(proto_dir, "report.json"), report)
    return report


def run_diversity(cfg: ExperimentConfig, out_dir=None,
                  progress: Progress = None,
                  n_agents: Optional[int] = None) -> ExperimentReport:
    """Mixture from many generated agent types, evaluated on OOD agents.

    Total record count matches the standard mixture; each generated agent
    contributes an equal share (first agents absorb the remainder)."""
    _, shared, proto_dir, env_cfg, agents = _setup(cfg, out_dir, "diversity")
    if n_agents is None:
        n_agents = 6595 if cfg.run.profile == "paper" else 24
    diverse = sample_diverse_agents(n_agents, seed=0)
    total = cfg.data.n_small * cfg.data.mixture_factor
    if total < n_agents:
        raise ExperimentError(
            f"{n_agents} agents need at least {n_agents} records, "
            f"got budget {total}")
    base, extra = divmod(total, n_agents)
    parts = []
    for i, spec in enumerate(diverse):
        n_i = base + (1 if i < extra else 0)
        parts.append(ensure_dataset(shared, env_cfg, spec, n_i, 0,
                                    progress=progress))
    records, _ = data_mod.pool(parts)
    ivd_paths = {
        a: ensure_ivd(shared, env_cfg, agents[a], cfg, progress=progress)
        for a in OOD_AGENTS
    }
    tasks = []
    for seed in cfg.run.seeds:
        for mode in (ConditioningMode.ACTION_SPACE, ConditioningMode.EXAMPLE):
            row = f"diverse-{mode.value}"
            path = ensure_planner(
                proto_dir, f"{row}_s{seed}", records, diverse, env_cfg, mode,
                cfg, seed, progress=progress)
            for a in OOD_AGENTS:
                tasks.append(EvalTask(
                    row=row, kind="ucap", env_kind=cfg.env.kind, agent_id=a,
                    seed=seed, episodes=cfg.eval.episodes,
                    replan_every=cfg.eval.replan_every, planner_path=path,
                    ivd_path=ivd_paths[a],
                    report_path=_report_path(proto_dir, row, a, seed),
                ))
    cells = run_eval_tasks(tasks, cfg.run.workers, progress)
    report = ExperimentReport(
        protocol="diversity", env_kind=cfg.env.kind, profile=cfg.run.profile,
        seeds=tuple(cfg.run.seeds), cells=tuple(cells),
        summary=summarize(cells),
    )
    save_experiment_report(os.path.join(proto_dir, "report.json"), report)
    return report


def run_visual(cfg: ExperimentConfig, out_dir=None,
               progress: Progress = None) -> ExperimentReport:
    """Agent identity in the pixels (tint) vs in the conditioning vector."""
    _, shared, proto_dir, env_cfg, agents = _setup(cfg, out_dir, "visual")
    id_specs = [agents[i] for i in ID_AGENTS]
    all_ids = ID_AGENTS + OOD_AGENTS
    n_small = cfg.data.n_small
    vis_mix, _ = ensure_mixture(shared, env_cfg, id_specs, n_small, 0,
                                visual=True, progress=progress)
    plain_mix, _ = ensure_mixture(shared, env_cfg, id_specs, n_small, 0,
                                  progress=progress)
    vis_ivds = {
        a: ensure_ivd(shared, env_cfg, agents[a], cfg, visual=True,
                      progress=progress)
        for a in all_ids
    }
    plain_ivds = {
        a: ensure_ivd(shared, env_cfg, agents[a], cfg, progress=progress)
        for a in all_ids
    }
    tasks = []
    for seed in cfg.run.seeds:
        vis_path = ensure_planner(
            proto_dir, f"visual-tint_s{seed}", vis_mix, id_specs, env_cfg,
            ConditioningMode.VISUAL, cfg, seed, progress=progress)
        as_path = ensure_planner(
            proto_dir, f"action-space_s{seed}", plain_mix, id_specs, env_cfg,
            ConditioningMode.ACTION_SPACE, cfg, seed, progress=progress)
        for a in all_ids:
            tasks.append(EvalTask(
                row="visual-tint", kind="ucap", env_kind=cfg.env.kind,
                agent_id=a, seed=seed, episodes=cfg.eval.episodes,
                replan_every=cfg.eval.replan_every, visual=True,
                planner_path=vis_path, ivd_path=vis_ivds[a],
                report_path=_report_path(proto_dir, "visual-tint", a, seed),
            ))
            tasks.append(EvalTask(
                row="action-space", kind="ucap", env_kind=cfg.env.kind,
                agent_id=a, seed=seed, episodes=cfg.eval.episodes,
                replan_every=cfg.eval.replan_every, planner_path=as_path,
                ivd_path=plain_ivds[a],
                report_path=_report_path(proto_dir, "action-space", a, seed),
            ))
    cells = run_eval_tasks(tasks, cfg.run.workers, progress)
    report = ExperimentReport(
        protocol="visual", env_kind=cfg.env.kind, profile=cfg.run.profile,
        seeds=tuple(cfg.run.seeds), cells=tuple(cells),
        summary=summarize(cells),
    )
    save_experiment_report(os.path.join(proto_dir, "report.json"), report)
    return report


_RUNNERS = {
    "transfer": run_transfer,
    "baselines": run_baselines,
    "granularity": run_granularity,
    "diversity": run_diversity,
    "visual": run_visual,
}


def run_experiment(protocol: str, cfg: Optional[ExperimentConfig] = None,
                   out_dir=None, progress: Progress = None,
                   **kwargs) -> ExperimentReport:
    if protocol not in _RUNNERS:
        raise ExperimentError(
            f"unknown protocol {protocol!r}, expected one of {PROTOCOLS}")
    cfg = cfg or desk_profile()
    return _RUNNERS[protocol](cfg, out_dir=out_dir, progress=progress, **kwargs)
