"""Closed-loop policy execution and evaluation.

A policy handle bundles the pieces a rollout needs: a plan function that
generates 3 future frames from the current state, per-agent inverse dynamics
models that turn frames into actions, or a direct imitation policy.  The
execution loop is plan, label, act, replan (receding horizon), with every
sampler call seeded from the episode seed so reruns reproduce traces bit for
bit.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Callable, Optional, Sequence

import numpy as np

from . import seeding
from .agents import AgentTypeSpec
from .baselines import TrainedIl, oracle_goal_policy
from .env import (
    Action,
    EnvConfig,
    EnvKind,
    EnvState,
    TaskInstruction,
    encode_observation,
    is_success,
    reset,
    step,
)
from .expert import plan_actions
from .inverse_dynamics import TrainedIvd
from .planner import (
    ConditioningMode,
    TrainedPlanner,
    build_example_context,
    make_bundle,
    sample_plan,
)
from .env import normalize


class PolicyError(RuntimeError):
    pass


# plan_fn(state, instruction, spec, seed) -> list of 3 integer (H, W, 3) grids
PlanFn = Callable[[EnvState, TaskInstruction, AgentTypeSpec, int], list]


@dataclasses.dataclass
class PolicyHandle:
    """What to run in the evaluation loop.

    kind "ucap": plan_fn + per-agent IVD, executes up to replan_every of the
    3 labelled actions per plan.  kind "ucap-2step": plan_fn trained at
    granularity > 1; the first generated frame becomes a goal executed by the
    oracle search or a trained goal policy under a step sub-budget.  kind
    "il": one action per step from the imitation policy.  kind "expert":
    exact search, the performance ceiling.
    """

    kind: str
    plan_fn: Optional[PlanFn] = None
    ivds: dict[int, TrainedIvd] = dataclasses.field(default_factory=dict)
    il: Optional[TrainedIl] = None
    goal_policy: Optional[TrainedIl] = None
    oracle_goals: bool = False
    replan_every: int = 3
    goal_budget: int = 4
    visual: bool = False

    def __post_init__(self):
        if self.kind not in ("ucap", "ucap-2step", "il", "expert"):
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        if self.kind == "ucap" and self.plan_fn is None:
            raise PolicyError("ucap needs a plan_fn")
        if self.kind == "ucap-2step":
            if self.plan_fn is None:
                raise PolicyError("ucap-2step needs a plan_fn")
            if not self.oracle_goals and self.goal_policy is None:
                raise PolicyError("ucap-2step needs a goal policy or oracle_goals")
        if self.kind == "il" and self.il is None:
            raise PolicyError("il needs a trained policy")
        if not 1 <= self.replan_every <= 3:
            raise PolicyError("replan_every must be in {1, 2, 3}")


def make_ucap_plan_fn(trained: TrainedPlanner, env_cfg: EnvConfig) -> PlanFn:
    """Wrap a trained planner checkpoint as a plan function.

    Rebuilds example contexts deterministically when the model was trained
    in example mode; encodes the tinted observation in visual mode."""
    model = trained.model
    model.eval()
    mode = trained.mode
    contexts: dict[int, np.ndarray] = {}
    null_instruction = trained.env_kind == EnvKind.GOTO_OBJ.value

    def plan(state, instruction, spec, seed):
        tint = spec.agent_id if mode == ConditioningMode.VISUAL else None
        x0 = normalize(encode_observation(state, tint))
        instr = None if null_instruction else instruction
        example = None
        if mode == ConditioningMode.EXAMPLE:
            if spec.agent_id not in contexts:
                contexts[spec.agent_id] = build_example_context(
                    spec, env_cfg, seed=0, context_len=model.context_len
                )
            example = contexts[spec.agent_id]
        bundle = make_bundle(mode, x0, instr, spec=spec, example_frames=example)
        plan_tensor = sample_plan(model, bundle, seed)
        return plan_tensor.decoded_frames()

    return plan


def ucap_act(
    handle: PolicyHandle,
    state: EnvState,
    instruction: TaskInstruction,
    spec: AgentTypeSpec,
    sample_seed: int,
) -> tuple[list[int], list]:
    """Generate 3 frames and label consecutive pairs with the agent's IVD.

    Returns (3 actions, 3 frames); every action lies inside the agent's mask
    because the IVD head only covers unmasked actions."""
    ivd = handle.ivds.get(spec.agent_id)
    if ivd is None:
        raise PolicyError(f"no inverse dynamics model for agent {spec.agent_id}")
    frames = handle.plan_fn(state, instruction, spec, sample_seed)
    if len(frames) != 3:
        raise PolicyError(f"plan_fn returned {len(frames)} frames, expected 3")
    tint = spec.agent_id if handle.visual else None
    prev = encode_observation(state, tint)
    actions = []
    for frame in frames:
        actions.append(ivd.model.predict(prev, frame))
        prev = frame
    return actions, frames


@dataclasses.dataclass
class EpisodeResult:
    success: bool
    steps: int
    trace: list  # one entry per plan cycle: {"step", "frames", "actions"}


def run_episode(
    handle: PolicyHandle,
    env_cfg: EnvConfig,
    spec: AgentTypeSpec,
    seed: int,
) -> EpisodeResult:
    state, instruction = reset(env_cfg, seed)
    if is_success(state):
        return EpisodeResult(success=True, steps=0, trace=[])
    trace = []
    null_instruction = env_cfg.kind == EnvKind.GOTO_OBJ
    done = False
    success = False
    cycle = 0
    while not done:
        sample_seed = seeding.derive_seed("plan", env_cfg.kind.value, seed, cycle)
        entry = {"step": state.step_count, "frames": None, "actions": []}
        if handle.kind == "ucap":
            actions, frames = ucap_act(handle, state, instruction, spec, sample_seed)
            entry["frames"] = frames
            to_run = actions[: handle.replan_every]
        elif handle.kind == "expert":
            planned = plan_actions(state, instruction, spec)
            if planned is None:
                to_run = [int(Action.DONE)]
            else:
                to_run = planned[: handle.replan_every] or [int(Action.DONE)]
        elif handle.kind == "il":
            instr = None if null_instruction else instruction
            to_run = [handle.il.policy.act(
                encode_observation(state, spec.agent_id if handle.visual else None),
                instr,
                agent_id=spec.agent_id,
            )]
        elif handle.kind == "ucap-2step":
            frames = handle.plan_fn(state, instruction, spec, sample_seed)
            entry["frames"] = frames
            goal = frames[0]
            to_run = _goal_actions(handle, state, instruction, spec, goal, null_instruction)
        for action in to_run:
            state, done, success = step(state, action, spec.mask)
            entry["actions"].append(int(action))
            if done:
                break
        trace.append(entry)
        cycle += 1
    return EpisodeResult(success=success, steps=state.step_count, trace=trace)


def _goal_actions(handle, state, instruction, spec, goal_obs, null_instruction):
    """Actions toward one generated goal frame, capped by the sub-budget."""
    if handle.oracle_goals:
        seq = oracle_goal_policy(state, goal_obs, spec, budget=handle.goal_budget)
        if not seq:  # infeasible or already there; consume a step to make progress
            return [int(Action.DONE)]
        return seq[: handle.goal_budget]
    actions = []
    current = state
    tint = spec.agent_id if handle.visual else None
    instr = None if null_instruction else instruction
    for _ in range(handle.goal_budget):
        action = handle.goal_policy.policy.act(
            encode_observation(current, tint),
            instr,
            agent_id=spec.agent_id,
            goal_obs=goal_obs,
        )
        actions.append(action)
        if action == int(Action.DONE):
            break
        current, done, _ = step(current, action, spec.mask)
        if done:
            break
    return actions or [int(Action.DONE)]


@dataclasses.dataclass(frozen=True)
class EvalReport:
    env_kind: str
    agent_id: int
    episodes: int
    completion_rate: float
    mean_steps: float
    seed: int
    rows: tuple  # (episode_index, layout_seed, success, steps)


def evaluate(
    handle: PolicyHandle,
    env_cfg: EnvConfig,
    spec: AgentTypeSpec,
    episodes: int = 512,
    seed: int = 0,
) -> EvalReport:
    """Run independent episodes on a derived layout-seed stream (disjoint
    from the training stream by namespace)."""
    if episodes < 1:
        raise PolicyError("need episodes >= 1")
    rows = []
    successes = 0
    total_steps = 0
    for i in range(episodes):
        layout_seed = seeding.derive_seed(
            "eval", env_cfg.kind.value, spec.agent_id, seed, i
        )
        result = run_episode(handle, env_cfg, spec, layout_seed)
        rows.append((i, layout_seed, bool(result.success), result.steps))
        successes += result.success
        total_steps += result.steps
    return EvalReport(
        env_kind=env_cfg.kind.value,
        agent_id=spec.agent_id,
        episodes=episodes,
        completion_rate=successes / episodes,
        mean_steps=total_steps / episodes,
        seed=seed,
        rows=tuple(rows),
    )


def save_report(path, report: EvalReport) -> None:
    payload = dataclasses.asdict(report)
    payload["rows"] = [list(r) for r in report.rows]
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")


def load_report(path) -> EvalReport:
    with open(path) as f:
        payload = json.load(f)
    payload["rows"] = tuple(tuple(r) for r in payload["rows"])
    return EvalReport(**payload)


def standard_error(values: Sequence[float]) -> float:
    """Sample standard deviation over the square root of the count."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return 0.0
    return float(arr.std(ddof=1) / np.sqrt(arr.size))
