"""Imitation-learning baselines and the goal-conditioned low-level policy.

Four variants share one convolutional backbone design:

* ``single``      -- one agent, head over that agent's unmasked actions,
* ``union-onehot``-- mixture-trained, agent one-hot concatenated to the
                     pooled features, single head over all 19 actions,
* ``agent-heads`` -- mixture-trained shared backbone with one head per agent,
* ``goal``        -- single agent, current and goal observations stacked on
                     channels, used by the granularity pipeline.

Only union-onehot can emit an action outside the evaluated agent's mask;
the environment treats such actions as no-ops.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint, seeding
from .agents import ActionSpaceMask, AgentTypeSpec
from .env import (
    Action,
    Color,
    DecodeError,
    N_ACTIONS,
    TARGET_OBJECTS,
    TaskInstruction,
    decode_observation,
    normalize,
)
from .expert import TrajectoryRecord, plan_to_pose


class BaselineError(RuntimeError):
    pass


VARIANTS = ("single", "union-onehot", "agent-heads", "goal")

_NULL_COLOR_IDX = len(Color)
_NULL_OBJECT_IDX = len(TARGET_OBJECTS)
_OBJECT_TO_IDX = {int(o): i for i, o in enumerate(TARGET_OBJECTS)}


@dataclasses.dataclass(frozen=True)
class IlTrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    width: int = 32
    depth: int = 2
    hidden: int = 64
    holdout: float = 0.1
    seed: int = 0
    threads: int = 1


def _instruction_indices(instr: Optional[TaskInstruction]) -> tuple[int, int]:
    if instr is None:
        return _NULL_COLOR_IDX, _NULL_OBJECT_IDX
    return int(instr.color_id), _OBJECT_TO_IDX[int(instr.object_id)]


class IlPolicy(nn.Module):
    """Convolutional stack, mean pool, instruction embedding, MLP head(s)."""

    def __init__(
        self,
        variant: str,
        grid_size: int,
        width: int = 32,
        depth: int = 2,
        hidden: int = 64,
        n_onehot: int = 8,
        head_masks: Optional[dict[int, ActionSpaceMask]] = None,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise BaselineError(f"unknown variant {variant!r}")
        self.variant = variant
        self.grid_size = grid_size
        self.width = width
        self.depth = depth
        self.hidden = hidden
        self.n_onehot = n_onehot
        in_ch = 6 if variant == "goal" else 3
        self.stem = nn.Conv2d(in_ch, width, 3, padding=1)
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.GroupNorm(min(8, width), width),
                nn.SiLU(),
                nn.Conv2d(width, width, 3, padding=1),
            )
            for _ in range(depth)
        )
        self.color_embed = nn.Embedding(len(Color) + 1, width)
        self.object_embed = nn.Embedding(len(TARGET_OBJECTS) + 1, width)

        feat = 2 * width + (n_onehot if variant == "union-onehot" else 0)
        self.trunk = nn.Sequential(nn.Linear(feat, hidden), nn.SiLU())
        self.head_actions: dict[str, tuple[int, ...]] = {}
        self.heads = nn.ModuleDict()
        if variant == "union-onehot":
            self.heads["all"] = nn.Linear(hidden, N_ACTIONS)
            self.head_actions["all"] = tuple(range(N_ACTIONS))
        else:
            if not head_masks:
                raise BaselineError(f"variant {variant!r} needs head masks")
            for agent_id, mask in sorted(head_masks.items()):
                self.attach_head(agent_id, mask)

    def attach_head(self, agent_id: int, mask: ActionSpaceMask) -> None:
        key = str(agent_id)
        if key in self.heads:
            raise BaselineError(f"head for agent {agent_id} already exists")
        actions = tuple(mask.allowed_ids())
        self.heads[key] = nn.Linear(self.hidden, len(actions))
        self.head_actions[key] = actions

    def _head_key(self, agent_id: Optional[int]) -> str:
        if self.variant == "union-onehot":
            return "all"
        if self.variant in ("single", "goal"):
            keys = list(self.heads.keys())
            if len(keys) == 1:
                return keys[0]
        key = str(agent_id)
        if key not in self.heads:
            raise BaselineError(f"no head for agent {agent_id}")
        return key

    def features(self, obs_batch, color_idx, object_idx, onehot=None):
        h = self.stem(obs_batch)
        for block in self.blocks:
            h = h + block(h)
        pooled = F.silu(h).mean(dim=(2, 3))
        emb = self.color_embed(color_idx) + self.object_embed(object_idx)
        parts = [pooled, emb]
        if self.variant == "union-onehot":
            parts.append(onehot)
        return self.trunk(torch.cat(parts, dim=1))

    def logits(self, obs_batch, color_idx, object_idx, agent_id=None, onehot=None):
        feats = self.features(obs_batch, color_idx, object_idx, onehot)
        return self.heads[self._head_key(agent_id)](feats)

    def act(
        self,
        obs: np.ndarray,
        instruction: Optional[TaskInstruction],
        agent_id: Optional[int] = None,
        goal_obs: Optional[np.ndarray] = None,
    ) -> int:
        """Greedy global action id; ties break toward the lowest id."""
        if self.variant == "goal":
            if goal_obs is None:
                raise BaselineError("goal variant needs a goal observation")
            x = np.concatenate([normalize(obs), normalize(goal_obs)], axis=0)
        else:
            x = normalize(obs)
        ci, oi = _instruction_indices(instruction)
        onehot = None
        if self.variant == "union-onehot":
            if agent_id is None or not 0 <= agent_id < self.n_onehot:
                raise BaselineError(f"union-onehot needs agent_id in [0,{self.n_onehot})")
            onehot = torch.zeros(1, self.n_onehot)
            onehot[0, agent_id] = 1.0
        with torch.no_grad():
            logits = self.logits(
                torch.as_tensor(x[None], dtype=torch.float32),
                torch.tensor([ci]),
                torch.tensor([oi]),
                agent_id=agent_id,
                onehot=onehot,
            )[0]
        key = self._head_key(agent_id)
        return self.head_actions[key][int(torch.argmax(logits))]


@dataclasses.dataclass
class TrainedIl:
    policy: IlPolicy
    variant: str
    accuracy: float
    curve: list[tuple[int, float]]
    train_config: IlTrainConfig


def _il_examples(records: Sequence[TrajectoryRecord], null_instruction: bool):
    """(obs, color_idx, object_idx, agent_id, label) per demo step."""
    out = []
    for rec in records:
        instr = None if null_instruction else rec.instruction
        ci, oi = _instruction_indices(instr)
        for t, action in enumerate(rec.actions):
            out.append((rec.observations[t], ci, oi, rec.agent_id, int(action)))
        out.append((rec.observations[-1], ci, oi, rec.agent_id, int(Action.DONE)))
    return out


def _goal_examples(records: Sequence[TrajectoryRecord], horizon: int, null_instruction: bool):
    """(current, goal, color, object, agent, label) pairs with goals at most
    ``horizon`` demo steps ahead; a zero-step goal labels the done action."""
    out = []
    for rec in records:
        instr = None if null_instruction else rec.instruction
        ci, oi = _instruction_indices(instr)
        obs = rec.observations
        for t in range(len(obs)):
            for k in range(0, min(horizon, len(obs) - 1 - t) + 1):
                label = int(Action.DONE) if k == 0 else int(rec.actions[t])
                out.append((obs[t], obs[t + k], ci, oi, rec.agent_id, label))
    return out


def _split_records(records, holdout, rng):
    order = rng.permutation(len(records))
    n_hold = max(1, int(round(holdout * len(records)))) if len(records) > 1 else 0
    hold = [records[int(i)] for i in order[:n_hold]]
    train = [records[int(i)] for i in order[n_hold:]]
    return train, hold


def _class_index(policy: IlPolicy, key: str, action: int) -> int:
    try:
        return policy.head_actions[key].index(action)
    except ValueError:
        raise BaselineError(f"action {action} outside head {key}") from None


def _train_examples(
    policy: IlPolicy,
    examples,
    train_cfg: IlTrainConfig,
    rng: np.random.Generator,
    goal_mode: bool,
) -> list[tuple[int, float]]:
    optimizer = torch.optim.Adam(policy.parameters(), lr=train_cfg.lr)
    curve = []
    n = len(examples)
    step_no = 0
    policy.train()
    for _ in range(train_cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for lo in range(0, n, train_cfg.batch_size):
            batch = [examples[int(i)] for i in perm[lo : lo + train_cfg.batch_size]]
            loss = _batch_loss(policy, batch, goal_mode)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            step_no += 1
        curve.append((step_no, float(np.mean(losses))))
    return curve


def _batch_loss(policy: IlPolicy, batch, goal_mode: bool) -> torch.Tensor:
    if goal_mode:
        obs = torch.as_tensor(
            np.stack(
                [np.concatenate([normalize(o), normalize(g)], axis=0) for o, g, *_ in batch]
            ),
            dtype=torch.float32,
        )
        cis = torch.tensor([b[2] for b in batch])
        ois = torch.tensor([b[3] for b in batch])
        agents_ = [b[4] for b in batch]
        labels = [b[5] for b in batch]
    else:
        obs = torch.as_tensor(
            np.stack([normalize(o) for o, *_ in batch]), dtype=torch.float32
        )
        cis = torch.tensor([b[1] for b in batch])
        ois = torch.tensor([b[2] for b in batch])
        agents_ = [b[3] for b in batch]
        labels = [b[4] for b in batch]

    if policy.variant == "union-onehot":
        onehot = torch.zeros(len(batch), policy.n_onehot)
        for i, a in enumerate(agents_):
            onehot[i, a] = 1.0
        logits = policy.logits(obs, cis, ois, onehot=onehot)
        target = torch.tensor(labels)
        return F.cross_entropy(logits, target)

    if policy.variant == "agent-heads":
        feats = policy.features(obs, cis, ois)
        total = obs.new_zeros(())
        for agent_id in sorted(set(agents_)):
            sel = [i for i, a in enumerate(agents_) if a == agent_id]
            key = policy._head_key(agent_id)
            logits = policy.heads[key](feats[sel])
            target = torch.tensor([_class_index(policy, key, labels[i]) for i in sel])
            total = total + F.cross_entropy(logits, target, reduction="sum")
        return total / len(batch)

    key = policy._head_key(agents_[0])
    logits = policy.logits(obs, cis, ois, agent_id=agents_[0])
    target = torch.tensor([_class_index(policy, key, l) for l in labels])
    return F.cross_entropy(logits, target)


def _holdout_accuracy(policy: IlPolicy, examples, goal_mode: bool) -> float:
    if not examples:
        return float("nan")
    policy.eval()
    hits = 0
    for ex in examples:
        if goal_mode:
            obs, goal, ci, oi, agent_id, label = ex
            pred = policy.act(
                obs,
                _indices_to_instruction(ci, oi),
                agent_id=agent_id,
                goal_obs=goal,
            )
        else:
            obs, ci, oi, agent_id, label = ex
            pred = policy.act(obs, _indices_to_instruction(ci, oi), agent_id=agent_id)
        hits += pred == label
    return hits / len(examples)


def _indices_to_instruction(ci: int, oi: int) -> Optional[TaskInstruction]:
    if ci == _NULL_COLOR_IDX:
        return None
    return TaskInstruction.go_to(ci, int(TARGET_OBJECTS[oi]))


def train_il(
    records: Sequence[TrajectoryRecord],
    variant: str,
    agent_specs: Sequence[AgentTypeSpec],
    train_cfg: IlTrainConfig,
    env_kind: str,
    out_path=None,
) -> TrainedIl:
    """Behaviour cloning on demo steps; accuracy is held-out exact-label."""
    if variant not in ("single", "union-onehot", "agent-heads"):
        raise BaselineError(f"train_il does not handle variant {variant!r}")
    torch.set_num_threads(max(1, train_cfg.threads))
    torch.manual_seed(seeding.derive_seed("il-torch-init", variant, train_cfg.seed) % 2**63)
    rng = seeding.generator("il-train", variant, train_cfg.seed)

    masks = {s.agent_id: s.mask for s in agent_specs}
    if variant == "single" and len(masks) != 1:
        raise BaselineError("single variant expects exactly one agent")
    grid_size = records[0].observations[0].shape[0]
    policy = IlPolicy(
        variant,
        grid_size,
        width=train_cfg.width,
        depth=train_cfg.depth,
        hidden=train_cfg.hidden,
        n_onehot=max(8, max(masks) + 1) if variant == "union-onehot" else 8,
        head_masks=None if variant == "union-onehot" else masks,
    )
    null_instruction = env_kind == "gotoobj"
    train_recs, hold_recs = _split_records(records, train_cfg.holdout, rng)
    examples = _il_examples(train_recs, null_instruction)
    curve = _train_examples(policy, examples, train_cfg, rng, goal_mode=False)
    accuracy = _holdout_accuracy(policy, _il_examples(hold_recs, null_instruction), False)
    result = TrainedIl(policy, variant, accuracy, curve, train_cfg)
    if out_path is not None:
        save_il(out_path, result)
    return result


def finetune_il(
    trained: TrainedIl,
    records: Sequence[TrajectoryRecord],
    spec: AgentTypeSpec,
    train_cfg: IlTrainConfig,
    env_kind: str,
) -> TrainedIl:
    """Continue optimization on one agent's data.

    For agent-heads on an agent without a head, a fresh head is attached
    first.  Zero epochs leaves the parameters untouched."""
    policy = trained.policy
    torch.set_num_threads(max(1, train_cfg.threads))
    rng = seeding.generator("il-finetune", spec.agent_id, train_cfg.seed)
    if policy.variant == "agent-heads" and str(spec.agent_id) not in policy.heads:
        policy.attach_head(spec.agent_id, spec.mask)
    if policy.variant == "union-onehot" and spec.agent_id >= policy.n_onehot:
        raise BaselineError(
            f"agent {spec.agent_id} exceeds the one-hot width {policy.n_onehot}"
        )
    null_instruction = env_kind == "gotoobj"
    train_recs, hold_recs = _split_records(records, train_cfg.holdout, rng)
    examples = _il_examples(train_recs, null_instruction)
    curve = trained.curve + _train_examples(policy, examples, train_cfg, rng, goal_mode=False)
    accuracy = _holdout_accuracy(policy, _il_examples(hold_recs, null_instruction), False)
    return TrainedIl(policy, policy.variant, accuracy, curve, train_cfg)


def train_goal_policy(
    records: Sequence[TrajectoryRecord],
    spec: AgentTypeSpec,
    horizon: int,
    train_cfg: IlTrainConfig,
    env_kind: str,
    out_path=None,
) -> TrainedIl:
    """Goal-conditioned cloning: (current, goal <= horizon steps ahead) ->
    the demo action at the current index; goal == current labels done."""
    if horizon < 1:
        raise BaselineError("horizon must be >= 1")
    torch.set_num_threads(max(1, train_cfg.threads))
    torch.manual_seed(seeding.derive_seed("goal-torch-init", spec.agent_id, train_cfg.seed) % 2**63)
    rng = seeding.generator("goal-train", spec.agent_id, train_cfg.seed)
    grid_size = records[0].observations[0].shape[0]
    policy = IlPolicy(
        "goal",
        grid_size,
        width=train_cfg.width,
        depth=train_cfg.depth,
        hidden=train_cfg.hidden,
        head_masks={spec.agent_id: spec.mask},
    )
    null_instruction = env_kind == "gotoobj"
    train_recs, hold_recs = _split_records(records, train_cfg.holdout, rng)
    examples = _goal_examples(train_recs, horizon, null_instruction)
    curve = _train_examples(policy, examples, train_cfg, rng, goal_mode=True)
    accuracy = _holdout_accuracy(
        policy, _goal_examples(hold_recs, horizon, null_instruction), True
    )
    result = TrainedIl(policy, "goal", accuracy, curve, train_cfg)
    if out_path is not None:
        save_il(out_path, result)
    return result


def oracle_goal_policy(
    state, goal_obs: np.ndarray, spec: AgentTypeSpec, budget: Optional[int] = None
) -> Optional[list[int]]:
    """Exact BFS to the pose shown in the goal observation.

    Returns None (infeasible) when the goal grid does not decode to exactly
    one agent marker or no action sequence reaches the pose in budget."""
    try:
        goal_state = decode_observation(goal_obs)
    except DecodeError:
        return None
    pose = (goal_state.agent_pos[0], goal_state.agent_pos[1], int(goal_state.agent_dir))
    return plan_to_pose(state, pose, spec, budget=budget)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_il(path, result: TrainedIl) -> None:
    policy = result.policy
    header = {
        "kind": "il",
        "variant": result.variant,
        "grid_size": policy.grid_size,
        "width": policy.width,
        "depth": policy.depth,
        "hidden": policy.hidden,
        "n_onehot": policy.n_onehot,
        "heads": {k: list(v) for k, v in policy.head_actions.items()},
        "accuracy": result.accuracy,
        "curve": [[int(s), float(v)] for s, v in result.curve],
        "train_config": dataclasses.asdict(result.train_config),
    }
    arrays = {
        f"param.{name}": t.detach().cpu().numpy()
        for name, t in policy.state_dict().items()
    }
    checkpoint.save_arrays(path, header, arrays)


def load_il(path) -> TrainedIl:
    header, arrays = checkpoint.load_arrays(path)
    if header.get("kind") != "il":
        raise BaselineError(f"{path}: not an il checkpoint")
    variant = header["variant"]
    heads = {k: tuple(v) for k, v in header["heads"].items()}
    head_masks = None
    if variant != "union-onehot":
        head_masks = {
            int(k): ActionSpaceMask.from_ids(v) for k, v in heads.items()
        }
    policy = IlPolicy(
        variant,
        header["grid_size"],
        width=header["width"],
        depth=header["depth"],
        hidden=header["hidden"],
        n_onehot=header["n_onehot"],
        head_masks=head_masks,
    )
    state = {
        name[len("param.") :]: torch.as_tensor(arr)
        for name, arr in arrays.items()
        if name.startswith("param.")
    }
    policy.load_state_dict(state)
    policy.eval()
    return TrainedIl(
        policy=policy,
        variant=variant,
        accuracy=float(header["accuracy"]),
        curve=[tuple(p) for p in header["curve"]],
        train_config=IlTrainConfig(**header["train_config"]),
    )
