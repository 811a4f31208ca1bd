"""Per-agent inverse dynamics: classify the action linking two observations.

The head covers exactly the agent's unmasked actions, so predictions can
never leave the agent's action space.  Training pairs come from expert
demonstrations plus one synthetic terminal pair per episode mapping the
identical final frames to the done action.
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
from .env import Action, Object, normalize, replay_observation
from .expert import TrajectoryRecord


class IvdError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class IvdTrainConfig:
    epochs: int = 15
    batch_size: int = 128
    lr: float = 1e-3
    width: int = 32
    depth: int = 2
    holdout: float = 0.1
    seed: int = 0
    threads: int = 1


class IvdModel(nn.Module):
    def __init__(self, mask: ActionSpaceMask, grid_size: int, width: int = 32, depth: int = 2):
        super().__init__()
        self.mask = mask
        self.grid_size = grid_size
        self.width = width
        self.depth = depth
        self.actions = tuple(mask.allowed_ids())  # ascending global ids
        self.stem = nn.Conv2d(6, width, 3, padding=1)
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.GroupNorm(min(8, width), width),
                nn.SiLU(),
                nn.Conv2d(width, width, 3, padding=1),
            )
            for _ in range(depth)
        )
        self.head = nn.Linear(width, len(self.actions))

    def forward(self, pairs: torch.Tensor) -> torch.Tensor:
        h = self.stem(pairs)
        for block in self.blocks:
            h = h + block(h)
        pooled = F.silu(h).mean(dim=(2, 3))
        return self.head(pooled)

    def predict(self, obs_t: np.ndarray, obs_t1: np.ndarray) -> int:
        """Global action id; argmax over the masked head, lowest id on ties."""
        x = np.concatenate([normalize(obs_t), normalize(obs_t1)], axis=0)
        with torch.no_grad():
            logits = self.forward(torch.as_tensor(x[None], dtype=torch.float32))[0]
        return self.actions[int(torch.argmax(logits))]


def predict_action(model: IvdModel, obs_t: np.ndarray, obs_t1: np.ndarray) -> int:
    return model.predict(obs_t, obs_t1)


def build_pairs(
    records: Sequence[TrajectoryRecord], include_terminal: bool = True
) -> tuple[np.ndarray, np.ndarray, list[tuple[np.ndarray, np.ndarray, int]]]:
    """(inputs, labels, raw pairs) from consecutive observations.

    Each episode also contributes (final, final) -> done when
    ``include_terminal``, teaching the model that no visible change after a
    completed task means stop."""
    raw = []
    for rec in records:
        if rec.observation_only:
            raise IvdError("cannot build action pairs from observation-only records")
        obs = rec.observations
        for t, action in enumerate(rec.actions):
            raw.append((obs[t], obs[t + 1], int(action)))
        if include_terminal:
            raw.append((obs[-1], obs[-1], int(Action.DONE)))
    if not raw:
        raise IvdError("no transition pairs in dataset")
    inputs = np.stack(
        [np.concatenate([normalize(a), normalize(b)], axis=0) for a, b, _ in raw]
    )
    labels = np.array([a for _, _, a in raw], dtype=np.int64)
    return inputs, labels, raw


def transition_consistent(
    obs_t: np.ndarray, obs_t1: np.ndarray, action: int, mask: ActionSpaceMask
) -> bool:
    """Does replaying ``action`` from obs_t reproduce obs_t1?

    A cell the agent vacates is exempt from comparison: its contents are
    hidden under the agent marker in obs_t, so no replay can recover them
    (an agent standing in an open doorway, for instance).  The exemption
    only applies when both the real and the replayed frame show the agent
    gone from that cell; if either keeps the agent in place the cell carries
    its facing direction and must match."""
    predicted = replay_observation(obs_t, action, mask)
    if np.array_equal(predicted, obs_t1):
        return True
    if predicted.shape != obs_t1.shape:
        return False
    diff = np.any(predicted != obs_t1, axis=2)
    rows, cols = np.nonzero(obs_t[:, :, 0] == Object.AGENT)
    if len(rows) == 1:
        r0, c0 = rows[0], cols[0]
        vacated = (
            predicted[r0, c0, 0] != Object.AGENT
            and obs_t1[r0, c0, 0] != Object.AGENT
        )
        if vacated:
            diff[r0, c0] = False
    return not diff.any()


@dataclasses.dataclass
class TrainedIvd:
    model: IvdModel
    agent_id: int
    accuracy: float  # held-out consistent-action accuracy
    label_accuracy: float  # held-out exact-label accuracy
    curve: list[tuple[int, float]]
    train_config: IvdTrainConfig


def consistent_accuracy(
    model: IvdModel, raw_pairs: Sequence[tuple[np.ndarray, np.ndarray, int]]
) -> float:
    hits = 0
    for obs_t, obs_t1, _ in raw_pairs:
        pred = model.predict(obs_t, obs_t1)
        if transition_consistent(obs_t, obs_t1, pred, model.mask):
            hits += 1
    return hits / len(raw_pairs)


def train_ivd(
    records: Sequence[TrajectoryRecord],
    spec: AgentTypeSpec,
    train_cfg: IvdTrainConfig,
    out_path=None,
) -> TrainedIvd:
    """Cross-entropy training on transition pairs from a single agent's data.

    Records are split by episode into train/held-out; the reported accuracy
    is consistent-action accuracy on held-out pairs."""
    if any(r.agent_id != spec.agent_id for r in records):
        raise IvdError("ivd training data must come from a single agent")
    for rec in records:
        bad = [a for a in rec.actions if not spec.mask.allows(a)]
        if bad:
            raise IvdError(f"record seed {rec.seed} contains off-mask actions {bad}")

    torch.set_num_threads(max(1, train_cfg.threads))
    torch.manual_seed(seeding.derive_seed("ivd-torch-init", spec.agent_id, train_cfg.seed) % 2**63)
    rng = seeding.generator("ivd-train", spec.agent_id, train_cfg.seed)

    order = rng.permutation(len(records))
    n_hold = max(1, int(round(train_cfg.holdout * len(records)))) if len(records) > 1 else 0
    hold_recs = [records[int(i)] for i in order[:n_hold]]
    train_recs = [records[int(i)] for i in order[n_hold:]]

    inputs, labels, _ = build_pairs(train_recs)
    class_of = {a: i for i, a in enumerate(spec.mask.allowed_ids())}
    classes = np.array([class_of[a] for a in labels], dtype=np.int64)

    grid_size = records[0].observations[0].shape[0]
    model = IvdModel(spec.mask, grid_size, width=train_cfg.width, depth=train_cfg.depth)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)

    x_all = torch.as_tensor(inputs, dtype=torch.float32)
    y_all = torch.as_tensor(classes)
    curve = []
    model.train()
    n = len(x_all)
    step_no = 0
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for lo in range(0, n, train_cfg.batch_size):
            idx = torch.as_tensor(perm[lo : lo + train_cfg.batch_size].copy())
            logits = model(x_all[idx])
            loss = F.cross_entropy(logits, y_all[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            step_no += 1
        curve.append((step_no, float(np.mean(losses))))

    model.eval()
    if hold_recs:
        _, hold_labels, hold_raw = build_pairs(hold_recs)
        acc = consistent_accuracy(model, hold_raw)
        preds = [model.predict(a, b) for a, b, _ in hold_raw]
        label_acc = float(np.mean([p == l for p, l in zip(preds, hold_labels)]))
    else:
        acc = label_acc = float("nan")

    result = TrainedIvd(
        model=model,
        agent_id=spec.agent_id,
        accuracy=acc,
        label_accuracy=label_acc,
        curve=curve,
        train_config=train_cfg,
    )
    if out_path is not None:
        save_ivd(out_path, result)
    return result


def save_ivd(path, result: TrainedIvd) -> None:
    model = result.model
    header = {
        "kind": "ivd",
        "agent_id": result.agent_id,
        "mask_bits": list(model.mask.allowed_ids()),
        "grid_size": model.grid_size,
        "width": model.width,
        "depth": model.depth,
        "accuracy": result.accuracy,
        "label_accuracy": result.label_accuracy,
        "curve": [[int(s), float(v)] for s, v in result.curve],
        "train_config": dataclasses.asdict(result.train_config),
    }
    arrays = {
        f"param.{name}": t.detach().cpu().numpy() for name, t in model.state_dict().items()
    }
    checkpoint.save_arrays(path, header, arrays)


def load_ivd(path) -> TrainedIvd:
    header, arrays = checkpoint.load_arrays(path)
    if header.get("kind") != "ivd":
        raise IvdError(f"{path}: not an ivd checkpoint")
    model = IvdModel(
        ActionSpaceMask.from_ids(header["mask_bits"]),
        header["grid_size"],
        width=header["width"],
        depth=header["depth"],
    )
    state = {
        name[len("param.") :]: torch.as_tensor(arr)
        for name, arr in arrays.items()
        if name.startswith("param.")
    }
    model.load_state_dict(state)
    model.eval()
    return TrainedIvd(
        model=model,
        agent_id=int(header["agent_id"]),
        accuracy=float(header["accuracy"]),
        label_accuracy=float(header["label_accuracy"]),
        curve=[tuple(p) for p in header["curve"]],
        train_config=IvdTrainConfig(**header["train_config"]),
    )
