"""Conditional denoiser over 3-frame observation plans.

The network is a small convolutional residual trunk over frames stacked on
channels.  Each noised frame travels with a copy of the conditioning frame
x0 in its channel group; in example mode the agent's scripted demonstration
frames are prepended as further channel groups.  Scalar conditioning (noise
level, instruction, agent identity or capability vector) is fused into every
residual block with FiLM scale/shift.
"""

from __future__ import annotations

import dataclasses
import enum
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint, seeding
from .agents import AgentTypeSpec, action_space_vector, builtin_agents
from .diffusion import DiffusionConfig, DiffusionError, edm_loss, heun_sample
from .env import (
    Color,
    EnvConfig,
    EnvState,
    TARGET_OBJECTS,
    TaskInstruction,
    Direction,
    EnvError,
    _empty_grid,
    encode_observation,
    normalize,
    denormalize,
    step,
)

N_PLAN_FRAMES = 3


class OodAgentError(LookupError):
    """Agent-ID conditioning asked for an id with no trained embedding row."""


class ConditioningMode(str, enum.Enum):
    NONE = "none"
    AGENT_ID = "agent-id"
    ACTION_SPACE = "action-space"
    EXAMPLE = "example"
    VISUAL = "visual"


@dataclasses.dataclass(frozen=True)
class ConditioningBundle:
    """Everything the denoiser may be conditioned on for one sample.

    Exactly the fields demanded by the mode must be present; visual mode
    carries nothing extra because the agent's identity lives in the tinted
    agent cell of x0.
    """

    x0: np.ndarray  # normalized (3, H, W)
    instruction: Optional[TaskInstruction]
    agent_mode: ConditioningMode
    agent_id: Optional[int] = None
    action_vector: Optional[np.ndarray] = None
    example_frames: Optional[np.ndarray] = None  # normalized (K, 3, H, W)

    def __post_init__(self):
        mode = self.agent_mode
        want_id = mode == ConditioningMode.AGENT_ID
        want_vec = mode == ConditioningMode.ACTION_SPACE
        want_ctx = mode == ConditioningMode.EXAMPLE
        if (self.agent_id is not None) != want_id:
            raise EnvError(f"agent_id must be set iff mode is agent-id (mode={mode.value})")
        if (self.action_vector is not None) != want_vec:
            raise EnvError(f"action_vector must be set iff mode is action-space (mode={mode.value})")
        if (self.example_frames is not None) != want_ctx:
            raise EnvError(f"example_frames must be set iff mode is example (mode={mode.value})")


@dataclasses.dataclass(frozen=True)
class PlanTensor:
    """Three generated frames (normalized) plus the conditioning they used."""

    frames_norm: np.ndarray  # (3, 3, H, W)
    bundle: ConditioningBundle

    def decoded_frames(self) -> list[np.ndarray]:
        """The generated frames as integer (H, W, 3) grids."""
        return [denormalize(f) for f in self.frames_norm]


# ---------------------------------------------------------------------------
# Example-mode context
# ---------------------------------------------------------------------------


def max_context_len(agent_specs: Optional[Sequence[AgentTypeSpec]] = None) -> int:
    """Frames in the longest scripted demonstration over the registry:
    one initial frame plus one per movement action."""
    specs = builtin_agents() if agent_specs is None else agent_specs
    return 1 + max(len(s.mask.movement_ids()) for s in specs)


def build_example_context(
    spec: AgentTypeSpec,
    env: EnvConfig,
    seed: int,
    context_len: Optional[int] = None,
) -> np.ndarray:
    """Scripted rollout demonstrating each movement action once.

    The agent is dropped into an obstacle-free arena and executes its
    unmasked movement actions in ascending id order; the observation before
    the first action and after each action is recorded.  The sequence is
    right-padded with its final frame to ``context_len``.  Returns normalized
    frames of shape (context_len, 3, H, W).
    """
    if context_len is None:
        context_len = max_context_len()
    size = env.grid_size
    rng = seeding.generator("example-context", spec.agent_id, spec.name, seed)
    grid = _empty_grid(size)
    # Central start leaves room to wander; jitter is seeded for variety.
    margin = max(2, size // 4)
    col = int(rng.integers(margin, size - margin))
    row = int(rng.integers(margin, size - margin))
    state = EnvState(
        grid=grid,
        agent_pos=(col, row),
        agent_dir=Direction(int(rng.integers(0, 4))),
        carried=None,
        step_count=0,
        max_steps=len(spec.mask.movement_ids()) + 1,
        rng_seed=seed,
        mission=None,
    )
    frames = [normalize(encode_observation(state))]
    for action in spec.mask.movement_ids():
        state, _, _ = step(state, action, spec.mask)
        frames.append(normalize(encode_observation(state)))
    if len(frames) > context_len:
        raise EnvError(
            f"context of {len(frames)} frames exceeds context_len {context_len}"
        )
    while len(frames) < context_len:
        frames.append(frames[-1])
    return np.stack(frames).astype(np.float32)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

_NULL_COLOR_IDX = len(Color)  # reserved instruction-embedding rows
_NULL_OBJECT_IDX = len(TARGET_OBJECTS)
_OBJECT_TO_IDX = {int(o): i for i, o in enumerate(TARGET_OBJECTS)}
N_ID_AGENTS = 6


class _FilmBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, width), width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.film = nn.Linear(width, 2 * width)
        nn.init.zeros_(self.film.weight)
        nn.init.zeros_(self.film.bias)

    def forward(self, x, cond):
        h = self.conv1(F.silu(self.norm(x)))
        scale, shift = self.film(cond).chunk(2, dim=1)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return x + h


class ConditionalDenoiser(nn.Module):
    """EDM-preconditioned denoiser D(x; sigma | x0, instruction, agent)."""

    def __init__(
        self,
        mode: ConditioningMode,
        grid_size: int,
        width: int = 48,
        depth: int = 3,
        context_len: Optional[int] = None,
        n_id_agents: int = N_ID_AGENTS,
        diffusion: Optional[DiffusionConfig] = None,
    ):
        super().__init__()
        mode = ConditioningMode(mode)
        self.mode = mode
        self.grid_size = grid_size
        self.width = width
        self.depth = depth
        self.n_id_agents = n_id_agents
        self.diffusion = diffusion or DiffusionConfig()
        self.context_len = (
            (context_len if context_len is not None else max_context_len())
            if mode == ConditioningMode.EXAMPLE
            else 0
        )

        in_channels = N_PLAN_FRAMES * 6 + self.context_len * 3
        self.stem = nn.Conv2d(in_channels, width, 3, padding=1)
        self.blocks = nn.ModuleList(_FilmBlock(width) for _ in range(depth))
        self.head_norm = nn.GroupNorm(min(8, width), width)
        self.head = nn.Conv2d(width, N_PLAN_FRAMES * 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

        self.sigma_embed = nn.Sequential(
            nn.Linear(1, width), nn.SiLU(), nn.Linear(width, width)
        )
        self.color_embed = nn.Embedding(len(Color) + 1, width)
        self.object_embed = nn.Embedding(len(TARGET_OBJECTS) + 1, width)
        if mode == ConditioningMode.AGENT_ID:
            self.agent_embed = nn.Embedding(n_id_agents, width)
        elif mode == ConditioningMode.ACTION_SPACE:
            self.action_proj = nn.Linear(19, width)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed_instruction(self, instr: Optional[TaskInstruction]) -> torch.Tensor:
        """Learned lookup: color row + object row, with reserved null rows
        for instruction-free tasks."""
        color_idx, object_idx = _instruction_indices(instr)
        dev = self.color_embed.weight.device
        return self.color_embed(
            torch.tensor([color_idx], device=dev)
        )[0] + self.object_embed(torch.tensor([object_idx], device=dev))[0]

    def _condition(self, sigma: torch.Tensor, cond: dict) -> torch.Tensor:
        c_noise = torch.log(sigma) / 4.0
        vec = self.sigma_embed(c_noise[:, None].to(self.head.weight.dtype))
        vec = vec + self.color_embed(cond["color_idx"])
        vec = vec + self.object_embed(cond["object_idx"])
        if self.mode == ConditioningMode.AGENT_ID:
            vec = vec + self.agent_embed(cond["agent_idx"])
        elif self.mode == ConditioningMode.ACTION_SPACE:
            vec = vec + self.action_proj(cond["action_vec"])
        return vec

    def forward(self, noised: torch.Tensor, sigma: torch.Tensor, cond: dict) -> torch.Tensor:
        """The raw network F; use :meth:`denoise` for the preconditioned D."""
        b = noised.shape[0]
        x0 = cond["x0"]
        groups = []
        if self.context_len:
            groups.append(cond["context"].reshape(b, self.context_len * 3, *x0.shape[-2:]))
        for f in range(N_PLAN_FRAMES):
            groups.append(noised[:, 3 * f : 3 * (f + 1)])
            groups.append(x0)
        h = self.stem(torch.cat(groups, dim=1))
        vec = self._condition(sigma, cond)
        for block in self.blocks:
            h = block(h, vec)
        return self.head(F.silu(self.head_norm(h)))

    def denoise(self, noised: torch.Tensor, sigma: torch.Tensor, cond: dict) -> torch.Tensor:
        """EDM parameterization: c_skip * x + c_out * F(c_in * x; c_noise)."""
        sd2 = self.diffusion.sigma_data**2
        sig = sigma.reshape(-1, *([1] * (noised.ndim - 1)))
        denom = sig**2 + sd2
        c_skip = sd2 / denom
        c_out = sig * self.diffusion.sigma_data / torch.sqrt(denom)
        c_in = 1.0 / torch.sqrt(denom)
        return c_skip * noised + c_out * self.forward(c_in * noised, sigma, cond)


def _instruction_indices(instr: Optional[TaskInstruction]) -> tuple[int, int]:
    if instr is None:
        return _NULL_COLOR_IDX, _NULL_OBJECT_IDX
    return int(instr.color_id), _OBJECT_TO_IDX[int(instr.object_id)]


def collate_bundles(
    bundles: Sequence[ConditioningBundle],
    model: ConditionalDenoiser,
    dtype: torch.dtype = torch.float32,
) -> dict:
    """Stack bundles into the tensor dict the denoiser consumes.

    Raises :class:`OodAgentError` when agent-id conditioning meets an id
    outside the trained embedding table instead of silently reusing a row.
    """
    mode = model.mode
    x0 = torch.as_tensor(np.stack([b.x0 for b in bundles]), dtype=dtype)
    color_idx, object_idx = zip(*(_instruction_indices(b.instruction) for b in bundles))
    cond = {
        "x0": x0,
        "color_idx": torch.tensor(color_idx, dtype=torch.long),
        "object_idx": torch.tensor(object_idx, dtype=torch.long),
    }
    if mode == ConditioningMode.AGENT_ID:
        ids = [int(b.agent_id) for b in bundles]
        bad = [i for i in ids if not 0 <= i < model.n_id_agents]
        if bad:
            raise OodAgentError(
                f"no embedding row for agent id(s) {sorted(set(bad))}; "
                f"table covers 0..{model.n_id_agents - 1}"
            )
        cond["agent_idx"] = torch.tensor(ids, dtype=torch.long)
    elif mode == ConditioningMode.ACTION_SPACE:
        cond["action_vec"] = torch.as_tensor(
            np.stack([b.action_vector for b in bundles]), dtype=dtype
        )
    elif mode == ConditioningMode.EXAMPLE:
        ctx = np.stack([b.example_frames for b in bundles])
        if ctx.shape[1] != model.context_len:
            raise DiffusionError(
                f"context length {ctx.shape[1]} != model context_len {model.context_len}"
            )
        cond["context"] = torch.as_tensor(ctx, dtype=dtype)
    return cond


def make_bundle(
    mode: ConditioningMode,
    x0_norm: np.ndarray,
    instruction: Optional[TaskInstruction],
    spec: Optional[AgentTypeSpec] = None,
    example_frames: Optional[np.ndarray] = None,
) -> ConditioningBundle:
    """Build the bundle for one sample, pulling the mode's field from the
    agent spec (id or capability vector) or the prebuilt example context."""
    mode = ConditioningMode(mode)
    kwargs = {}
    if mode == ConditioningMode.AGENT_ID:
        kwargs["agent_id"] = spec.agent_id
    elif mode == ConditioningMode.ACTION_SPACE:
        kwargs["action_vector"] = action_space_vector(spec)
    elif mode == ConditioningMode.EXAMPLE:
        if example_frames is None:
            raise DiffusionError("example mode needs prebuilt context frames")
        kwargs["example_frames"] = example_frames
    return ConditioningBundle(
        x0=x0_norm, instruction=instruction, agent_mode=mode, **kwargs
    )


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_plan(
    model: ConditionalDenoiser,
    bundle: ConditioningBundle,
    seed: int,
    cfg: Optional[DiffusionConfig] = None,
) -> PlanTensor:
    """Run the Heun sampler with this model and conditioning; deterministic
    in the seed.  Returns the three generated frames (normalized) with the
    bundle kept alongside."""
    cfg = cfg or model.diffusion
    cond = collate_bundles([bundle], model)
    size = model.grid_size

    def denoiser(x: np.ndarray, sigma: float, _):
        with torch.no_grad():
            xt = torch.as_tensor(x, dtype=torch.float32)
            st = torch.full((x.shape[0],), sigma, dtype=torch.float32)
            return model.denoise(xt, st, cond).double().numpy()

    out = heun_sample(denoiser, None, (1, N_PLAN_FRAMES * 3, size, size), seed, cfg)
    frames = out[0].astype(np.float32).reshape(N_PLAN_FRAMES, 3, size, size)
    return PlanTensor(frames_norm=frames, bundle=bundle)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PlannerTrainConfig:
    updates: int = 20_000
    batch_size: int = 64
    lr: float = 2e-4
    width: int = 48
    depth: int = 3
    log_every: int = 250
    seed: int = 0
    threads: int = 1


@dataclasses.dataclass
class TrainedPlanner:
    model: ConditionalDenoiser
    mode: ConditioningMode
    env_kind: str
    curve: list[tuple[int, float]]
    train_config: PlannerTrainConfig
    updates_done: int


def _prepare_example_contexts(agent_specs, env_cfg, context_len):
    return {
        s.agent_id: build_example_context(s, env_cfg, seed=0, context_len=context_len)
        for s in agent_specs
    }


def train_planner(
    records,
    agent_specs: Sequence[AgentTypeSpec],
    env_cfg: EnvConfig,
    mode: ConditioningMode,
    train_cfg: PlannerTrainConfig,
    diff_cfg: Optional[DiffusionConfig] = None,
    out_path=None,
    resume_from=None,
    init_model: Optional[ConditionalDenoiser] = None,
) -> TrainedPlanner:
    """Optimize the denoiser on random 4-observation windows of the records.

    Deterministic for a fixed config on a single worker.  ``resume_from``
    restores parameters, optimizer moments, and the data/noise rng so the
    loss sequence continues exactly as if training had never stopped.
    ``init_model`` warm-starts from existing weights (finetuning) without
    restoring optimizer state.
    """
    from .data import sample_window  # local import, data also imports expert

    if not records:
        raise DiffusionError("empty dataset")
    mode = ConditioningMode(mode)
    diff_cfg = diff_cfg or DiffusionConfig()
    torch.set_num_threads(max(1, train_cfg.threads))
    torch.manual_seed(seeding.derive_seed("planner-torch-init", train_cfg.seed) % 2**63)

    specs_by_id = {s.agent_id: s for s in agent_specs}
    contexts = None
    context_len = None
    if mode == ConditioningMode.EXAMPLE:
        context_len = max_context_len(list(specs_by_id.values()))
        contexts = _prepare_example_contexts(specs_by_id.values(), env_cfg, context_len)

    model = init_model
    if model is None:
        model = ConditionalDenoiser(
            mode,
            env_cfg.grid_size,
            width=train_cfg.width,
            depth=train_cfg.depth,
            context_len=context_len,
            diffusion=diff_cfg,
        )
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    rng = seeding.generator("planner-train", train_cfg.seed)
    start_update = 0
    curve: list[tuple[int, float]] = []

    if resume_from is not None:
        header, arrays = checkpoint.load_arrays(resume_from)
        _restore_model(model, arrays)
        _restore_optimizer(optimizer, header, arrays)
        rng.bit_generator.state = _decode_rng_state(header["rng_state"])
        start_update = int(header["updates_done"])
        curve = [tuple(p) for p in header["curve"]]

    instr_null = env_cfg.kind.value == "gotoobj"

    def build_batch():
        idx = rng.integers(0, len(records), size=train_cfg.batch_size)
        bundles, targets = [], []
        for ri in idx:
            rec = records[int(ri)]
            win = sample_window(rec, rng)
            x0, frames = win.x0, win.targets
            spec = specs_by_id.get(rec.agent_id)
            if spec is None:
                raise DiffusionError(f"record from unregistered agent {rec.agent_id}")
            instr = None if instr_null else rec.instruction
            bundles.append(
                make_bundle(
                    mode,
                    normalize(x0),
                    instr,
                    spec=spec,
                    example_frames=None if contexts is None else contexts[rec.agent_id],
                )
            )
            targets.append(np.concatenate([normalize(f) for f in frames], axis=0))
        clean = torch.as_tensor(np.stack(targets), dtype=torch.float32)
        return bundles, clean

    model.train()
    window = []
    for update in range(start_update, train_cfg.updates):
        bundles, clean = build_batch()
        cond = collate_bundles(bundles, model)
        loss = edm_loss(
            lambda x, s, _: model.denoise(x, s, cond), clean, None, rng, diff_cfg
        )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        window.append(float(loss.detach()))
        if (update + 1) % train_cfg.log_every == 0 or update + 1 == train_cfg.updates:
            curve.append((update + 1, float(np.mean(window))))
            window = []

    result = TrainedPlanner(
        model=model,
        mode=mode,
        env_kind=env_cfg.kind.value,
        curve=curve,
        train_config=train_cfg,
        updates_done=train_cfg.updates,
    )
    if out_path is not None:
        save_planner(out_path, result, optimizer, rng)
    return result


# ---------------------------------------------------------------------------
# Checkpoint round trip
# ---------------------------------------------------------------------------


def _encode_rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": st["has_uint32"],
        "uinteger": st["uinteger"],
    }


def _decode_rng_state(enc: dict) -> dict:
    return {
        "bit_generator": enc["bit_generator"],
        "state": {"state": int(enc["state"]), "inc": int(enc["inc"])},
        "has_uint32": enc["has_uint32"],
        "uinteger": enc["uinteger"],
    }


def _model_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {
        f"param.{name}": tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }


def _restore_model(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {
        name[len("param.") :]: torch.as_tensor(arr)
        for name, arr in arrays.items()
        if name.startswith("param.")
    }
    model.load_state_dict(state)


def _optimizer_arrays(optimizer: torch.optim.Adam) -> tuple[dict, dict[str, np.ndarray]]:
    arrays = {}
    steps = {}
    state = optimizer.state_dict()["state"]
    for pid, entry in state.items():
        steps[str(pid)] = float(entry["step"])
        arrays[f"opt.{pid}.exp_avg"] = entry["exp_avg"].detach().cpu().numpy()
        arrays[f"opt.{pid}.exp_avg_sq"] = entry["exp_avg_sq"].detach().cpu().numpy()
    return steps, arrays


def _restore_optimizer(optimizer, header: dict, arrays: dict[str, np.ndarray]) -> None:
    steps = header.get("opt_steps", {})
    if not steps:
        return
    sd = optimizer.state_dict()
    state = {}
    for pid_str, step_val in steps.items():
        pid = int(pid_str)
        state[pid] = {
            "step": torch.tensor(float(step_val)),
            "exp_avg": torch.as_tensor(arrays[f"opt.{pid}.exp_avg"]),
            "exp_avg_sq": torch.as_tensor(arrays[f"opt.{pid}.exp_avg_sq"]),
        }
    sd["state"] = state
    optimizer.load_state_dict(sd)


def save_planner(path, result: TrainedPlanner, optimizer=None, rng=None) -> None:
    model = result.model
    header = {
        "kind": "planner",
        "mode": result.mode.value,
        "env_kind": result.env_kind,
        "grid_size": model.grid_size,
        "width": model.width,
        "depth": model.depth,
        "context_len": model.context_len,
        "n_id_agents": model.n_id_agents,
        "diffusion": dataclasses.asdict(model.diffusion),
        "train_config": dataclasses.asdict(result.train_config),
        "curve": [[int(u), float(v)] for u, v in result.curve],
        "updates_done": result.updates_done,
    }
    arrays = _model_arrays(model)
    if optimizer is not None:
        steps, opt_arrays = _optimizer_arrays(optimizer)
        header["opt_steps"] = steps
        arrays.update(opt_arrays)
    if rng is not None:
        header["rng_state"] = _encode_rng_state(rng)
    checkpoint.save_arrays(path, header, arrays)


def load_planner(path) -> TrainedPlanner:
    header, arrays = checkpoint.load_arrays(path)
    if header.get("kind") != "planner":
        raise DiffusionError(f"{path}: not a planner checkpoint")
    diff_cfg = DiffusionConfig(**header["diffusion"])
    mode = ConditioningMode(header["mode"])
    model = ConditionalDenoiser(
        mode,
        header["grid_size"],
        width=header["width"],
        depth=header["depth"],
        context_len=header["context_len"] if mode == ConditioningMode.EXAMPLE else None,
        n_id_agents=header["n_id_agents"],
        diffusion=diff_cfg,
    )
    _restore_model(model, arrays)
    model.eval()
    return TrainedPlanner(
        model=model,
        mode=mode,
        env_kind=header["env_kind"],
        curve=[tuple(p) for p in header["curve"]],
        train_config=PlannerTrainConfig(**header["train_config"]),
        updates_done=int(header["updates_done"]),
    )
