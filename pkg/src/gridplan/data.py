"""Trajectory datasets: generation, byte-stable storage, pooling, window
sampling, and granularity subsampling.

File format ("GPDS"): magic, version, JSON manifest, then a flat record
stream of integer grids.  No timestamps or machine-dependent fields, so the
same logical dataset always serializes to identical bytes; the manifest
carries a sha256 of the record payload and an embedded agent registry so
records can be replay-validated without external lookups.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from . import seeding
from .agents import ActionSpaceMask, AgentTypeSpec
from .env import (
    EnvConfig,
    EnvKind,
    TaskInstruction,
    encode_observation,
    is_success,
    reset,
    step,
)
from .expert import InfeasibleTaskError, TrajectoryRecord, plan_demo

MAGIC = b"GPDS"
VERSION = 1


class DataError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class DatasetManifest:
    records: int
    per_agent: dict[int, int]
    env_kind: str
    visual: bool
    granularity: int
    checksum: str
    grid_size: int
    agents: dict[int, dict]  # agent_id -> {"name", "bits", "split"}

    def agent_mask(self, agent_id: int) -> ActionSpaceMask:
        entry = self.agents.get(agent_id)
        if entry is None:
            raise DataError(f"agent {agent_id} not in dataset manifest")
        return ActionSpaceMask.from_ids(entry["bits"])

    def agent_specs(self) -> list[AgentTypeSpec]:
        """Rebuild the registry entries this dataset was generated with."""
        return [
            AgentTypeSpec(
                agent_id=aid,
                name=entry["name"],
                mask=ActionSpaceMask.from_ids(entry["bits"]),
                split=entry["split"],
            )
            for aid, entry in sorted(self.agents.items())
        ]


class Window(NamedTuple):
    """A training window: conditioning frame plus three target frames."""

    x0: np.ndarray
    targets: tuple[np.ndarray, np.ndarray, np.ndarray]
    agent_id: int
    instruction: TaskInstruction


WINDOW = 4  # x0 + 3 target frames


def sample_window(record: TrajectoryRecord, rng: np.random.Generator) -> Window:
    """Uniform 4-observation window; short trajectories are right-padded by
    repeating the final observation."""
    obs = record.observations
    n_starts = max(len(obs) - (WINDOW - 1), 1)
    start = int(rng.integers(0, n_starts))
    frames = [obs[min(start + i, len(obs) - 1)] for i in range(WINDOW)]
    return Window(
        x0=frames[0],
        targets=(frames[1], frames[2], frames[3]),
        agent_id=record.agent_id,
        instruction=record.instruction,
    )


def subsample_granularity(record: TrajectoryRecord, n: int) -> TrajectoryRecord:
    """Keep observations {0, n, 2n, ...} plus the final one; drop actions.

    With stride n each kept frame is a goal n environment steps ahead, to be
    reached by a goal-conditioned (or oracle) low-level policy.
    """
    if n < 1:
        raise DataError("granularity must be >= 1")
    if record.observation_only:
        raise DataError("record is already observation-only")
    last = len(record.observations) - 1
    keep = sorted(set(range(0, last + 1, n)) | {last})
    return dataclasses.replace(
        record,
        observations=tuple(record.observations[i] for i in keep),
        actions=(),
    )


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def generate_records(
    env_cfg: EnvConfig,
    spec: AgentTypeSpec,
    n: int,
    seed: int,
    visual: bool = False,
) -> list[TrajectoryRecord]:
    """n expert trajectories, deterministic in seed.

    Layout seeds come from a derived stream; layouts the agent's mask cannot
    solve are skipped deterministically (this matters for masks that cannot
    reach every cell parity, like the diagonal-only agent)."""
    if n < 1:
        raise DataError("need n >= 1")
    records = []
    attempts = 0
    limit = 64 * n + 1024
    while len(records) < n:
        if attempts >= limit:
            raise DataError(
                f"agent {spec.agent_id} solved only {len(records)}/{n} layouts "
                f"after {attempts} attempts"
            )
        layout_seed = seeding.derive_seed(
            "dataset", env_cfg.kind.value, spec.agent_id, seed, attempts
        )
        attempts += 1
        state, instruction = reset(env_cfg, layout_seed)
        try:
            rec = plan_demo(
                state, instruction, spec, visual=visual, env_kind=env_cfg.kind.value
            )
        except InfeasibleTaskError:
            continue
        records.append(rec)
    return records


def generate_dataset(
    env_cfg: EnvConfig,
    spec: AgentTypeSpec,
    n: int,
    seed: int,
    visual: bool = False,
    out_path=None,
) -> tuple[list[TrajectoryRecord], DatasetManifest]:
    records = generate_records(env_cfg, spec, n, seed, visual=visual)
    manifest = build_manifest(
        records, env_cfg.kind.value, visual, 1, env_cfg.grid_size, [spec]
    )
    if out_path is not None:
        write_dataset(out_path, records, manifest)
    return records, manifest


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def pool(
    datasets: Sequence[tuple[list[TrajectoryRecord], DatasetManifest]],
) -> tuple[list[TrajectoryRecord], DatasetManifest]:
    """Concatenate per-agent datasets into a mixture, keeping agent tags."""
    if not datasets:
        raise DataError("nothing to pool")
    kinds = {m.env_kind for _, m in datasets}
    visuals = {m.visual for _, m in datasets}
    grans = {m.granularity for _, m in datasets}
    if len(kinds) > 1:
        raise DataError(f"cannot pool mixed env kinds: {sorted(kinds)}")
    if len(visuals) > 1:
        raise DataError("cannot pool visual with non-visual datasets")
    if len(grans) > 1:
        raise DataError("cannot pool mixed granularities")
    records: list[TrajectoryRecord] = []
    agents: dict[int, dict] = {}
    for recs, manifest in datasets:
        records.extend(recs)
        for aid, entry in manifest.agents.items():
            if aid in agents and agents[aid] != entry:
                raise DataError(f"conflicting registry entries for agent {aid}")
            agents[aid] = entry
    first = datasets[0][1]
    return records, _manifest_for(
        records, first.env_kind, first.visual, first.granularity, first.grid_size, agents
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _registry_dict(specs: Iterable[AgentTypeSpec]) -> dict[int, dict]:
    return {
        s.agent_id: {
            "name": s.name,
            "bits": list(s.mask.allowed_ids()),
            "split": s.split,
        }
        for s in specs
    }


def _encode_records(records: Sequence[TrajectoryRecord]) -> bytes:
    buf = io.BytesIO()
    for rec in records:
        h, w = rec.observations[0].shape[:2]
        buf.write(
            struct.pack(
                "<BBIQHHBB",
                rec.instruction.color_id,
                rec.instruction.object_id,
                rec.agent_id,
                rec.seed,
                len(rec.observations),
                len(rec.actions),
                h,
                w,
            )
        )
        buf.write(bytes(rec.actions))
        for obs in rec.observations:
            buf.write(np.ascontiguousarray(obs, dtype=np.uint8).tobytes())
    return buf.getvalue()


def _manifest_for(records, env_kind, visual, granularity, grid_size, agents):
    per_agent: dict[int, int] = {}
    for rec in records:
        per_agent[rec.agent_id] = per_agent.get(rec.agent_id, 0) + 1
    checksum = hashlib.sha256(_encode_records(records)).hexdigest()
    return DatasetManifest(
        records=len(records),
        per_agent=per_agent,
        env_kind=env_kind,
        visual=visual,
        granularity=granularity,
        checksum=checksum,
        grid_size=grid_size,
        agents=agents,
    )


def build_manifest(
    records, env_kind, visual, granularity, grid_size, specs: Iterable[AgentTypeSpec]
) -> DatasetManifest:
    return _manifest_for(
        records, env_kind, visual, granularity, grid_size, _registry_dict(specs)
    )


def subsample_dataset(
    records: Sequence[TrajectoryRecord], manifest: DatasetManifest, n: int
) -> tuple[list[TrajectoryRecord], DatasetManifest]:
    """Apply stride-n subsampling to every record, keeping the registry."""
    subs = [subsample_granularity(r, n) for r in records]
    return subs, _manifest_for(
        subs, manifest.env_kind, manifest.visual, n, manifest.grid_size,
        manifest.agents,
    )


def write_dataset(path, records: Sequence[TrajectoryRecord], manifest: DatasetManifest) -> None:
    payload = _encode_records(records)
    if hashlib.sha256(payload).hexdigest() != manifest.checksum:
        raise DataError("manifest checksum does not match records")
    header = dataclasses.asdict(manifest)
    header["per_agent"] = {str(k): v for k, v in header["per_agent"].items()}
    header["agents"] = {str(k): v for k, v in header["agents"].items()}
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(hdr)))
        f.write(hdr)
        f.write(payload)


def load_dataset(path, validate: str = "checksum"):
    """Read a dataset file.

    validate: "none", "checksum" (default; verifies the payload hash), or
    "replay" (additionally regenerates every episode from its seed and checks
    the stored observations and success outcome; slow, exact).
    """
    if validate not in ("none", "checksum", "replay"):
        raise DataError(f"unknown validation level {validate!r}")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a dataset file")
    version, hdr_len = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    header = json.loads(blob[16 : 16 + hdr_len].decode())
    header["per_agent"] = {int(k): v for k, v in header["per_agent"].items()}
    header["agents"] = {int(k): v for k, v in header["agents"].items()}
    manifest = DatasetManifest(**header)
    payload = blob[16 + hdr_len :]
    if validate != "none":
        if hashlib.sha256(payload).hexdigest() != manifest.checksum:
            raise DataError(f"{path}: checksum mismatch")
    records = _decode_records(payload, manifest)
    if len(records) != manifest.records:
        raise DataError(
            f"{path}: manifest says {manifest.records} records, found {len(records)}"
        )
    if validate == "replay":
        replay_validate(records, manifest)
    return records, manifest


def _decode_records(payload: bytes, manifest: DatasetManifest) -> list[TrajectoryRecord]:
    records = []
    off = 0
    head = struct.Struct("<BBIQHHBB")
    while off < len(payload):
        color, obj, agent_id, seed, n_obs, n_actions, h, w = head.unpack_from(payload, off)
        off += head.size
        actions = tuple(payload[off : off + n_actions])
        off += n_actions
        obs = []
        frame = h * w * 3
        for _ in range(n_obs):
            arr = np.frombuffer(payload, dtype=np.uint8, count=frame, offset=off)
            obs.append(arr.reshape(h, w, 3).copy())
            off += frame
        records.append(
            TrajectoryRecord(
                instruction=TaskInstruction.go_to(color, obj),
                observations=tuple(obs),
                actions=actions,
                agent_id=agent_id,
                env_kind=manifest.env_kind,
                seed=seed,
            )
        )
    return records


def replay_validate(records: Sequence[TrajectoryRecord], manifest: DatasetManifest) -> None:
    """Regenerate each episode from its seed and verify every stored frame.

    Only full-granularity records can be replayed; subsampled datasets
    validate by checksum alone."""
    if manifest.granularity != 1:
        return
    env_cfg = EnvConfig.make(EnvKind(manifest.env_kind))
    for i, rec in enumerate(records):
        mask = manifest.agent_mask(rec.agent_id)
        state, instruction = reset(env_cfg, rec.seed)
        if (instruction.color_id, instruction.object_id) != (
            rec.instruction.color_id,
            rec.instruction.object_id,
        ):
            raise DataError(f"record {i}: instruction does not match its seed")
        tint = rec.agent_id if manifest.visual else None
        if not np.array_equal(encode_observation(state, tint), rec.observations[0]):
            raise DataError(f"record {i}: initial observation mismatch")
        for t, action in enumerate(rec.actions):
            state, _, _ = step(state, action, mask)
            if not np.array_equal(encode_observation(state, tint), rec.observations[t + 1]):
                raise DataError(f"record {i}: observation {t + 1} mismatch")
        if not is_success(state):
            raise DataError(f"record {i}: replay did not end in success")
