"""Train a small diffusion planner and look at what it dreams up.

This uses a deliberately tiny budget (2000 updates, width 32) so it runs
in a couple of minutes on a laptop CPU.  The plans will be rough; the point
is the mechanics: records in, denoiser out, three future frames sampled
per call.   Use the desk profile (20k updates) for plans that actually
track the task, and the paper profile for the real thing.
"""

from gridplan.agents import builtin_agents
from gridplan.data import generate_records
from gridplan.diffusion import DiffusionConfig
from gridplan.env import EnvConfig, EnvKind, encode_observation, reset
from gridplan.planner import (
    ConditioningMode,
    PlannerTrainConfig,
    make_bundle,
    normalize,
    sample_plan,
    train_planner,
)
from gridplan.render import ascii_panels

UPDATES = 2000


def main():
    cfg = EnvConfig.make(EnvKind.GOTO_OBJ)
    spec = builtin_agents()[0]

    print("generating 200 expert records for agent 0...")
    records = generate_records(cfg, spec, 200, seed=0)

    train_cfg = PlannerTrainConfig(updates=UPDATES, batch_size=64, lr=3e-4,
                                   width=32, depth=2, log_every=500, seed=0)
    print(f"training (updates={train_cfg.updates}, width={train_cfg.width}, "
          f"depth={train_cfg.depth})...")
    trained = train_planner(records, [spec], cfg, ConditioningMode.NONE,
                            train_cfg, diff_cfg=DiffusionConfig())
    print(f"final loss {trained.curve[-1][1]:.4f}")

    state, instruction = reset(cfg, 5)
    x0 = encode_observation(state)
    # single-goal tasks carry no instruction conditioning, hence None
    bundle = make_bundle(ConditioningMode.NONE, normalize(x0), None)
    plan = sample_plan(trained.model, bundle, seed=0)
    frames = [x0] + plan.decoded_frames()
    print(f"\nmission: {instruction.text}")
    print(ascii_panels(frames, ["x0 (given)", "frame 1", "frame 2",
                                "frame 3"]))
    print("the same thing, from the command line:")
    print("  gridplan inspect-plan --checkpoint <planner.gpck> "
          "--env gotoobj --agent 0")


if __name__ == "__main__":
    main()
