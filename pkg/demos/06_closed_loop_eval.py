"""Close the loop: planner proposes frames, inverse dynamics picks actions.

Trains a small planner and an inverse dynamics model for agent 0, wires
them into the plan-label-execute policy, and scores completion over a
handful of episodes.  The expert policy runs alongside as the ceiling.
Budget here is demo-sized; expect the planner to land somewhere between
"random" and "decent", not at the expert.
"""

import time

from gridplan.agents import builtin_agents
from gridplan.data import generate_records
from gridplan.diffusion import DiffusionConfig
from gridplan.env import EnvConfig, EnvKind
from gridplan.inverse_dynamics import IvdTrainConfig, train_ivd
from gridplan.planner import ConditioningMode, PlannerTrainConfig, train_planner
from gridplan.policy import PolicyHandle, evaluate, make_ucap_plan_fn

EPISODES = 16


def main():
    cfg = EnvConfig.make(EnvKind.GOTO_OBJ)
    spec = builtin_agents()[0]

    t0 = time.time()
    records = generate_records(cfg, spec, 400, seed=0)
    print(f"{len(records)} records in {time.time() - t0:.1f}s")

    print("training inverse dynamics (what action led from frame t to "
          "t+1?)...")
    ivd = train_ivd(records, spec,
                    IvdTrainConfig(epochs=20, batch_size=128, lr=1e-3,
                                   width=64, depth=3, seed=0))
    print(f"  held-out consistent accuracy {ivd.accuracy:.3f}")

    print("training planner (4000 updates)...")
    planner = train_planner(
        records, [spec], cfg, ConditioningMode.NONE,
        PlannerTrainConfig(updates=4000, batch_size=64, lr=2e-4, width=48,
                           depth=3, log_every=1000, seed=0),
        diff_cfg=DiffusionConfig(sampling_steps=16))

    ucap = PolicyHandle(kind="ucap",
                        plan_fn=make_ucap_plan_fn(planner, cfg),
                        ivds={spec.agent_id: ivd})
    expert = PolicyHandle(kind="expert")

    for name, handle in (("expert", expert), ("planner+ivd", ucap)):
        t0 = time.time()
        report = evaluate(handle, cfg, spec, episodes=EPISODES, seed=0)
        print(f"{name:<12} completion {report.completion_rate:.3f}  "
              f"mean steps {report.mean_steps:.1f}  "
              f"({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
