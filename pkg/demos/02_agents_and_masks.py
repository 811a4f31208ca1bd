"""The eight builtin agent types and what their action masks do in practice.

Each agent sees the same task but can only use a subset of the 19 actions.
The expert routes around the missing ones, so the same layout produces a
different optimal plan per agent.
"""

from gridplan.agents import builtin_agents
from gridplan.env import Action, EnvConfig, EnvKind, reset
from gridplan.expert import plan_actions

SEED = 11


def main():
    cfg = EnvConfig.make(EnvKind.GOTO_OBJ)
    agents = builtin_agents()

    print("builtin agents:")
    for spec in agents:
        ids = sorted(spec.mask.allowed_ids())
        names = " ".join(Action(i).name.lower() for i in ids)
        print(f"  [{spec.agent_id}] {spec.name:<12} {len(ids):2d} actions: "
              f"{names}")

    state, instruction = reset(cfg, SEED)
    print(f"\nmission (seed {SEED}): {instruction.text}")
    print("optimal plan per agent:")
    for spec in agents:
        plan = plan_actions(state, instruction, spec)
        if plan is None:
            print(f"  [{spec.agent_id}] {spec.name:<12} infeasible")
        else:
            moves = " ".join(Action(a).name.lower() for a in plan)
            print(f"  [{spec.agent_id}] {spec.name:<12} {len(plan)} steps: "
                  f"{moves}")

    # A mask can make a task impossible.  Feasibility varies by layout, so
    # scan a few seeds for one the most restricted agent cannot solve.
    restricted = agents[7]
    for probe in range(50):
        state, instruction = reset(cfg, probe)
        if plan_actions(state, instruction, restricted) is None:
            print(f"\nseed {probe} is infeasible for {restricted.name}: "
                  f"the agent idles until the step budget runs out")
            break


if __name__ == "__main__":
    main()
