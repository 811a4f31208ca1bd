"""Tour of the gridworld: reset a task, look around, take a few steps.

Run:  python3 demos/01_world_tour.py [seed]
"""

import sys

from gridplan.agents import builtin_agents
from gridplan.env import (
    Action,
    EnvConfig,
    EnvKind,
    encode_observation,
    is_success,
    reset,
    step,
)
from gridplan.render import ascii_grid


def main():
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 7
    cfg = EnvConfig.make(EnvKind.GOTO_OBJ)
    state, instruction = reset(cfg, seed)
    mask = builtin_agents()[0].mask  # the vanilla agent, nothing masked

    print(f"seed {seed}, grid {cfg.grid_size}x{cfg.grid_size}, "
          f"budget {cfg.max_steps} steps")
    print(f"mission: {instruction.text}")
    print(ascii_grid(encode_observation(state)))

    # Drive a short fixed action string so the printout is reproducible.
    for action in (Action.RIGHT, Action.FORWARD, Action.FORWARD):
        state, _, done = step(state, action, mask)
        print(f"\nafter {action.name}:")
        print(ascii_grid(encode_observation(state)))
        if done:
            break

    print(f"\nsuccess: {is_success(state)}  elapsed: {state.step_count}")
    obs = encode_observation(state)
    print(f"observation tensor: shape {obs.shape}, dtype {obs.dtype}, "
          f"channels = (object, color, state)")


if __name__ == "__main__":
    main()
