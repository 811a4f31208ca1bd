"""Run a whole experiment protocol end to end, at toy scale.

The experiment runner owns dataset generation, training, evaluation, and
caching; a protocol is a named grid of (row, agent, seed) cells.  This
drives the 'diversity' protocol with three generated agent types and a
micro training budget so the full pipeline finishes in a few minutes.
Artifacts land in ./out_demo07 and are reused on a second run.

The real configurations live in the profiles: `desk_profile()` for
overnight-on-a-laptop scale, `paper_profile()` for the full recipe.
"""

from gridplan.config import (
    DataSection,
    EnvSection,
    EvalSection,
    ExperimentConfig,
    IlSection,
    IvdSection,
    PlannerSection,
    RunSection,
)
from gridplan.diffusion import DiffusionConfig
from gridplan.experiments import format_summary, run_experiment

OUT = "out_demo07"


def micro_config():
    return ExperimentConfig(
        run=RunSection(seeds=(0,), profile="desk", workers=1),
        env=EnvSection(kind="gotoobj"),
        data=DataSection(n_small=12, mixture_factor=2),
        diffusion=DiffusionConfig(sampling_steps=8),
        planner=PlannerSection(updates=200, finetune_updates=50,
                               batch_size=16, lr=1e-3, width=24, depth=2,
                               log_every=100),
        ivd=IvdSection(epochs=4, batch_size=64, lr=1e-3, width=32, depth=2),
        il=IlSection(epochs_small=2, epochs_large=2, epochs_union=2,
                     epochs_heads=2, finetune_epochs=2, batch_size=64,
                     lr=1e-3, width=32, depth=2, hidden=32, goal_horizon=2),
        eval=EvalSection(episodes=8, replan_every=3, goal_budget=4),
    )


def main():
    cfg = micro_config()
    result = run_experiment("diversity", cfg, OUT, n_agents=3)
    print()
    print(format_summary(result))
    print(f"\nartifacts cached under {OUT}/ (rerun this script: no "
          f"retraining happens)")


if __name__ == "__main__":
    main()
