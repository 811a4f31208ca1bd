"""Command-line flows, driven in-process through main(argv).

Exit code contract: 0 success, 2 usage, 3 data/config, 4 training/sampling.
Training commands run against a throwaway micro config so each flow takes
well under a second of optimization.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from gridplan import data as data_mod
from gridplan.checkpoint import load_arrays
from gridplan.cli import main
from gridplan.config import (
    DataSection,
    EnvSection,
    EvalSection,
    ExperimentConfig,
    IlSection,
    IvdSection,
    PlannerSection,
    RunSection,
    write_config,
)
from gridplan.diffusion import DiffusionConfig
from gridplan.policy import load_report


@pytest.fixture(scope="module")
def micro_ini(tmp_path_factory):
    cfg = ExperimentConfig(
        run=RunSection(seeds=(0,), profile="desk", workers=1),
        env=EnvSection(kind="gotoobj"),
        data=DataSection(n_small=6, mixture_factor=2),
        diffusion=DiffusionConfig(sampling_steps=4),
        planner=PlannerSection(updates=2, finetune_updates=1, batch_size=2,
                               lr=1e-3, width=16, depth=1, log_every=1),
        ivd=IvdSection(epochs=1, batch_size=32, lr=1e-3, width=16, depth=1),
        il=IlSection(epochs_small=1, epochs_large=1, epochs_union=1,
                     epochs_heads=1, finetune_epochs=1, batch_size=32,
                     lr=1e-3, width=16, depth=1, hidden=16, goal_horizon=2),
        eval=EvalSection(episodes=1, replan_every=3, goal_budget=4),
    )
    path = tmp_path_factory.mktemp("cfg") / "micro.ini"
    write_config(path, cfg)
    return str(path)


@pytest.fixture(scope="module")
def flow(tmp_path_factory, micro_ini):
    """One gen-data + train pass whose artifacts later commands reuse."""
    root = tmp_path_factory.mktemp("flow")
    data_dir = root / "data"
    assert main(["gen-data", "--env", "gotoobj", "--agent", "0",
                 "--n", "6", "--seed", "0", "--out", str(data_dir)]) == 0
    dataset = str(data_dir / "data_gotoobj_a0_n6_s0.gpds")
    assert os.path.exists(dataset)

    planner = str(root / "planner.gpck")
    assert main(["train", "--kind", "planner", "--data", dataset,
                 "--config", micro_ini, "--out", planner]) == 0
    ivd = str(root / "ivd.gpck")
    assert main(["train", "--kind", "ivd", "--data", dataset,
                 "--config", micro_ini, "--out", ivd]) == 0
    il = str(root / "il.gpck")
    assert main(["train", "--kind", "il", "--variant", "single",
                 "--data", dataset, "--config", micro_ini, "--out", il]) == 0
    return {"root": root, "dataset": dataset, "planner": planner,
            "ivd": ivd, "il": il}


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def test_gen_data_writes_a_loadable_dataset(flow):
    records, manifest = data_mod.load_dataset(flow["dataset"])
    assert len(records) == 6
    assert [s.agent_id for s in manifest.agent_specs()] == [0]


def test_gen_data_is_byte_deterministic(tmp_path):
    args = ["gen-data", "--env", "gotoobj", "--agent", "1", "--n", "3",
            "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    name = "data_gotoobj_a1_n3_s5.gpds"
    a = (tmp_path / "a" / name).read_bytes()
    b = (tmp_path / "b" / name).read_bytes()
    assert a == b


def test_gen_data_all_id_emits_six_plus_mixture(tmp_path, capsys):
    assert main(["gen-data", "--env", "gotoobj", "--all-id", "--n", "2",
                 "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out.strip().splitlines()
    assert len(printed) == 7
    mix = printed[-1]
    assert "mix_n12" in mix
    records, manifest = data_mod.load_dataset(mix)
    assert len(records) == 12
    assert len(manifest.agent_specs()) == 6


def test_gen_data_granularity_tag_and_manifest(tmp_path):
    assert main(["gen-data", "--env", "gotoobj", "--agent", "0", "--n", "2",
                 "--granularity", "2", "--out", str(tmp_path)]) == 0
    path = tmp_path / "data_gotoobj_a0_n2_s0_g2.gpds"
    assert path.exists()
    _, manifest = data_mod.load_dataset(str(path))
    assert manifest.granularity == 2


def test_gen_data_rejects_bad_n(tmp_path, capsys):
    assert main(["gen-data", "--env", "gotoobj", "--agent", "0", "--n", "0",
                 "--out", str(tmp_path)]) == 3
    assert "error:" in capsys.readouterr().err


def test_unknown_env_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--env", "maze", "--agent", "0", "--n", "1",
              "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_missing_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_trained_checkpoints_have_kinds(flow):
    assert load_arrays(flow["planner"])[0]["kind"] == "planner"
    assert load_arrays(flow["ivd"])[0]["kind"] == "ivd"
    assert load_arrays(flow["il"])[0]["kind"] == "il"


def test_train_goal_policy(flow, micro_ini, tmp_path):
    out = str(tmp_path / "goal.gpck")
    assert main(["train", "--kind", "goal", "--data", flow["dataset"],
                 "--config", micro_ini, "--out", out]) == 0
    assert load_arrays(out)[0]["kind"] == "il"


def test_train_pools_repeated_data_flags(flow, micro_ini, tmp_path, capsys):
    second = str(tmp_path / "data2")
    assert main(["gen-data", "--env", "gotoobj", "--agent", "1", "--n", "4",
                 "--out", second]) == 0
    capsys.readouterr()
    out = str(tmp_path / "union.gpck")
    assert main(["train", "--kind", "il", "--variant", "union-onehot",
                 "--data", flow["dataset"],
                 "--data", os.path.join(second, "data_gotoobj_a1_n4_s0.gpds"),
                 "--config", micro_ini, "--out", out]) == 0
    assert "holdout accuracy" in capsys.readouterr().out


def test_train_ivd_rejects_pooled_data(flow, micro_ini, tmp_path, capsys):
    second = str(tmp_path / "data2")
    assert main(["gen-data", "--env", "gotoobj", "--agent", "1", "--n", "4",
                 "--out", second]) == 0
    code = main(["train", "--kind", "ivd",
                 "--data", flow["dataset"],
                 "--data", os.path.join(second, "data_gotoobj_a1_n4_s0.gpds"),
                 "--config", micro_ini, "--out", str(tmp_path / "x.gpck")])
    assert code == 3
    assert "single-agent" in capsys.readouterr().err


def test_train_visual_conditioning_needs_visual_data(flow, micro_ini,
                                                     tmp_path, capsys):
    code = main(["train", "--kind", "planner", "--cond", "visual",
                 "--data", flow["dataset"], "--config", micro_ini,
                 "--out", str(tmp_path / "x.gpck")])
    assert code == 3
    assert "visual" in capsys.readouterr().err


def test_train_missing_dataset_is_a_data_error(micro_ini, tmp_path, capsys):
    code = main(["train", "--kind", "ivd", "--data",
                 str(tmp_path / "nope.gpds"), "--config", micro_ini,
                 "--out", str(tmp_path / "x.gpck")])
    assert code == 3


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def test_eval_planner_policy_writes_report(flow, tmp_path, capsys):
    out = str(tmp_path / "report.json")
    code = main(["eval", "--policy", flow["planner"], "--ivd", flow["ivd"],
                 "--env", "gotoobj", "--agent", "0", "--episodes", "2",
                 "--out", out])
    assert code == 0
    printed = capsys.readouterr().out
    assert "completion_rate" in printed
    report = load_report(out)
    assert report.episodes == 2
    assert report.agent_id == 0


def test_eval_planner_without_ivd_is_usage_error(flow):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--policy", flow["planner"], "--env", "gotoobj",
              "--agent", "0", "--episodes", "1"])
    assert exc.value.code == 2


def test_eval_il_policy(flow, capsys):
    code = main(["eval", "--policy", flow["il"], "--env", "gotoobj",
                 "--agent", "0", "--episodes", "2"])
    assert code == 0
    assert "completion_rate" in capsys.readouterr().out


def test_eval_rejects_non_checkpoint_policy(flow, capsys):
    code = main(["eval", "--policy", flow["dataset"], "--env", "gotoobj",
                 "--agent", "0", "--episodes", "1"])
    assert code == 3


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


def test_experiment_diversity_micro(micro_ini, tmp_path, capsys):
    code = main(["experiment", "--protocol", "diversity",
                 "--manifest", micro_ini, "--n-agents", "3",
                 "--out", str(tmp_path), "--quiet"])
    assert code == 0
    out = capsys.readouterr().out
    assert "protocol=diversity" in out
    assert os.path.exists(tmp_path / "diversity" / "report.json")


def test_experiment_unknown_protocol_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["experiment", "--protocol", "made-up"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# inspect-plan
# ---------------------------------------------------------------------------


def test_inspect_plan_ascii(flow, capsys):
    code = main(["inspect-plan", "--checkpoint", flow["planner"],
                 "--env", "gotoobj", "--agent", "0", "--seed", "1"])
    assert code == 0
    out = capsys.readouterr().out
    assert "mission:" in out
    assert "x0" in out and "frame 3" in out


def test_inspect_plan_png(flow, tmp_path, capsys):
    out = str(tmp_path / "plan.png")
    code = main(["inspect-plan", "--checkpoint", flow["planner"],
                 "--env", "gotoobj", "--agent", "0", "--format", "png",
                 "--out", out])
    assert code == 0
    capsys.readouterr()
    with open(out, "rb") as f:
        assert f.read(8) == b"\x89PNG\r\n\x1a\n"


# ---------------------------------------------------------------------------
# console entry point
# ---------------------------------------------------------------------------


def test_console_script_help():
    proc = subprocess.run(["gridplan", "--help"], capture_output=True,
                          text=True, timeout=60)
    assert proc.returncode == 0
    for command in ("gen-data", "train", "eval", "experiment", "inspect-plan"):
        assert command in proc.stdout
