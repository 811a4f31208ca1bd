"""Imitation baselines: variants, heads, finetuning, goal policies."""

import numpy as np
import pytest
import torch

from gridplan.agents import builtin_agents, get_agent
from gridplan.baselines import (
    BaselineError,
    IlPolicy,
    IlTrainConfig,
    finetune_il,
    load_il,
    oracle_goal_policy,
    save_il,
    train_goal_policy,
    train_il,
)
from gridplan.data import generate_records, pool, generate_dataset
from gridplan.env import EnvConfig, encode_observation, reset, step

TINY = IlTrainConfig(epochs=3, batch_size=64, lr=2e-3, width=16, depth=1,
                     hidden=32, seed=0)


@pytest.fixture(scope="module")
def mixture_records(gotoobj_cfg):
    parts = [generate_dataset(gotoobj_cfg, get_agent(i), 10, seed=0)
             for i in range(3)]
    records, manifest = pool(parts)
    return records, manifest.agent_specs()


class TestVariants:
    def test_single_head_masked(self, small_records):
        result = train_il(small_records, "single", [get_agent(0)], TINY,
                          "gotoobj")
        policy = result.policy
        assert policy.head_actions["0"] == get_agent(0).mask.allowed_ids()
        for rec in small_records[:3]:
            a = policy.act(rec.observations[0], None)
            assert get_agent(0).mask.allows(a)

    def test_single_rejects_multiple_agents(self, small_records):
        with pytest.raises(BaselineError, match="exactly one"):
            train_il(small_records, "single", builtin_agents()[:2], TINY,
                     "gotoobj")

    def test_union_onehot_covers_all_actions(self, mixture_records):
        records, specs = mixture_records
        result = train_il(records, "union-onehot", specs, TINY, "gotoobj")
        policy = result.policy
        assert policy.head_actions["all"] == tuple(range(19))
        assert policy.n_onehot == 8  # room for unseen builtin ids at eval
        a = policy.act(records[0].observations[0], None, agent_id=7)
        assert 0 <= a < 19

    def test_union_onehot_requires_agent_id(self, mixture_records):
        records, specs = mixture_records
        result = train_il(records, "union-onehot", specs, TINY, "gotoobj")
        with pytest.raises(BaselineError, match="agent_id"):
            result.policy.act(records[0].observations[0], None)
        with pytest.raises(BaselineError, match="agent_id"):
            result.policy.act(records[0].observations[0], None, agent_id=11)

    def test_agent_heads_one_per_agent(self, mixture_records):
        records, specs = mixture_records
        result = train_il(records, "agent-heads", specs, TINY, "gotoobj")
        policy = result.policy
        assert set(policy.heads.keys()) == {"0", "1", "2"}
        for s in specs:
            assert policy.head_actions[str(s.agent_id)] == \
                s.mask.allowed_ids()
            a = policy.act(records[0].observations[0], None,
                           agent_id=s.agent_id)
            assert s.mask.allows(a)

    def test_agent_heads_unknown_agent_rejected(self, mixture_records):
        records, specs = mixture_records
        result = train_il(records, "agent-heads", specs, TINY, "gotoobj")
        with pytest.raises(BaselineError, match="no head"):
            result.policy.act(records[0].observations[0], None, agent_id=6)

    def test_unknown_variant(self, small_records):
        with pytest.raises(BaselineError):
            train_il(small_records, "goal", [get_agent(0)], TINY, "gotoobj")
        with pytest.raises(BaselineError, match="unknown variant"):
            IlPolicy("hydra", 8)


class TestTrainingBehaviour:
    def test_accuracy_and_curve(self, small_records):
        cfg = IlTrainConfig(epochs=10, batch_size=64, lr=2e-3, width=32,
                            depth=2, hidden=64, seed=0)
        result = train_il(small_records, "single", [get_agent(0)], cfg,
                          "gotoobj")
        assert 0.0 <= result.accuracy <= 1.0
        assert result.curve[-1][1] < result.curve[0][1]

    def test_deterministic(self, tmp_path, small_records):
        p1, p2 = tmp_path / "a.gpck", tmp_path / "b.gpck"
        train_il(small_records, "single", [get_agent(0)], TINY, "gotoobj",
                 out_path=p1)
        train_il(small_records, "single", [get_agent(0)], TINY, "gotoobj",
                 out_path=p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestFinetune:
    def test_zero_epochs_untouched_except_new_head(self, mixture_records,
                                                   gotoobj_cfg):
        records, specs = mixture_records
        base = train_il(records, "agent-heads", specs, TINY, "gotoobj")
        before = {k: v.clone() for k, v in base.policy.state_dict().items()}
        extra = generate_records(gotoobj_cfg, get_agent(6), 4, seed=0)
        cfg = IlTrainConfig(**{**TINY.__dict__, "epochs": 0})
        tuned = finetune_il(base, extra, get_agent(6), cfg, "gotoobj")
        assert "6" in tuned.policy.heads
        assert tuned.policy.head_actions["6"] == get_agent(6).mask.allowed_ids()
        for k, v in before.items():
            assert torch.equal(tuned.policy.state_dict()[k], v)
        a = tuned.policy.act(records[0].observations[0], None, agent_id=6)
        assert get_agent(6).mask.allows(a)

    def test_finetune_moves_parameters(self, mixture_records, gotoobj_cfg):
        records, specs = mixture_records
        base = train_il(records, "agent-heads", specs, TINY, "gotoobj")
        extra = generate_records(gotoobj_cfg, get_agent(1), 6, seed=5)
        before = base.policy.heads["1"].weight.clone()
        tuned = finetune_il(base, extra, get_agent(1), TINY, "gotoobj")
        assert not torch.equal(tuned.policy.heads["1"].weight, before)

    def test_duplicate_head_rejected(self, mixture_records):
        records, specs = mixture_records
        base = train_il(records, "agent-heads", specs, TINY, "gotoobj")
        with pytest.raises(BaselineError, match="already exists"):
            base.policy.attach_head(1, get_agent(1).mask)

    def test_union_onehot_overflow_rejected(self, mixture_records,
                                            gotoobj_cfg):
        records, specs = mixture_records
        base = train_il(records, "union-onehot", specs, TINY, "gotoobj")
        import dataclasses as dc

        ghost = dc.replace(get_agent(0), agent_id=23)
        extra = generate_records(gotoobj_cfg, ghost, 2, seed=0)
        with pytest.raises(BaselineError, match="one-hot width"):
            finetune_il(base, extra, ghost, TINY, "gotoobj")


class TestGoalPolicy:
    def test_trained_goal_policy_masks_actions(self, small_records_agent3):
        result = train_goal_policy(small_records_agent3, get_agent(3),
                                   horizon=2, train_cfg=TINY,
                                   env_kind="gotoobj")
        rec = small_records_agent3[0]
        a = result.policy.act(rec.observations[0], None, agent_id=3,
                              goal_obs=rec.observations[-1])
        assert get_agent(3).mask.allows(a)
        with pytest.raises(BaselineError, match="goal"):
            result.policy.act(rec.observations[0], None, agent_id=3)

    def test_bad_horizon(self, small_records_agent3):
        with pytest.raises(BaselineError, match="horizon"):
            train_goal_policy(small_records_agent3, get_agent(3), horizon=0,
                              train_cfg=TINY, env_kind="gotoobj")

    def test_oracle_reaches_goal_pose(self, gotoobj_cfg):
        spec = get_agent(0)
        state, _ = reset(gotoobj_cfg, 3)
        current = state
        taken = []
        for _ in range(2):
            out, _, _ = step(current, 2, spec.mask)
            if out.agent_pos == current.agent_pos:
                out, _, _ = step(current, 1, spec.mask)
            current = out
        goal_obs = encode_observation(current)
        actions = oracle_goal_policy(state, goal_obs, spec)
        assert actions is not None
        replay = state
        for a in actions:
            replay, _, _ = step(replay, a, spec.mask)
        assert replay.agent_pos == current.agent_pos
        assert replay.agent_dir == current.agent_dir

    def test_oracle_rejects_undecodable_goal(self, gotoobj_cfg):
        spec = get_agent(0)
        state, _ = reset(gotoobj_cfg, 3)
        blank = np.zeros_like(encode_observation(state))
        assert oracle_goal_policy(state, blank, spec) is None


class TestRoundTrip:
    @pytest.mark.parametrize("variant", ["single", "union-onehot",
                                         "agent-heads"])
    def test_save_load(self, tmp_path, variant, mixture_records,
                       small_records):
        records, specs = mixture_records
        if variant == "single":
            records, specs = small_records, [get_agent(0)]
        path = tmp_path / "il.gpck"
        result = train_il(records, variant, specs, TINY, "gotoobj",
                          out_path=path)
        loaded = load_il(path)
        assert loaded.variant == variant
        assert loaded.policy.head_actions == result.policy.head_actions
        for (n1, p1), (n2, p2) in zip(result.policy.state_dict().items(),
                                      loaded.policy.state_dict().items()):
            assert n1 == n2 and torch.equal(p1, p2)

    def test_goal_save_load(self, tmp_path, small_records_agent3):
        path = tmp_path / "goal.gpck"
        result = train_goal_policy(small_records_agent3, get_agent(3),
                                   horizon=2, train_cfg=TINY,
                                   env_kind="gotoobj", out_path=path)
        loaded = load_il(path)
        assert loaded.variant == "goal"
        rec = small_records_agent3[0]
        a = result.policy.act(rec.observations[0], None, agent_id=3,
                              goal_obs=rec.observations[-1])
        b = loaded.policy.act(rec.observations[0], None, agent_id=3,
                              goal_obs=rec.observations[-1])
        assert a == b

    def test_wrong_kind_rejected(self, tmp_path):
        from gridplan import checkpoint

        path = tmp_path / "x.gpck"
        checkpoint.save_arrays(path, {"kind": "planner"}, {})
        with pytest.raises(BaselineError, match="not an il"):
            load_il(path)
