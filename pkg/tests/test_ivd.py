"""Inverse dynamics: pair building, consistency metric, masked predictions."""

import dataclasses

import numpy as np
import pytest
import torch

from gridplan.agents import get_agent
from gridplan.data import subsample_granularity
from gridplan.env import Action, replay_observation
from gridplan.inverse_dynamics import (
    IvdError,
    IvdModel,
    IvdTrainConfig,
    build_pairs,
    consistent_accuracy,
    load_ivd,
    save_ivd,
    train_ivd,
    transition_consistent,
)

TINY = IvdTrainConfig(epochs=3, batch_size=64, lr=2e-3, width=16, depth=1,
                      seed=0)


class TestBuildPairs:
    def test_counts_and_terminal_pair(self, small_records):
        inputs, labels, raw = build_pairs(small_records)
        want = sum(len(r.actions) for r in small_records) + len(small_records)
        assert len(raw) == len(labels) == len(inputs) == want
        assert inputs.shape[1:] == (6, 8, 8)
        done_pairs = [p for p in raw if p[2] == int(Action.DONE)]
        assert len(done_pairs) == len(small_records)
        for a, b, _ in done_pairs:
            assert np.array_equal(a, b)

    def test_without_terminal(self, small_records):
        _, labels, _ = build_pairs(small_records, include_terminal=False)
        assert len(labels) == sum(len(r.actions) for r in small_records)
        assert int(Action.DONE) not in labels

    def test_observation_only_rejected(self, small_records):
        rec = next(r for r in small_records if len(r.actions) >= 2)
        with pytest.raises(IvdError, match="observation-only"):
            build_pairs([subsample_granularity(rec, 2)])

    def test_empty_rejected(self):
        with pytest.raises(IvdError, match="no transition"):
            build_pairs([])


class TestTransitionConsistent:
    def test_true_on_genuine_transitions(self, small_records_agent3):
        mask = get_agent(3).mask
        for rec in small_records_agent3[:5]:
            for t, action in enumerate(rec.actions):
                assert transition_consistent(
                    rec.observations[t], rec.observations[t + 1], action, mask)

    def test_accepts_equivalent_action(self, small_records):
        # an action whose replay reproduces the same frame counts as correct
        # even if it differs from the logged label (e.g. DONE vs a blocked
        # move: both leave the grid unchanged)
        mask = get_agent(0).mask
        rec = small_records[0]
        final = rec.observations[-1]
        assert transition_consistent(final, final, int(Action.DONE), mask)

    def test_false_on_wrong_action(self, small_records):
        mask = get_agent(0).mask
        rec = next(r for r in small_records if len(r.actions) >= 2)
        obs_t, obs_t1 = rec.observations[0], rec.observations[1]
        taken = rec.actions[0]
        # find an allowed action whose replay visibly differs
        for cand in mask.allowed_ids():
            if cand == taken:
                continue
            pred = replay_observation(obs_t, cand, mask)
            if not np.array_equal(pred, obs_t1):
                assert not transition_consistent(obs_t, obs_t1, cand, mask)
                return
        pytest.fail("no distinguishable action found")

    def test_vacated_cell_exempt(self, small_records):
        # the frame pair hides what was under the agent before it moved; the
        # consistency check must not punish that pixel
        mask = get_agent(0).mask
        rec = next(r for r in small_records
                   if any(a == int(Action.FORWARD) for a in r.actions))
        t = next(i for i, a in enumerate(rec.actions)
                 if a == int(Action.FORWARD))
        obs_t, obs_t1 = rec.observations[t], rec.observations[t + 1]
        doctored = obs_t1.copy()
        from gridplan.env import Object

        r0, c0 = np.argwhere(obs_t[..., 0] == Object.AGENT)[0]
        doctored[r0, c0] = (Object.FLOOR, 2, 0)  # plausible uncovered tile
        assert transition_consistent(obs_t, doctored, int(Action.FORWARD),
                                     mask)


class TestTraining:
    def test_head_covers_only_masked_actions(self):
        model = IvdModel(get_agent(1).mask, grid_size=8, width=16, depth=1)
        assert model.actions == get_agent(1).mask.allowed_ids()
        assert model.head.out_features == len(model.actions)

    def test_predictions_stay_in_mask(self, small_records_agent3):
        result = train_ivd(small_records_agent3, get_agent(3), TINY)
        mask = get_agent(3).mask
        for rec in small_records_agent3[:5]:
            for t in range(len(rec.actions)):
                pred = result.model.predict(rec.observations[t],
                                            rec.observations[t + 1])
                assert mask.allows(pred)

    def test_learns_beyond_majority_baseline(self, gotoobj_cfg):
        # most expert steps are FORWARD, and on GoToObj predicting it always
        # even scores "consistent" on terminal pairs (the target blocks the
        # move); a trained model must beat that shortcut by reading turns
        from gridplan.data import generate_records
        from gridplan.seeding import generator

        records = generate_records(gotoobj_cfg, get_agent(0), 120, seed=0)
        cfg = IvdTrainConfig(epochs=40, batch_size=64, lr=1e-3, width=64,
                             depth=3, seed=0)
        result = train_ivd(records, get_agent(0), cfg)

        order = generator("ivd-train", 0, 0).permutation(len(records))
        hold = [records[int(i)] for i in order[:12]]
        _, _, raw = build_pairs(hold)

        class AlwaysForward:
            mask = get_agent(0).mask

            def predict(self, a, b):
                return int(Action.FORWARD)

        baseline = consistent_accuracy(AlwaysForward(), raw)
        assert result.accuracy >= baseline + 0.05
        assert result.accuracy >= 0.85
        assert result.curve[-1][1] < result.curve[0][1]

    def test_wrong_agent_rejected(self, small_records):
        with pytest.raises(IvdError, match="single agent"):
            train_ivd(small_records, get_agent(1), TINY)

    def test_off_mask_actions_rejected(self, small_records):
        doctored = [dataclasses.replace(
            r, actions=(9,) * len(r.actions)) for r in small_records[:2]
            if len(r.actions) >= 1]
        with pytest.raises(IvdError, match="off-mask"):
            train_ivd(doctored, get_agent(0), TINY)

    def test_deterministic(self, tmp_path, small_records):
        p1, p2 = tmp_path / "a.gpck", tmp_path / "b.gpck"
        train_ivd(small_records, get_agent(0), TINY, out_path=p1)
        train_ivd(small_records, get_agent(0), TINY, out_path=p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestRoundTrip:
    def test_save_load(self, tmp_path, small_records):
        path = tmp_path / "ivd.gpck"
        result = train_ivd(small_records, get_agent(0), TINY, out_path=path)
        loaded = load_ivd(path)
        assert loaded.agent_id == 0
        assert loaded.accuracy == pytest.approx(result.accuracy)
        assert loaded.train_config == TINY
        assert loaded.model.actions == result.model.actions
        for (n1, p1), (n2, p2) in zip(result.model.state_dict().items(),
                                      loaded.model.state_dict().items()):
            assert n1 == n2 and torch.equal(p1, p2)

    def test_loaded_predicts_identically(self, tmp_path, small_records):
        path = tmp_path / "ivd.gpck"
        result = train_ivd(small_records, get_agent(0), TINY, out_path=path)
        loaded = load_ivd(path)
        rec = small_records[0]
        for t in range(len(rec.actions)):
            a = result.model.predict(rec.observations[t],
                                     rec.observations[t + 1])
            b = loaded.model.predict(rec.observations[t],
                                     rec.observations[t + 1])
            assert a == b

    def test_wrong_kind_rejected(self, tmp_path):
        from gridplan import checkpoint

        path = tmp_path / "x.gpck"
        checkpoint.save_arrays(path, {"kind": "planner"}, {})
        with pytest.raises(IvdError, match="not an ivd"):
            load_ivd(path)


def test_consistent_accuracy_on_perfect_oracle(small_records):
    # feed the metric a model-shaped oracle that echoes logged actions
    mask = get_agent(0).mask
    _, _, raw = build_pairs(small_records[:5])

    class Echo:
        def __init__(self):
            self.mask = mask
            self._table = {
                (a.tobytes(), b.tobytes()): act for a, b, act in raw}

        def predict(self, a, b):
            return self._table[(a.tobytes(), b.tobytes())]

    assert consistent_accuracy(Echo(), raw) == 1.0
