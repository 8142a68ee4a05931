import math
import os
import tempfile
import unittest

import numpy as np
import pytest
from factories import all_contexts, deterministic_policy, random_policy
from scipy.stats import chisquare

from aepolab.policy import (
    PolicyTable,
    TaskFamily,
    branch_rollouts,
    draw_token,
    enumerate_responses,
    exact_policy_gradient,
    make_task,
    read_trajectories,
    sample_rollout,
    sampling_distribution,
    write_trajectories,
)
from aepolab.seeding import derive_seed, rng_for

FAMILY = TaskFamily()


def test_task_family_layout():
    assert FAMILY.modulus == 8
    assert FAMILY.connectives == (8, 9, 10)
    assert FAMILY.stop_token == 11
    assert FAMILY.units == (1, 3, 5, 7)
    assert FAMILY.is_digit(7) and not FAMILY.is_digit(8)
    with pytest.raises(ValueError):
        TaskFamily(vocab_size=4, n_connectives=2)
    with pytest.raises(ValueError):
        TaskFamily(n_connectives=0)


def test_make_task_deterministic():
    assert make_task(1, 7) == make_task(1, 7)
    assert make_task(3, 11).gold_answer == make_task(3, 11).gold_answer


def test_make_task_rejects_bad_knob():
    with pytest.raises(ValueError):
        make_task(0, 1)


def test_gold_answers_verify():
    rng = rng_for(0)
    for _ in range(1000):
        knob = int(rng.integers(1, 9))
        task = make_task(knob, int(rng.integers(0, 2**31)))
        stop = task.family.stop_token
        assert len(task.gold_answer) == knob
        assert task.gold_answer[-1] == 0
        assert all(task.family.is_digit(t) for t in task.prompt + task.gold_answer)
        assert task.verify(task.prompt + task.gold_answer + (stop,))
        assert task.score(task.gold_answer + (stop,)) == 1


def test_answer_extraction():
    task = make_task(2, 5)
    stop = task.family.stop_token
    connective = task.family.connectives[0]
    assert task.answer_of([connective, *task.gold_answer, stop, 3]) == task.gold_answer
    assert task.score([connective, *task.gold_answer, stop]) == 1
    assert task.answer_of(list(task.gold_answer)) is None
    assert task.score(list(task.gold_answer)) == 0
    assert task.answer_of([stop]) == ()
    with pytest.raises(ValueError):
        task.verify((99,) + task.gold_answer + (stop,))


def test_policy_context_and_default_row():
    policy = PolicyTable(vocab_size=5, context_order=2)
    assert policy.context_of([]) == (-1, -1)
    assert policy.context_of([3]) == (-1, 3)
    assert policy.context_of([1, 2, 3]) == (2, 3)
    np.testing.assert_allclose(policy.probs((0, 0)), np.full(5, 0.2))
    assert policy.weights == {}
    with pytest.raises(ValueError):
        policy.set_row((0, 0), [1.0, 2.0])
    with pytest.raises(ValueError):
        PolicyTable(vocab_size=1)


def test_policy_dict_round_trip():
    policy = random_policy(4, rng_for(1))
    policy.freeze_reference()
    policy.apply_gradient({(0, 1): np.ones(4)}, 0.5)
    policy.refresh_old()
    other = PolicyTable.from_dict(policy.to_dict())
    assert other.context_order == policy.context_order
    for ctx in all_contexts(4):
        np.testing.assert_array_equal(other.logits(ctx), policy.logits(ctx))
        np.testing.assert_array_equal(other.ref_logits(ctx), policy.ref_logits(ctx))
        np.testing.assert_array_equal(other.old_logits(ctx), policy.old_logits(ctx))


def test_copy_is_independent():
    policy = random_policy(4, rng_for(2))
    other = policy.copy()
    other.apply_gradient({(0, 1): np.ones(4)}, 1.0)
    assert not np.array_equal(other.logits((0, 1)), policy.logits((0, 1)))


def test_sample_rollout_deterministic():
    policy = random_policy(12, rng_for(3))
    task = make_task(3, 9)
    a = sample_rollout(policy, task, max_len=16, temperature=0.8, top_p=0.95, seed=42)
    b = sample_rollout(policy, task, max_len=16, temperature=0.8, top_p=0.95, seed=42)
    assert a.tokens == b.tokens
    np.testing.assert_array_equal(a.logprobs, b.logprobs)
    np.testing.assert_array_equal(a.entropies, b.entropies)
    np.testing.assert_array_equal(a.step_distributions, b.step_distributions)


def test_uniform_policy_entropies():
    family = TaskFamily(vocab_size=4, n_connectives=1)
    task = make_task(1, 0, family)
    traj = sample_rollout(PolicyTable(4), task, max_len=10, seed=1)
    np.testing.assert_allclose(traj.entropies, np.full(traj.length, math.log(4)))
    np.testing.assert_allclose(traj.logprobs, np.full(traj.length, -math.log(4)))
    assert traj.fallback_count == 0


def test_deterministic_policy_replays_argmax_chain():
    stop = FAMILY.stop_token
    # digit chain 0 -> 1 -> ... then STOP after a 5
    policy = deterministic_policy(12, lambda ctx: stop if ctx[-1] == 5 else (ctx[-1] + 1) % 8)
    task = make_task(2, 3)
    traj = sample_rollout(policy, task, max_len=16, seed=0)
    expected = []
    last = task.prompt[-1]
    while True:
        nxt = stop if last == 5 else (last + 1) % 8
        expected.append(nxt)
        if nxt == stop:
            break
        last = nxt
    assert traj.tokens == expected[:16]
    np.testing.assert_allclose(traj.entropies, 0.0, atol=1e-12)
    assert sample_rollout(policy, task, max_len=16, seed=99).tokens == traj.tokens


def test_rollout_stops_at_max_len():
    policy = deterministic_policy(12, lambda ctx: 8)
    traj = sample_rollout(policy, make_task(1, 0), max_len=5, seed=0)
    assert traj.tokens == [8] * 5
    assert traj.accuracy == 0


def test_rollout_rejects_bad_arguments():
    policy = PolicyTable(12)
    task = make_task(1, 0)
    with pytest.raises(ValueError):
        sample_rollout(policy, task, max_len=0)
    with pytest.raises(ValueError):
        sample_rollout(policy, task, max_len=4, temperature=0.0)
    with pytest.raises(ValueError):
        sample_rollout(policy, task, max_len=4, top_p=0.0)
    with pytest.raises(ValueError):
        sample_rollout(PolicyTable(5), task, max_len=4)


def test_sampling_distribution_top_p():
    policy = PolicyTable(4)
    policy.set_row((0, 0), np.log([0.5, 0.3, 0.15, 0.05]))
    dist, fell_back = sampling_distribution(policy, (0, 0), 1.0, 0.7)
    assert not fell_back
    np.testing.assert_allclose(dist, [0.625, 0.375, 0.0, 0.0])
    dist, _ = sampling_distribution(policy, (0, 0), 1.0, 1.0)
    np.testing.assert_allclose(dist, [0.5, 0.3, 0.15, 0.05])
    dist, _ = sampling_distribution(policy, (0, 0), 1.0, 0.1)
    np.testing.assert_allclose(dist, [1.0, 0.0, 0.0, 0.0])


def test_sampling_distribution_temperature():
    policy = PolicyTable(3)
    policy.set_row((0, 0), [0.0, 1.0, 2.0])
    cold, _ = sampling_distribution(policy, (0, 0), 0.5, 1.0)
    hot, _ = sampling_distribution(policy, (0, 0), 2.0, 1.0)
    expected = np.exp([0.0, 2.0, 4.0])
    np.testing.assert_allclose(cold, expected / expected.sum())
    assert hot.max() < cold.max()


def test_draw_token_frequencies():
    dist = np.array([0.4, 0.3, 0.2, 0.1])
    rng = rng_for(5)
    n = 100_000
    counts = np.bincount([draw_token(dist, rng) for _ in range(n)], minlength=4)
    assert chisquare(counts, dist * n).pvalue > 1e-3


def test_exact_gradient_zero_advantages():
    policy = random_policy(6, rng_for(6))
    traj = sample_rollout(policy, make_task(1, 0, TaskFamily(6, 1)), max_len=4, seed=1)
    grad = exact_policy_gradient(policy, traj, np.zeros(traj.length))
    assert all(np.all(g == 0) for g in grad.values())


def test_exact_gradient_uniform_single_step():
    family = TaskFamily(vocab_size=6, n_connectives=1)
    traj = sample_rollout(PolicyTable(6), make_task(1, 0, family), max_len=1, seed=4)
    grad = exact_policy_gradient(PolicyTable(6), traj, [1.0])
    (row,) = grad.values()
    expected = np.full(6, -1 / 6)
    expected[traj.tokens[0]] += 1.0
    np.testing.assert_allclose(row, expected)


def test_exact_gradient_length_mismatch():
    traj = sample_rollout(PolicyTable(12), make_task(1, 0), max_len=3, seed=0)
    with pytest.raises(ValueError):
        exact_policy_gradient(PolicyTable(12), traj, np.zeros(traj.length + 1))


def _logprob_sum(policy, traj, advantages):
    total = 0.0
    for ctx, token, a in zip(traj.contexts, traj.tokens, advantages):
        logits = policy.logits(ctx)
        total += a * (logits[token] - np.log(np.exp(logits).sum()))
    return total


def test_exact_gradient_matches_finite_differences():
    family = TaskFamily(vocab_size=6, n_connectives=1)
    h = 1e-5
    for trial in range(50):
        rng = rng_for(derive_seed(11, trial))
        policy = random_policy(6, rng)
        task = make_task(1, trial, family)
        traj = sample_rollout(policy, task, max_len=4, seed=trial)
        adv = rng.normal(size=traj.length)
        grad = exact_policy_gradient(policy, traj, adv)
        for ctx, g in grad.items():
            numeric = np.zeros(6)
            for k in range(6):
                plus, minus = policy.copy(), policy.copy()
                plus.weights[ctx][k] += h
                minus.weights[ctx][k] -= h
                numeric[k] = (_logprob_sum(plus, traj, adv) - _logprob_sum(minus, traj, adv)) / (2 * h)
            np.testing.assert_allclose(g, numeric, rtol=1e-6, atol=1e-8)


def test_enumeration_matches_sampling():
    family = TaskFamily(vocab_size=4, n_connectives=1)
    policy = random_policy(4, rng_for(12), scale=0.7)
    task = make_task(1, 2, family)
    exact = dict(enumerate_responses(policy, task, max_len=3, temperature=1.0, top_p=1.0))
    assert sum(exact.values()) == pytest.approx(1.0)
    n = 20_000
    counts: dict = {}
    for i in range(n):
        tokens = tuple(sample_rollout(policy, task, max_len=3, seed=derive_seed(7, i)).tokens)
        counts[tokens] = counts.get(tokens, 0) + 1
    assert set(counts) <= set(exact)
    for tokens, p in exact.items():
        se = math.sqrt(p * (1 - p) / n)
        assert abs(counts.get(tokens, 0) / n - p) <= 5 * se + 1e-3


def test_enumeration_respects_top_p():
    family = TaskFamily(vocab_size=4, n_connectives=1)
    policy = random_policy(4, rng_for(13), scale=2.0)
    task = make_task(1, 0, family)
    full = dict(enumerate_responses(policy, task, max_len=2))
    nucleus = dict(enumerate_responses(policy, task, max_len=2, top_p=0.5))
    assert len(nucleus) < len(full)
    assert sum(nucleus.values()) == pytest.approx(1.0)


def test_branches_share_prefix():
    policy = random_policy(12, rng_for(14))
    traj = sample_rollout(policy, make_task(4, 1), max_len=16, seed=3)
    while traj.length < 5:
        traj = sample_rollout(policy, make_task(4, 1), max_len=16, seed=traj.seed + 1)
    branches = branch_rollouts(policy, traj, [3], 2)
    assert len(branches) == 2
    for branch in branches:
        assert branch.tokens[:3] == traj.tokens[:3]
        assert branch.branch_step == 3
        np.testing.assert_array_equal(branch.step_distributions[:3], traj.step_distributions[:3])
        np.testing.assert_array_equal(branch.entropies[:3], traj.entropies[:3])
    assert branches[0].seed != branches[1].seed


def test_branches_without_triggers():
    policy = PolicyTable(12)
    traj = sample_rollout(policy, make_task(1, 0), max_len=8, seed=0)
    assert branch_rollouts(policy, traj, [], 3) == []


def test_branch_of_deterministic_policy_replays_parent():
    stop = FAMILY.stop_token
    policy = deterministic_policy(12, lambda ctx: stop if ctx[-1] == 8 else 8)
    traj = sample_rollout(policy, make_task(1, 0), max_len=8, seed=0)
    for t in range(traj.length):
        (branch,) = branch_rollouts(policy, traj, [t], 1)
        assert branch.tokens == traj.tokens


def test_branch_step_out_of_range():
    policy = PolicyTable(12)
    traj = sample_rollout(policy, make_task(1, 0), max_len=4, seed=0)
    with pytest.raises(ValueError):
        branch_rollouts(policy, traj, [traj.length], 1)


def test_easier_tasks_pass_more_often():
    policy = PolicyTable(12)
    passes = {}
    for knob in (1, 8):
        total = 0
        for i in range(300):
            task = make_task(knob, derive_seed(21, knob, i))
            seeds = [derive_seed(22, knob, i, g) for g in range(8)]
            total += sum(sample_rollout(policy, task, max_len=8, seed=s).accuracy for s in seeds)
        passes[knob] = total / 300
    assert passes[1] > passes[8]


class TestTrajectoryFiles(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.temp_dir.name, "nested", "trajectories.jsonl")

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_write_and_read(self):
        policy = random_policy(12, rng_for(30))
        trajs = [sample_rollout(policy, make_task(2, i), max_len=6, seed=i) for i in range(4)]
        self.assertEqual(write_trajectories(self.path, trajs), 4)
        loaded = read_trajectories(self.path)
        self.assertEqual(len(loaded), 4)
        for a, b in zip(trajs, loaded):
            self.assertEqual(a.tokens, b.tokens)
            self.assertEqual(a.task.prompt, b.task.prompt)
            self.assertEqual(a.task.gold_answer, b.task.gold_answer)
            self.assertEqual(a.accuracy, b.accuracy)
            np.testing.assert_array_equal(a.entropies, b.entropies)
            np.testing.assert_array_equal(a.logprobs, b.logprobs)

    def test_read_back_trajectory_has_no_gradient(self):
        policy = random_policy(12, rng_for(31))
        write_trajectories(self.path, [sample_rollout(policy, make_task(1, 0), max_len=6, seed=2)])
        (loaded,) = read_trajectories(self.path)
        self.assertEqual(loaded.contexts, [])
        with self.assertRaises(ValueError):
            exact_policy_gradient(policy, loaded, np.ones(loaded.length))

    def test_append(self):
        trajs = [sample_rollout(PolicyTable(12), make_task(1, i), max_len=4, seed=i) for i in range(2)]
        write_trajectories(self.path, trajs[:1])
        write_trajectories(self.path, trajs[1:], append=True)
        self.assertEqual(len(read_trajectories(self.path)), 2)
        write_trajectories(self.path, trajs[:1])
        self.assertEqual(len(read_trajectories(self.path)), 1)
