import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from factories import StubTrajectory, all_contexts, random_policy, solver_policy

from aepolab.aepo import (
    AdvantageSet,
    KlReport,
    TrainState,
    UpdateItem,
    group_centered_token_advantage,
    grpo_advantage,
    kl_controller_update,
    kl_weights,
    sample_prompts,
    surrogate_loss,
    token_entropy_bonus,
    token_kl,
    train_step,
)
from aepolab.config import ExperimentConfig
from aepolab.difficulty import Bucket
from aepolab.entropy import EntropyProfile
from aepolab.policy import PolicyTable, TaskFamily, make_task, sample_rollout
from aepolab.seeding import derive_seed, rng_for

SMALL = TaskFamily(vocab_size=5, n_connectives=1)


def test_grpo_advantage_cases():
    np.testing.assert_allclose(grpo_advantage([1, 0, 0, 1]), [1, -1, -1, 1], rtol=1e-6)
    np.testing.assert_array_equal(grpo_advantage([0.5] * 5), np.zeros(5))
    np.testing.assert_allclose(grpo_advantage([2, 4, 6], eps=0.0), [-1.2247, 0.0, 1.2247], atol=1e-4)
    with pytest.raises(ValueError):
        grpo_advantage([1.0])


def test_grpo_advantage_normalized():
    rng = rng_for(0)
    for _ in range(20):
        adv = grpo_advantage(rng.normal(size=8))
        assert adv.mean() == pytest.approx(0.0, abs=1e-12)
        assert adv.var() == pytest.approx(1.0, rel=1e-6)


def test_group_centered_token_advantage_cases():
    first, second = group_centered_token_advantage([1, 0], [2, 4])
    np.testing.assert_allclose(first, [0.25, 0.25])
    np.testing.assert_allclose(second, [-0.125] * 4)
    for adv in group_centered_token_advantage([0.5, 0.5, 0.5], [1, 3, 5]):
        np.testing.assert_array_equal(adv, 0.0)


def test_group_centered_token_advantage_sums_to_zero():
    rng = rng_for(1)
    for _ in range(20):
        lengths = [int(n) for n in rng.integers(1, 10, 3)]
        advs = group_centered_token_advantage(rng.random(3), lengths)
        assert sum(n * a[0] for n, a in zip(lengths, advs)) == pytest.approx(0.0, abs=1e-12)


def test_group_centered_token_advantage_rejects_bad_input():
    with pytest.raises(ValueError):
        group_centered_token_advantage([1, 0], [2])
    with pytest.raises(ValueError):
        group_centered_token_advantage([1, 0], [2, 0])


def profile(window_means, trigger):
    means = np.asarray(window_means, dtype=float)
    mask = np.asarray(trigger, dtype=bool)
    return EntropyProfile(means, means, 1, 0.0, "window", mask, mask.copy())


def test_token_entropy_bonus_cases():
    (psi,) = token_entropy_bonus([profile([2.0, 0.5], [True, False])], 1.0, 1.0)
    np.testing.assert_allclose(psi, [0.5, -0.5])
    for psi in token_entropy_bonus([profile([2.0, 3.0], [True, True]), profile([1.0], [False])], 1.0, 0.0):
        np.testing.assert_array_equal(psi, 0.0)
    for psi in token_entropy_bonus([profile([0.1, 0.2], [True, True])], 1.0, 2.0):
        np.testing.assert_array_equal(psi, 0.0)
    with pytest.raises(ValueError):
        token_entropy_bonus([profile([1.0], [True])], 0.0, -1.0)


def test_token_entropy_bonus_is_zero_sum():
    rng = rng_for(2)
    profiles = [profile(rng.random(n) * 3, rng.random(n) < 0.4) for n in (3, 5, 8)]
    psis = token_entropy_bonus(profiles, 1.0, 0.7)
    assert sum(p.sum() for p in psis) == pytest.approx(0.0, abs=1e-12)


def kl_trajectory(ctx):
    return StubTrajectory(tokens=[0], entropies=np.zeros(1), contexts=[ctx])


def test_token_kl_cases():
    ctx = (0, 0)
    policy = PolicyTable(2)
    policy.set_row(ctx, np.log([0.25, 0.75]))
    policy.freeze_reference()
    np.testing.assert_allclose(token_kl(policy, kl_trajectory(ctx)), [0.0], atol=1e-15)
    policy.set_row(ctx, np.log([0.5, 0.5]))
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    np.testing.assert_allclose(token_kl(policy, kl_trajectory(ctx)), [expected])
    assert expected == pytest.approx(0.14384, abs=1e-5)


def test_token_kl_gibbs():
    rng = rng_for(3)
    policy = random_policy(8, rng)
    policy.reference_weights = {ctx: rng.normal(size=8) for ctx in all_contexts(8)}
    contexts = all_contexts(8)[:20]
    kld = token_kl(policy, StubTrajectory(tokens=[0] * 20, entropies=np.zeros(20), contexts=contexts))
    assert np.all(kld > 0)
    policy.freeze_reference()
    kld = token_kl(policy, StubTrajectory(tokens=[0] * 20, entropies=np.zeros(20), contexts=contexts))
    np.testing.assert_allclose(kld, 0.0, atol=1e-12)


def test_kl_weights_cases():
    np.testing.assert_allclose(kl_weights([True, False], 0.01, 0.5), [0.005, 0.01])
    np.testing.assert_allclose(kl_weights([False] * 3, 0.02, 0.5), [0.02] * 3)
    np.testing.assert_allclose(kl_weights([True, False, True], 0.02, 1.0), [0.02] * 3)
    with pytest.raises(ValueError):
        kl_weights([True], 0.01, 0.0)
    with pytest.raises(ValueError):
        kl_weights([True], 0.01, 1.5)
    with pytest.raises(ValueError):
        kl_weights([True], 0.0, 0.5)


def test_kl_controller_cases():
    assert kl_controller_update(1.3, 0.02, 0.02, 0.1, 0.1, 10.0) == pytest.approx(1.3)
    assert kl_controller_update(1.0, 0.04, 0.02, 0.1, 0.1, 10.0) == pytest.approx(1.1)
    assert kl_controller_update(10.0, 0.5, 0.02, 0.1, 0.1, 10.0) == 10.0
    assert kl_controller_update(0.1, 0.0, 0.02, 0.5, 0.1, 10.0) == 0.1
    with pytest.raises(ValueError):
        kl_controller_update(1.0, 0.01, 0.0, 0.1, 0.1, 10.0)


def test_kl_controller_fixed_point_over_time():
    kappa = 2.5
    for _ in range(100):
        kappa = kl_controller_update(kappa, 0.04, 0.04, 0.3, 0.1, 10.0)
    assert kappa == pytest.approx(2.5)


def test_helper_records():
    adv = AdvantageSet(np.array([1.0, 1.0]), np.array([0.5, -0.5]))
    np.testing.assert_array_equal(adv.shaped, [1.5, 0.5])
    report = KlReport(np.array([0.1, 0.3, 0.5]), np.ones(3), np.array([True, False, True]))
    assert report.control_kl == pytest.approx(0.3)
    assert KlReport(np.zeros(2), np.ones(2), np.zeros(2, dtype=bool)).control_kl is None


def surrogate_instance(seed):
    rng = rng_for(seed)
    policy = random_policy(5, rng)
    policy.reference_weights = {ctx: rng.normal(size=5) for ctx in all_contexts(5)}
    policy.old_weights = {ctx: row + rng.normal(0.0, 0.02, 5) for ctx, row in policy.weights.items()}
    items = []
    for i in range(3):
        traj = sample_rollout(policy, make_task(1, i, SMALL), max_len=4, seed=derive_seed(seed, i))
        items.append(
            UpdateItem(
                traj,
                rng.normal(size=traj.length),
                rng.uniform(0.01, 0.1, traj.length),
                float(rng.uniform(0.5, 2.0)),
            )
        )
    return policy, items


@pytest.mark.parametrize("aggregation", ["sequence", "token"])
def test_surrogate_gradient_matches_finite_differences(aggregation):
    h = 1e-6
    for trial in range(25):
        policy, items = surrogate_instance(derive_seed(40, trial))
        result = surrogate_loss(policy, items, 0.2, 0.28, aggregation)
        assert result.clip_fraction == 0.0
        for ctx, g in result.gradient.items():
            numeric = np.zeros(5)
            for k in range(5):
                plus, minus = policy.copy(), policy.copy()
                plus.weights[ctx][k] += h
                minus.weights[ctx][k] -= h
                up = surrogate_loss(plus, items, 0.2, 0.28, aggregation).loss
                down = surrogate_loss(minus, items, 0.2, 0.28, aggregation).loss
                numeric[k] = (up - down) / (2 * h)
            np.testing.assert_allclose(g, numeric, rtol=1e-5, atol=1e-8)


def test_surrogate_ratio_one_identity():
    policy, items = surrogate_instance(50)
    policy.refresh_old()
    items = [UpdateItem(it.trajectory, it.advantages, it.kl_weights, 0.0) for it in items]
    result = surrogate_loss(policy, items, 0.2, 0.28)
    expected = -np.mean([it.advantages.mean() for it in items])
    assert result.loss == pytest.approx(expected)
    assert result.clip_fraction == 0.0
    assert result.kl_loss == 0.0
    token = surrogate_loss(policy, items, 0.2, 0.28, "token")
    n_tokens = sum(it.trajectory.length for it in items)
    assert token.loss == pytest.approx(-sum(it.advantages.sum() for it in items) / n_tokens)


def test_surrogate_zero_inputs():
    policy, items = surrogate_instance(51)
    items = [UpdateItem(it.trajectory, np.zeros(it.trajectory.length), it.kl_weights, 0.0) for it in items]
    result = surrogate_loss(policy, items, 0.2, 0.28)
    assert result.loss == 0.0
    assert all(np.all(g == 0) for g in result.gradient.values())
    assert surrogate_loss(policy, [], 0.2, 0.28).gradient == {}


def test_surrogate_clipped_tokens_have_no_policy_gradient():
    policy = PolicyTable(5)
    traj = sample_rollout(policy, make_task(1, 0, SMALL), max_len=1, seed=0)
    policy.refresh_old()
    row = np.zeros(5)
    row[traj.tokens[0]] = 3.0
    policy.set_row(traj.contexts[0], row)
    ratio = math.exp(3.0) / (math.exp(3.0) + 4) / 0.2

    gain = surrogate_loss(policy, [UpdateItem(traj, np.array([1.0]), np.zeros(1))], 0.2, 0.28)
    assert gain.clip_fraction == 1.0
    assert gain.loss == pytest.approx(-1.28)
    assert all(np.all(g == 0) for g in gain.gradient.values())

    loss = surrogate_loss(policy, [UpdateItem(traj, np.array([-1.0]), np.zeros(1))], 0.2, 0.28)
    assert loss.clip_fraction == 0.0
    assert loss.loss == pytest.approx(ratio)
    assert any(np.any(g != 0) for g in loss.gradient.values())


def test_surrogate_smaller_relaxation_reduces_kl_loss():
    policy, items = surrogate_instance(52)
    by_rho = {}
    for rho in (1.0, 0.5, 0.1):
        relaxed = []
        for it in items:
            mask = np.arange(it.trajectory.length) % 2 == 0
            weights = kl_weights(mask, 0.05, rho)
            relaxed.append(UpdateItem(it.trajectory, np.zeros(it.trajectory.length), weights, 1.0))
        by_rho[rho] = surrogate_loss(policy, relaxed, 0.2, 0.28).kl_loss
    assert by_rho[1.0] > by_rho[0.5] > by_rho[0.1] > 0.0


def test_missing_contexts_are_rejected():
    policy, items = surrogate_instance(54)
    item = items[0]
    bare = dataclasses.replace(item.trajectory, contexts=item.trajectory.contexts[:-1])
    with pytest.raises(ValueError):
        surrogate_loss(policy, [UpdateItem(bare, item.advantages, item.kl_weights, 1.0)], 0.2, 0.28)
    with pytest.raises(ValueError):
        token_kl(policy, dataclasses.replace(item.trajectory, contexts=[]))


def test_surrogate_rejects_bad_input():
    policy, items = surrogate_instance(53)
    traj = items[0].trajectory
    with pytest.raises(ValueError):
        surrogate_loss(policy, [UpdateItem(traj, np.zeros(traj.length + 1), np.zeros(traj.length))], 0.2, 0.28)
    with pytest.raises(ValueError):
        surrogate_loss(policy, items, 0.0, 0.28)
    with pytest.raises(ValueError):
        surrogate_loss(policy, items, 0.2, 0.28, "batch")


BASE = {
    "batch_size": 6,
    "group_size": 8,
    "max_len": 8,
    "window_size": 1,
    "task_knobs": [1],
    "seed": 3,
    "warmup_iterations": 0,
}


def make_state(**overrides):
    state = TrainState.initial(ExperimentConfig(**{**BASE, **overrides}))
    state.policy = solver_policy(state.config.vocab_size)
    return state


def test_sample_prompts():
    config = ExperimentConfig(batch_size=20, task_knobs=[2, 5], task_weights=[0.0, 1.0])
    prompts = sample_prompts(config, 4)
    assert [p.difficulty_knob for p in prompts] == [5] * 20
    assert sample_prompts(config, 4) == prompts
    assert sample_prompts(config, 5) != prompts


def test_train_step_aepo():
    state = make_state()
    record = train_step(state)
    assert state.iteration == 1
    assert not record.skipped
    assert record.n_groups == 6
    assert record.n_trajectories == 48
    assert record.n_branches > 0
    assert 0.0 < record.accuracy_mean < 1.0
    assert math.isfinite(record.loss)
    assert 0.0 <= record.filtered_fraction < 1.0
    assert set(record.buckets) == {"easy", "medium", "hard"}
    measured = [b for b in record.buckets.values() if b["kl_ctrl"] is not None]
    assert measured
    for stats in measured:
        assert stats["kappa"] != 1.0
        assert stats["hwe_target"] is not None
    assert any(
        not np.array_equal(state.policy.logits(ctx), state.policy.ref_logits(ctx)) for ctx in state.policy.weights
    )
    rec = record.to_record()
    assert rec["type"] == "metrics"
    assert rec["iter"] == 0


def test_train_step_deterministic():
    records = []
    for _ in range(2):
        state = make_state()
        records.append([train_step(state).to_record() for _ in range(2)])
    assert records[0] == records[1]


def test_train_step_pool_matches_serial():
    serial = make_state()
    pooled = make_state()
    with ThreadPoolExecutor(max_workers=3) as pool:
        for _ in range(2):
            assert train_step(serial).to_record() == train_step(pooled, pool=pool).to_record()
    for ctx, row in serial.policy.weights.items():
        np.testing.assert_array_equal(pooled.policy.logits(ctx), row)


def test_train_step_skips_when_everything_is_filtered():
    state = make_state(filter_lo=0.98, filter_hi=0.99)
    before = {ctx: row.copy() for ctx, row in state.policy.weights.items()}
    record = train_step(state)
    assert record.skipped
    assert record.loss is None
    assert record.clip_fraction is None
    assert record.filtered_fraction == 1.0
    assert state.iteration == 1
    for ctx, row in before.items():
        np.testing.assert_array_equal(state.policy.logits(ctx), row)


@pytest.mark.parametrize("mode", ["grpo", "dapo"])
def test_train_step_baselines(mode):
    state = make_state(mode=mode)
    record = train_step(state)
    assert record.n_branches == 0
    assert math.isfinite(record.loss)
    for stats in record.buckets.values():
        assert stats["kappa"] == 1.0
        assert stats["lambda"] == 0.0


def test_warmup_runs_grpo_then_freezes_reference():
    state = make_state(warmup_iterations=2)
    for _ in range(2):
        record = train_step(state)
        assert (record.stage, record.mode) == ("warmup", "aepo")
        assert record.n_branches == 0
        assert all(stats["kappa"] == 1.0 and stats["lambda"] == 0.0 for stats in record.buckets.values())
    warmed = {ctx: row.copy() for ctx, row in state.policy.weights.items()}
    for bucket in Bucket:
        state.buckets[bucket].kl_dual = 5.0
    record = train_step(state)
    assert record.to_record()["stage"] == "train"
    assert record.n_branches > 0
    for bucket in Bucket:
        stats = record.buckets[bucket.value]
        expected = 1.0
        if stats["kl_ctrl"] is not None:
            expected = kl_controller_update(1.0, stats["kl_ctrl"], state.config.kl_budgets[bucket], 0.1, 0.1, 10.0)
        assert stats["kappa"] == pytest.approx(expected)
    for ctx, row in warmed.items():
        np.testing.assert_array_equal(state.policy.ref_logits(ctx), row)


def test_learning_rate_per_mode():
    def weights_after(**overrides):
        state = make_state(**overrides)
        train_step(state)
        return state.policy.weights

    def same(a, b):
        return a.keys() == b.keys() and all(np.array_equal(a[ctx], b[ctx]) for ctx in a)

    aepo = weights_after(learning_rate_aepo=30.0)
    assert same(aepo, weights_after(learning_rate_aepo=30.0, learning_rate=7.0))
    assert not same(aepo, weights_after(learning_rate_aepo=10.0))
    grpo = weights_after(mode="grpo", learning_rate_aepo=30.0)
    assert same(grpo, weights_after(mode="grpo", learning_rate_aepo=10.0))
    assert not same(grpo, weights_after(mode="grpo", learning_rate=7.0))


def test_train_step_without_entropy_shaping():
    state = make_state(entropy_shaping=False)
    for _ in range(2):
        record = train_step(state)
    assert all(stats["lambda"] == 0.0 for stats in record.buckets.values())


def test_train_step_frozen_controller():
    state = make_state(dynamic_kl=False)
    record = train_step(state)
    assert all(stats["kappa"] == 1.0 for stats in record.buckets.values())


def test_train_step_branches_outside_group():
    state = make_state(branches_join_group=False)
    seen = []
    record = train_step(state, sink=lambda it, groups: seen.append((it, groups)))
    assert record.n_branches > 0
    ((iteration, groups),) = seen
    assert iteration == 0
    assert all(not g.branches and len(g.profiles) == g.group_size for g in groups)
    assert all(len(g.rewards) == g.group_size for g in groups)


def test_train_step_explicit_prompts():
    state = make_state()
    prompts = [make_task(1, i) for i in range(2)]
    record = train_step(state, prompts=prompts)
    assert record.n_groups == 2
    with pytest.raises(ValueError):
        train_step(state, prompts=[])


def test_bucket_order_in_record():
    state = make_state()
    record = train_step(state)
    assert list(record.buckets) == [b.value for b in Bucket]
