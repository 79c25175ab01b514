import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dcdqnla.channel import N_MCS, tbs
from dcdqnla.dqn import (AlignmentError, Experience, FeatureHistory, Hyperparams, ObservationLog,
                         ReplayBuffer, align_experience, build_frame, epsilon_at, greedy, reward,
                         select_action, sync, td_loss_and_grad, td_targets, train_step)
from dcdqnla.qnet import (Adam, NumericError, QNetParams, backward, init_params, q_forward,
                          q_values, zeros_like)
from dcdqnla.sim import FeedbackEvent


def fb(origin, d_ack, mcs, ack, rtx=1, tb_bits=1000):
    return FeedbackEvent(tti_delivered=origin + d_ack, ack=ack, mcs=mcs, tb_bits=tb_bits,
                         rtx_count=rtx, origin_tti=origin, first_tx_tti=origin, decision_tti=origin - 4,
                         dropped=False)


def random_params(rng, hidden=4, scale=0.5):
    p = init_params(hidden, rng)
    return p.with_flat(rng.normal(0, scale, p.size))


# -- straight-line reference network ------------------------------------------


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def reference_q(p: QNetParams, s):
    """Scalar-loop GRU -> ReLU FC -> ReLU FC -> linear, oldest frame first."""
    a = p.arrays
    H = p.hidden
    h = [0.0] * H
    for x in s[::-1]:
        gi = [sum(x[i] * a["gru.w_ih"][i, j] for i in range(len(x))) + a["gru.b_ih"][j]
              for j in range(3 * H)]
        gh = [sum(h[i] * a["gru.w_hh"][i, j] for i in range(H)) + a["gru.b_hh"][j]
              for j in range(3 * H)]
        new = []
        for j in range(H):
            r = sig(gi[j] + gh[j])
            z = sig(gi[H + j] + gh[H + j])
            n = math.tanh(gi[2 * H + j] + r * gh[2 * H + j])
            new.append((1 - z) * n + z * h[j])
        h = new

    def dense(v, w, b, relu):
        out = [sum(v[i] * w[i, j] for i in range(len(v))) + b[j] for j in range(w.shape[1])]
        return [max(0.0, o) for o in out] if relu else out

    f = dense(h, a["fc1.w"], a["fc1.b"], True)
    f = dense(f, a["fc2.w"], a["fc2.b"], True)
    return np.array(dense(f, a["out.w"], a["out.b"], False))


class TestReward:
    def test_ack_values(self):
        assert reward(tbs(10, 50), 1, 50, 1) == tbs(10, 50) / 50
        assert reward(3000, 2, 50, 1) == 30.0

    def test_nack_values(self):
        assert reward(3000, 1, 50, 0) == -0.02
        assert reward(3000, 3, 50, 0) == -0.06

    def test_rejects_bad_counts(self):
        with pytest.raises(ValueError):
            reward(100, 0, 50, 1)
        with pytest.raises(ValueError):
            reward(100, 1, 0, 1)

    @given(st.integers(0, 27), st.integers(1, 4), st.integers(1, 100))
    def test_ack_beats_nack(self, m, rtx, rb):
        assert reward(tbs(m, rb), rtx, rb, 1) > 0 > reward(tbs(m, rb), rtx, rb, 0)


class TestFeatures:
    def test_frame_normalization(self):
        f = build_frame(15, 1, 27, 0)
        assert np.array_equal(f, [1.0, 1.0, 1.0, 1.0])
        assert np.array_equal(build_frame(3, 0, 9, 6), [0.2, 0.0, 1 / 3, -0.2])

    def test_history_newest_first_and_zero_padded(self):
        h = FeatureHistory(2)
        h.push(np.full(4, 1.0))
        w = h.push(np.full(4, 2.0))
        assert w.shape == (3, 4)
        assert np.array_equal(w[:, 0], [2.0, 1.0, 0.0])

    def test_window_not_aliased(self):
        h = FeatureHistory(1)
        w1 = h.push(np.ones(4))
        h.push(np.zeros(4))
        assert np.array_equal(w1[0], np.ones(4))


class TestAlignment:
    def make_log(self, d_tx=4, d_ack=8):
        log = ObservationLog()
        for t in range(200):
            log.record_state(t, np.full((1, 4), float(t)))
        for t in range(d_tx, 190):
            log.record_feedback(fb(t, d_ack, t % 28, ack=t % 3 != 0))
        return log

    def test_default_delays(self):
        e = align_experience(self.make_log(), 100, 4, 8, 50)
        assert e.t == 100
        assert e.s[0, 0] == 100.0
        assert e.a == 104 % 28
        assert e.s_next[0, 0] == 112.0
        assert e.r == reward(1000, 1, 50, 1)  # 104 % 3 != 0

    def test_zero_ack_delay(self):
        e = align_experience(self.make_log(d_ack=0), 100, 4, 0, 50)
        assert e.a == 104 % 28 and e.s_next[0, 0] == 104.0

    def test_retransmission_reward_uses_rtx(self):
        log = ObservationLog()
        for t in range(20):
            log.record_state(t, np.zeros((1, 4)))
        log.record_feedback(fb(6, 8, 5, ack=1, rtx=2, tb_bits=4000))
        e = align_experience(log, 2, 4, 8, 50)
        assert e.r == 40.0

    def test_missing_feedback(self):
        log = ObservationLog()
        log.record_state(0, np.zeros((1, 4)))
        with pytest.raises(AlignmentError):
            align_experience(log, 0, 4, 8, 50)

    def test_mismatched_feedback(self):
        log = ObservationLog()
        for t in range(20):
            log.record_state(t, np.zeros((1, 4)))
        log.actions[4] = 3
        log.feedback[12] = fb(5, 7, 3, 1)
        with pytest.raises(AlignmentError):
            align_experience(log, 0, 4, 8, 50)


class TestReplay:
    def test_ring_overwrites_oldest(self):
        buf = ReplayBuffer(3, (1, 4))
        for t in range(5):
            buf.add(Experience(np.full((1, 4), t), t % 28, float(t), np.zeros((1, 4)), t))
        assert len(buf) == 3
        assert sorted(buf.t.tolist()) == [2, 3, 4]

    def test_distinct_samples(self):
        buf = ReplayBuffer(100, (1, 4))
        for t in range(100):
            buf.add(Experience(np.zeros((1, 4)), 0, 0.0, np.zeros((1, 4)), t))
        idx = buf.sample_indices(64, np.random.default_rng(0))
        assert len(set(idx.tolist())) == 64

    def test_underfull_sample_rejected(self):
        buf = ReplayBuffer(10, (1, 4))
        with pytest.raises(ValueError):
            buf.sample(1, np.random.default_rng(0))

    def test_uniform_sampling_chi_square(self):
        buf = ReplayBuffer(50, (1, 4))
        for t in range(50):
            buf.add(Experience(np.zeros((1, 4)), 0, 0.0, np.zeros((1, 4)), t))
        rng = np.random.default_rng(3)
        counts = np.zeros(50)
        for _ in range(4000):
            np.add.at(counts, buf.sample_indices(10, rng), 1)
        assert stats.chisquare(counts).pvalue > 0.001


class TestPolicy:
    def test_epsilon_schedule(self):
        hp = Hyperparams()
        assert epsilon_at(0, hp) == 1.0
        assert epsilon_at(5000, hp) == pytest.approx(0.505)
        assert epsilon_at(10_000, hp) == 0.01
        assert epsilon_at(10**6, hp) == 0.01

    def test_greedy_tie_lowest_index(self):
        assert greedy(np.zeros(28)) == 0
        q = np.zeros(28)
        q[[5, 9]] = 1.0
        assert greedy(q) == 5

    def test_zero_params_zero_q(self):
        p = zeros_like(init_params(8))
        s = np.random.default_rng(0).normal(size=(21, 4))
        assert np.array_equal(q_forward(p, s), np.zeros(28))
        rng = np.random.default_rng(0)
        assert select_action(p, s, 0.0, rng) == 0

    def test_full_exploration_is_uniform(self):
        p = init_params(8)
        rng = np.random.default_rng(1)
        s = np.zeros((21, 4))
        counts = np.bincount([select_action(p, s, 1.0, rng) for _ in range(28_000)], minlength=28)
        assert stats.chisquare(counts).pvalue > 0.001

    def test_epsilon_out_of_range(self):
        with pytest.raises(ValueError):
            select_action(init_params(4), np.zeros((3, 4)), 1.5, np.random.default_rng(0))


class TestNetwork:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, hidden=5)
        s = rng.normal(size=(4, 4))
        ref = reference_q(p, s)
        assert np.allclose(q_forward(p, s), ref, rtol=0, atol=1e-6)
        assert np.allclose(q_values(p, s[None])[0], ref, rtol=0, atol=1e-6)

    def test_batch_and_single_paths_agree(self):
        rng = np.random.default_rng(9)
        p = init_params(64, rng)
        X = rng.normal(size=(16, 21, 4))
        batch = q_values(p, X)
        single = np.stack([q_forward(p, x) for x in X])
        assert np.allclose(batch, single, rtol=0, atol=1e-10)

    def test_serialization_round_trip(self):
        p = init_params(16, np.random.default_rng(2))
        back = QNetParams.from_bytes(p.to_bytes())
        assert all(np.array_equal(a, b) for a, b in zip(p.arrays.values(), back.arrays.values()))
        assert back.checksum() == p.checksum()

    def test_rejects_bad_layout(self):
        p = init_params(4)
        arrays = OrderedDict(p.arrays)
        arrays["fc1.w"] = np.zeros((3, 3))
        with pytest.raises(ValueError):
            QNetParams(arrays)

    def test_nonfinite_q_raises(self):
        p = init_params(4)
        p.arrays["out.b"][0] = np.nan
        with pytest.raises(NumericError):
            q_values(p, np.zeros((1, 3, 4)))


def _batch(rng, n=8, l1=3):
    return (rng.normal(size=(n, l1, 4)), rng.integers(0, N_MCS, n),
            rng.normal(0, 50, n), rng.normal(size=(n, l1, 4)))


def numeric_grad(main, target, batch, hp, h=1e-5):
    base = main.flat()
    g = np.empty_like(base)
    for i in range(base.size):
        up, dn = base.copy(), base.copy()
        up[i] += h
        dn[i] -= h
        lu, _ = td_loss_and_grad(main.with_flat(up), target, batch, hp)
        ld, _ = td_loss_and_grad(main.with_flat(dn), target, batch, hp)
        g[i] = (lu - ld) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300)


class TestGradients:
    def test_td_loss_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        hp = Hyperparams(reward_norm=832.5)
        main, target = random_params(rng), random_params(rng)
        batch = _batch(rng)
        _, g = td_loss_and_grad(main, target, batch, hp)
        assert rel_err(g.flat(), numeric_grad(main, target, batch, hp)) < 1e-6

    def test_backward_of_sum_q(self):
        rng = np.random.default_rng(6)
        p = random_params(rng, hidden=3)
        X = rng.normal(size=(2, 2, 4))
        dq = rng.normal(size=(2, 28))
        _, g = backward(p, X, dq)
        base = p.flat()
        num = np.empty_like(base)
        for i in range(base.size):
            up, dn = base.copy(), base.copy()
            up[i] += 1e-6
            dn[i] -= 1e-6
            num[i] = (np.sum(dq * q_values(p.with_flat(up), X))
                      - np.sum(dq * q_values(p.with_flat(dn), X))) / 2e-6
        assert rel_err(g.flat(), num) < 1e-6


class TestTrainStep:
    def test_gamma_zero_single_example(self):
        # with gamma -> 0 the target is r / norm; one SGD-like step moves Q(s, a) towards it
        rng = np.random.default_rng(0)
        hp = Hyperparams(gamma=1e-12, reward_norm=1.0, batch_size=1)
        main = init_params(8, rng)
        s = rng.normal(size=(1, 3, 4))
        batch = (s, np.array([4]), np.array([5.0]), s)
        q0 = q_values(main, s)[0, 4]
        new, loss = train_step(main, main.copy(), batch, hp, Adam(1e-2))
        assert loss == pytest.approx((5.0 - q0) ** 2, rel=1e-9)
        assert abs(5.0 - q_values(new, s)[0, 4]) < abs(5.0 - q0)

    def test_fixed_point_has_zero_gradient(self):
        rng = np.random.default_rng(1)
        hp = Hyperparams(reward_norm=1.0)
        main = init_params(8, rng)
        s = rng.normal(size=(4, 3, 4))
        s2 = rng.normal(size=(4, 3, 4))
        a = np.array([0, 3, 7, 27])
        # rewards that make the current Q-values the exact TD targets
        r = q_values(main, s)[np.arange(4), a] - hp.gamma * q_values(main, s2).max(1)
        loss, g = td_loss_and_grad(main, main, (s, a, r, s2), hp)
        assert loss == pytest.approx(0.0, abs=1e-20)
        assert np.max(np.abs(g.flat())) < 1e-12

    def test_exact_fixed_point_is_not_moved(self):
        p = zeros_like(init_params(8))
        s = np.random.default_rng(2).normal(size=(4, 3, 4))
        batch = (s, np.array([0, 1, 2, 3]), np.zeros(4), s)
        new, loss = train_step(p, p.copy(), batch, Hyperparams(reward_norm=1.0), Adam())
        assert loss == 0.0
        assert np.array_equal(new.flat(), p.flat())

    def test_targets_use_reward_norm(self):
        p = zeros_like(init_params(4))
        hp = Hyperparams(reward_norm=832.5)
        y = td_targets(p, np.array([832.5, -0.02]), np.zeros((2, 3, 4)), hp)
        assert np.allclose(y, [1.0, -0.02 / 832.5])

    def test_numeric_error_on_nonfinite_loss(self):
        rng = np.random.default_rng(0)
        hp = Hyperparams(reward_norm=1.0)
        p = init_params(4, rng)
        batch = (np.zeros((1, 3, 4)), np.array([0]), np.array([np.inf]), np.zeros((1, 3, 4)))
        with pytest.raises(NumericError):
            train_step(p, p.copy(), batch, hp, Adam())

    def test_adam_keeps_float32_grid(self):
        rng = np.random.default_rng(2)
        hp = Hyperparams(reward_norm=1.0)
        p = init_params(8, rng)
        new, _ = train_step(p, p.copy(), _batch(rng), hp, Adam())
        v = new.flat()
        assert np.array_equal(v, v.astype(np.float32).astype(np.float64))


class TestSync:
    def test_copy_is_exact_and_independent(self):
        rng = np.random.default_rng(4)
        src, dst = init_params(8, rng), init_params(8, np.random.default_rng(5))
        q_values(dst, np.zeros((1, 3, 4)))  # populate cached weights
        sync(src, dst)
        assert np.array_equal(src.flat(), dst.flat())
        X = rng.normal(size=(3, 3, 4))
        assert np.array_equal(q_values(src, X), q_values(dst, X))
        src.arrays["out.b"][0] += 1.0
        assert dst.arrays["out.b"][0] != src.arrays["out.b"][0]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sync(init_params(4), init_params(8))


class TestHyperparams:
    def test_defaults(self):
        hp = Hyperparams()
        assert (hp.gamma, hp.lr, hp.batch_size, hp.train_interval) == (0.9, 1e-3, 64, 50)
        assert hp.update_interval == 500
        assert (hp.history, hp.buffer_capacity) == (20, 4096)

    @pytest.mark.parametrize("kw", [dict(gamma=1.0), dict(batch_size=0), dict(lr=0.0),
                                    dict(train_interval=0), dict(eps_end=2.0),
                                    dict(batch_size=10, buffer_capacity=5), dict(reward_norm=-1.0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            Hyperparams(**kw)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_q_values_finite_for_bounded_inputs(seed):
    rng = np.random.default_rng(seed)
    p = init_params(8, rng)
    X = rng.uniform(-1, 1, size=(4, 21, 4))
    assert np.all(np.isfinite(q_values(p, X)))
