import json
import struct
import threading
import time
import zlib

import numpy as np
import pytest

from dcdqnla.channel import generate_trace
from dcdqnla.dqn import Experience, Hyperparams
from dcdqnla.qnet import init_params, q_forward
from dcdqnla.runtime import (MSG_CONTROL, MSG_EXPERIENCE, MSG_PARAMS, AuditLog, ChannelClosed,
                             DcDqnAgent, DecisionPair, ExperienceMsg, InferenceServer, ParamMsg,
                             QueueChannel, TcpChannel, Trainer, control, decode_frame,
                             encode_frame, estimate_delay_metric, request_decision, trainer_loop)
from dcdqnla.sim import AuditTrail, SimConfig, run


def small_hp(**kw):
    base = dict(hidden=8, history=3, batch_size=8, buffer_capacity=256, eps_decay_ttis=500)
    base.update(kw)
    return Hyperparams(**base)


def exp(t, l1=4, seed=None):
    rng = np.random.default_rng(t if seed is None else seed)
    return Experience(rng.normal(size=(l1, 4)), int(rng.integers(28)), float(rng.normal()),
                      rng.normal(size=(l1, 4)), t)


class TestFraming:
    def test_layout(self):
        f = encode_frame(MSG_CONTROL, b"abc")
        assert f == struct.pack("<I", 3) + b"\x03abc"
        assert decode_frame(f) == (MSG_CONTROL, b"abc")

    def test_rejects_truncated_and_unknown(self):
        with pytest.raises(ValueError):
            decode_frame(struct.pack("<I", 5) + b"\x01ab")
        with pytest.raises(ValueError):
            encode_frame(9, b"")

    def test_param_msg_round_trip_over_tcp(self):
        p = init_params(16, np.random.default_rng(0))
        msg = ParamMsg.from_params(7, p)
        srv = TcpChannel.listener()
        host, port = srv.getsockname()
        got = {}

        def client():
            c = TcpChannel.connect(host, port)
            got["frame"] = c.recv(timeout=5)
            c.close()

        th = threading.Thread(target=client)
        th.start()
        conn, _ = srv.accept()
        server = TcpChannel(conn)
        server.send(MSG_PARAMS, msg.encode())
        th.join()
        server.close()
        srv.close()
        kind, payload = got["frame"]
        assert kind == MSG_PARAMS and payload == msg.encode()
        back = ParamMsg.decode(payload)
        assert back == msg
        assert np.array_equal(back.params().flat(), p.flat())

    def test_experience_msg_round_trip(self):
        es = tuple(exp(t) for t in range(5))
        back = ExperienceMsg.decode(ExperienceMsg(42, es).encode())
        assert back.tti == 42 and len(back.experiences) == 5
        for a, b in zip(es, back.experiences):
            assert (a.t, a.a, a.r) == (b.t, b.a, b.r)
            assert np.array_equal(a.s, b.s) and np.array_equal(a.s_next, b.s_next)
        assert ExperienceMsg.decode(ExperienceMsg(3, ()).encode()).experiences == ()

    def test_control_is_json(self):
        assert json.loads(control("clock", tti=5, barrier=True)) == {"op": "clock", "tti": 5,
                                                                     "barrier": True}

    def test_closed_channel(self):
        a, b = QueueChannel.pair()
        b.close()
        with pytest.raises(ChannelClosed):
            a.recv(timeout=1)


class TestDecisionPair:
    def test_swap_and_version(self):
        rng = np.random.default_rng(1)
        audit = AuditLog()
        pair = DecisionPair(init_params(8, rng), audit)
        trained = init_params(8, rng)
        assert pair.apply_params(ParamMsg.from_params(1, trained))
        s = rng.normal(size=(4, 4))
        assert np.array_equal(pair.infer(s), q_forward(trained, s))
        assert pair.version == 1 and pair.swaps == 1
        assert audit.of("swap")[0]["version"] == 1

    def test_stale_and_corrupt_dropped(self):
        audit = AuditLog()
        p = init_params(8)
        pair = DecisionPair(p, audit)
        pair.apply_params(ParamMsg.from_params(2, p))
        assert not pair.apply_params(ParamMsg.from_params(1, init_params(8, np.random.default_rng(3))))
        good = ParamMsg.from_params(3, p)
        bad = ParamMsg(3, good.payload[:-1] + bytes([good.payload[-1] ^ 1]), good.checksum)
        assert not pair.apply_params(bad)
        assert pair.version == 2 and pair.dropped == 2
        assert [e["reason"] for e in audit.of("param_drop")] == ["stale", "checksum"]

    def test_two_rapid_messages_latest_wins(self):
        rng = np.random.default_rng(4)
        pair = DecisionPair(init_params(8, rng))
        p1, p2 = init_params(8, rng), init_params(8, rng)
        pair.apply_params(ParamMsg.from_params(1, p1))
        pair.apply_params(ParamMsg.from_params(2, p2))
        s = rng.normal(size=(4, 4))
        assert pair.version == 2
        assert np.array_equal(pair.infer(s), q_forward(p2, s))

    def test_swap_deferred_while_inference_in_flight(self):
        rng = np.random.default_rng(5)
        p0, p1 = init_params(8, rng), init_params(8, rng)
        pair = DecisionPair(p0)
        pair._in_flight = 1  # simulate a request being served
        pair.apply_params(ParamMsg.from_params(1, p1))
        assert pair.version == 0
        pair._in_flight = 0
        s = rng.normal(size=(4, 4))
        pair.infer(s)  # completes and performs the pending swap
        assert pair.version == 1
        assert np.array_equal(pair.infer(s), q_forward(p1, s))

    def test_concurrent_inference_never_sees_partial_params(self):
        rng = np.random.default_rng(6)
        nets = [init_params(8, rng) for _ in range(4)]
        s = rng.normal(size=(4, 4))
        valid = [q_forward(n, s) for n in nets]
        pair = DecisionPair(nets[0])
        bad = []

        def reader():
            for _ in range(3000):
                q = pair.infer(s)
                if not any(np.array_equal(q, v) for v in valid):
                    bad.append(q)

        th = threading.Thread(target=reader)
        th.start()
        for v in range(1, 60):
            pair.apply_params(ParamMsg.from_params(v, nets[v % 4]))
        th.join()
        assert not bad


class TestDelayMetric:
    def test_zero_for_identical(self):
        p = init_params(8)
        X = np.random.default_rng(0).normal(size=(16, 4, 4))
        assert estimate_delay_metric(p, p.copy(), X) == 0.0

    def test_bias_perturbation(self):
        p = init_params(8)
        q = p.copy()
        q.arrays["out.b"][3] += 0.5
        X = np.random.default_rng(0).normal(size=(16, 4, 4))
        assert estimate_delay_metric(p, q, X) == pytest.approx(0.5, abs=1e-12)

    def test_empty_probes(self):
        with pytest.raises(ValueError):
            estimate_delay_metric(init_params(4), init_params(4), np.zeros((0, 3, 4)))


class TestTrainer:
    def test_schedule_counts(self):
        audit = AuditLog()
        hp = small_hp(train_interval=50, update_interval=500, batch_size=8)
        tr = Trainer(hp, audit=audit)
        tr.ingest([exp(t) for t in range(20)])
        tr.advance_to(4999)
        assert len(audit.of("train")) + len(audit.of("train_skip")) == 100
        assert tr.train_steps == 100
        assert len(audit.of("sync")) == 10 and tr.version == 10

    def test_underfull_buffer_skips(self):
        hp = small_hp(batch_size=8)
        tr = Trainer(hp)
        before = tr.main.flat().copy()
        tr.advance_to(2000)
        assert tr.train_steps == 0 and tr.skipped == 41
        assert np.array_equal(tr.main.flat(), before)

    def test_delay_metric_zero_at_sync(self):
        hp = small_hp(train_interval=10, update_interval=50)
        tr = Trainer(hp, track_delay=True)
        tr.ingest([exp(t) for t in range(64)])
        tr.advance_to(1000)
        at_sync = [v for _, v, p in tr.delay_samples if p == "sync"]
        during = [v for _, v, p in tr.delay_samples if p == "train"]
        assert at_sync and all(v == 0.0 for v in at_sync)
        assert all(v >= 0.0 for v in during) and max(during) > 0

    def test_rejects_out_of_order_experience(self):
        tr = Trainer(small_hp())
        tr.ingest([exp(10)])
        with pytest.raises(ValueError):
            tr.ingest([exp(5)])

    def test_loop_serves_and_stops(self):
        hp = small_hp(train_interval=10, update_interval=20)
        mine, theirs = QueueChannel.pair()
        th = threading.Thread(target=trainer_loop, args=(Trainer(hp), theirs), daemon=True)
        th.start()
        mine.send(MSG_EXPERIENCE, ExperienceMsg(40, tuple(exp(t) for t in range(16))).encode())
        mine.send(MSG_CONTROL, control("clock", tti=60, barrier=True))
        kinds, got_ack = [], None
        while got_ack is None:
            kind, payload = mine.recv(timeout=5)
            kinds.append(kind)
            if kind == MSG_CONTROL:
                got_ack = json.loads(payload)
        assert got_ack == {"op": "ack", "tti": 60}
        assert kinds.count(MSG_PARAMS) == 4  # updates at t = 0, 20, 40, 60
        mine.send(MSG_CONTROL, control("stop"))
        kind, payload = mine.recv(timeout=5)
        stats = json.loads(payload)
        assert stats["op"] == "stopped" and stats["stats"]["published"] == 4
        th.join(timeout=5)
        assert not th.is_alive()


class TestInferenceServer:
    def test_answers_within_infinite_deadline(self):
        p = init_params(8)
        server = InferenceServer(DecisionPair(p))
        s = np.zeros((4, 4))
        a, latency = server.request(s, float("inf"))
        server.close()
        assert a == int(np.argmax(q_forward(p, s))) and latency >= 0

    def test_stall_triggers_fallback(self):
        audit = AuditLog()
        server = InferenceServer(DecisionPair(init_params(8)), stall_s=0.005)
        from dcdqnla.runtime import DeadlineStats
        stats = DeadlineStats(0.5e-3)
        m, _, fell_back = request_decision(server, np.zeros((4, 4)), 0.5e-3, 11, stats, audit, tti=3)
        time.sleep(0.01)
        server.close()
        assert fell_back and m == 11
        assert stats.fallback_rate == 1.0 and stats.late_answers == 1
        ev = audit.of("fallback")[0]
        assert ev["tti"] == 3 and "discarded" in ev["note"]


def _decisions(mode, **kw):
    n = 1500
    cfg = SimConfig(tti_count=n)
    hp = small_hp(train_interval=10, update_interval=50, seed=3)
    agent = DcDqnAgent(cfg, hp, mode=mode, **kw)
    audit = AuditTrail()
    try:
        log = run(generate_trace("mobile", n, 2), agent, cfg, audit)
    finally:
        agent.close()
    return log.mcs.copy(), agent


class TestModes:
    def test_lockstep_matches_two_role_thread(self):
        a, ag_a = _decisions("lockstep")
        b, ag_b = _decisions("two-role", trainer_in="thread", transport="queue")
        assert np.array_equal(a, b)
        assert ag_a.trainer_stats["train_steps"] == ag_b.trainer_stats["train_steps"] > 0
        assert ag_b.pair.version == ag_a.pair.version

    def test_lockstep_matches_two_role_process_tcp(self):
        a, _ = _decisions("lockstep")
        b, ag = _decisions("two-role", trainer_in="process", transport="tcp")
        assert np.array_equal(a, b)
        assert ag.trainer_stats["published"] == 1500 // 50

    def test_experiences_match_feedback(self):
        n = 600
        cfg = SimConfig(tti_count=n)
        agent = DcDqnAgent(cfg, small_hp(), mode="lockstep")
        audit = AuditTrail()
        run(generate_trace("mobile", n, 1), agent, cfg, audit)
        agent.close()
        expected = sum(1 for e in audit.feedback
                       if e.origin_tti - cfg.d_tx >= 0 and e.tti_delivered < n)
        assert agent.experiences == expected
        buf = agent.trainer.buffer
        assert buf.size == buf.capacity  # wrapped: oldest entry sits at the write position
        assert np.all(np.diff(np.roll(buf.t, -buf.pos)) > 0)

    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError):
            DcDqnAgent(SimConfig(tti_count=10), small_hp(), mode="async")


def test_checksum_field_is_crc32():
    p = init_params(4)
    msg = ParamMsg.from_params(1, p)
    assert msg.checksum == zlib.crc32(p.to_bytes())
