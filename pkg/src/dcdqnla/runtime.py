"""Decoupled training/inference runtime for the DQN link adapter.

The inference side holds two decision networks: one serves requests while the
other receives parameter snapshots, then they swap. The trainer owns the main
and target networks plus the replay buffer. The two sides exchange only
framed messages:

* type 1 ``ParamMsg``: versioned, checksummed parameter snapshot (trainer -> inference)
* type 2 ``ExperienceMsg``: aligned experiences (inference -> trainer)
* type 3 control: JSON clock / barrier / stop messages

Three modes are supported. ``lockstep`` runs both roles inline in simulated
time and is fully deterministic. ``two-role`` runs the trainer in its own
thread or process and synchronizes at training/update ticks, which yields
the same decisions as lockstep. ``realtime`` runs the trainer asynchronously
and bounds every inference request by a wall-clock deadline.
"""

from __future__ import annotations

import dataclasses
import json
import math
import multiprocessing as mp
import os
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .agents import LinkAdapter
from .channel import N_MCS, tbs
from .dqn import (FeatureHistory, Hyperparams, ObservationLog, PendingFeedback, ReplayBuffer,
                  align_experience, build_frame, epsilon_at, greedy, sync, train_step,
                  Experience)
from .qnet import Adam, NumericError, QNetParams, init_params, q_forward, q_values
from .sim import SimConfig

MSG_PARAMS = 1
MSG_EXPERIENCE = 2
MSG_CONTROL = 3

_HEADER = struct.Struct("<IB")
DEFAULT_DEADLINE_S = 0.5e-3


# ---------------------------------------------------------------------------
# audit log
# ---------------------------------------------------------------------------


class AuditLog:
    """Thread-safe list of events, optionally mirrored to a JSON-lines file."""

    def __init__(self, path=None):
        self.events: list[dict] = []
        self._lock = threading.Lock()
        self._fh = open(path, "a") if path else None

    def record(self, kind: str, tti: int | None = None, **fields):
        ev = {"event": kind, "tti": tti, **fields}
        with self._lock:
            self.events.append(ev)
            if self._fh:
                self._fh.write(json.dumps(ev) + "\n")

    def of(self, kind: str) -> list[dict]:
        with self._lock:
            return [e for e in self.events if e["event"] == kind]

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# messages and framing
# ---------------------------------------------------------------------------


class ChecksumError(ValueError):
    pass


@dataclass(frozen=True)
class ParamMsg:
    version: int
    payload: bytes
    checksum: int

    @classmethod
    def from_params(cls, version: int, params: QNetParams) -> "ParamMsg":
        payload = params.to_bytes()
        return cls(version, payload, zlib.crc32(payload))

    def params(self) -> QNetParams:
        if zlib.crc32(self.payload) != self.checksum:
            raise ChecksumError(f"parameter snapshot v{self.version} failed its checksum")
        return QNetParams.from_bytes(self.payload)

    def encode(self) -> bytes:
        return struct.pack("<QI", self.version, self.checksum) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "ParamMsg":
        version, crc = struct.unpack_from("<QI", data, 0)
        return cls(version, bytes(data[12:]), crc)


@dataclass(frozen=True)
class ExperienceMsg:
    """Batch of experiences finalized up to simulated TTI ``tti``."""

    tti: int
    experiences: tuple

    _HEAD = struct.Struct("<qIII")

    def encode(self) -> bytes:
        n = len(self.experiences)
        if n == 0:
            return self._HEAD.pack(self.tti, 0, 0, 0)
        L1, F = self.experiences[0].s.shape
        t = np.array([e.t for e in self.experiences], dtype="<i8")
        a = np.array([e.a for e in self.experiences], dtype="<i8")
        r = np.array([e.r for e in self.experiences], dtype="<f8")
        s = np.stack([e.s for e in self.experiences]).astype("<f8")
        s2 = np.stack([e.s_next for e in self.experiences]).astype("<f8")
        return b"".join([self._HEAD.pack(self.tti, n, L1, F), t.tobytes(), a.tobytes(),
                         r.tobytes(), s.tobytes(), s2.tobytes()])

    @classmethod
    def decode(cls, data: bytes) -> "ExperienceMsg":
        tti, n, L1, F = cls._HEAD.unpack_from(data, 0)
        off = cls._HEAD.size
        if n == 0:
            return cls(tti, ())

        def take(dtype, count):
            nonlocal off
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
            off += arr.nbytes
            return arr

        t = take("<i8", n)
        a = take("<i8", n)
        r = take("<f8", n)
        s = take("<f8", n * L1 * F).reshape(n, L1, F)
        s2 = take("<f8", n * L1 * F).reshape(n, L1, F)
        exps = tuple(Experience(s[i].copy(), int(a[i]), float(r[i]), s2[i].copy(), int(t[i]))
                     for i in range(n))
        return cls(tti, exps)


def encode_frame(kind: int, payload: bytes) -> bytes:
    """``u32 LE payload length | u8 type | payload``."""
    if kind not in (MSG_PARAMS, MSG_EXPERIENCE, MSG_CONTROL):
        raise ValueError(f"unknown message type {kind}")
    return _HEADER.pack(len(payload), kind) + payload


def decode_frame(frame: bytes) -> tuple[int, bytes]:
    n, kind = _HEADER.unpack_from(frame, 0)
    if len(frame) != _HEADER.size + n:
        raise ValueError("frame length mismatch")
    return kind, frame[_HEADER.size:]


def control(op: str, **fields) -> bytes:
    return json.dumps({"op": op, **fields}).encode()


class ChannelClosed(ConnectionError):
    pass


class QueueChannel:
    """In-process endpoint over a pair of queues (thread transport)."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self.inbox, self.outbox = inbox, outbox

    @staticmethod
    def pair():
        a, b = queue.Queue(), queue.Queue()
        return QueueChannel(a, b), QueueChannel(b, a)

    def send(self, kind: int, payload: bytes):
        self.outbox.put(encode_frame(kind, payload))

    def recv(self, timeout: float | None = None):
        try:
            frame = self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None
        if frame is None:
            raise ChannelClosed("peer closed")
        return decode_frame(frame)

    def close(self):
        self.outbox.put(None)


class PipeChannel:
    """Endpoint over a ``multiprocessing`` connection (process transport)."""

    def __init__(self, conn):
        self.conn = conn

    @staticmethod
    def pair():
        a, b = mp.Pipe(duplex=True)
        return PipeChannel(a), PipeChannel(b)

    def send(self, kind: int, payload: bytes):
        self.conn.send_bytes(encode_frame(kind, payload))

    def recv(self, timeout: float | None = None):
        try:
            if not self.conn.poll(timeout):
                return None
            return decode_frame(self.conn.recv_bytes())
        except (EOFError, OSError) as exc:
            raise ChannelClosed(str(exc)) from exc

    def close(self):
        self.conn.close()


class TcpChannel:
    """Endpoint over a TCP stream carrying length-prefixed frames."""

    def __init__(self, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self._send_lock = threading.Lock()

    @classmethod
    def connect(cls, host: str, port: int, retries: int = 8, backoff_s: float = 0.05):
        delay = backoff_s
        for attempt in range(retries + 1):
            try:
                return cls(socket.create_connection((host, port), timeout=5.0))
            except OSError:
                if attempt == retries:
                    raise
                time.sleep(delay)
                delay *= 2

    @staticmethod
    def listener(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(1)
        return srv

    def send(self, kind: int, payload: bytes):
        with self._send_lock:
            self.sock.sendall(encode_frame(kind, payload))

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise ChannelClosed("connection closed")
            buf += chunk
        return bytes(buf)

    def recv(self, timeout: float | None = None):
        self.sock.settimeout(timeout)
        try:
            head = self.sock.recv(1, socket.MSG_PEEK)
        except socket.timeout:
            return None
        except OSError as exc:
            raise ChannelClosed(str(exc)) from exc
        if not head:
            raise ChannelClosed("connection closed")
        self.sock.settimeout(None)
        n, kind = _HEADER.unpack(self._read_exact(_HEADER.size))
        return kind, self._read_exact(n)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


# ---------------------------------------------------------------------------
# decision networks
# ---------------------------------------------------------------------------


class DecisionPair:
    """Two decision networks: ``active`` serves inference, ``loading`` takes snapshots.

    A snapshot is decoded and checksum-verified into the loading slot; the
    swap happens once no inference is in flight. Stale or corrupt messages are
    dropped and audited.
    """

    def __init__(self, initial: QNetParams, audit: AuditLog | None = None):
        self.nets = [initial.copy(), initial.copy()]
        self.active = 0
        self.version = 0
        self.audit = audit
        self._lock = threading.Lock()
        self._in_flight = 0
        self._pending: tuple[int, int] | None = None  # (slot, version) awaiting swap
        self.swaps = 0
        self.dropped = 0

    @property
    def loading(self) -> int:
        return 1 - self.active

    def active_params(self) -> QNetParams:
        return self.nets[self.active]

    def infer(self, s: np.ndarray) -> np.ndarray:
        with self._lock:
            net = self.nets[self.active]
            self._in_flight += 1
        try:
            return q_forward(net, s)
        finally:
            with self._lock:
                self._in_flight -= 1
                if self._in_flight == 0 and self._pending is not None:
                    self._swap_locked()

    def _swap_locked(self):
        slot, version = self._pending
        self.active = slot
        self.version = version
        self._pending = None
        self.swaps += 1
        if self.audit is not None:
            self.audit.record("swap", None, version=version)

    def apply_params(self, msg: ParamMsg, tti: int | None = None) -> bool:
        latest = self._pending[1] if self._pending is not None else self.version
        if msg.version <= latest:
            self._drop(msg, tti, "stale")
            return False
        try:
            params = msg.params()
        except (ChecksumError, ValueError):
            self._drop(msg, tti, "checksum")
            return False
        with self._lock:
            slot = self.loading
            self.nets[slot] = params
            self._pending = (slot, msg.version)
            if self._in_flight == 0:
                self._swap_locked()
        return True

    def _drop(self, msg, tti, reason):
        self.dropped += 1
        if self.audit is not None:
            self.audit.record("param_drop", tti, version=msg.version, reason=reason)


# ---------------------------------------------------------------------------
# delay metric
# ---------------------------------------------------------------------------


def estimate_delay_metric(main: QNetParams, decision: QNetParams, probe_states) -> float:
    """Largest |Q_decision - Q_main| over probe states and all actions.

    This is an empirical lower bound on the supremum over the whole state space.
    """
    probe_states = np.asarray(probe_states)
    if len(probe_states) == 0:
        raise ValueError("probe set must be non-empty")
    return float(np.max(np.abs(q_values(decision, probe_states) - q_values(main, probe_states))))


# ---------------------------------------------------------------------------
# trainer role
# ---------------------------------------------------------------------------


def seed_streams(seed: int):
    """Independent generators for (initial weights, exploration, replay sampling)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def initial_params(hp: Hyperparams) -> QNetParams:
    return init_params(hp.hidden, seed_streams(hp.seed)[0])


def busy_wait(seconds: float):
    end = time.perf_counter() + seconds
    while time.perf_counter() < end:
        pass


class Trainer:
    """Main/target networks, replay buffer and the simulated-time schedule.

    ``advance_to(t)`` runs every training tick (``t % T == 0``) and update tick
    (``t % U == 0``) not yet processed, returning the ParamMsgs published.
    """

    def __init__(self, hp: Hyperparams, track_delay: bool = False, train_hook_s: float = 0.0,
                 probe_size: int = 256, audit: AuditLog | None = None, training: bool = True):
        self.hp = hp
        self.main = initial_params(hp)
        self.target = self.main.copy()
        self.decision = self.main.copy()
        self.opt = Adam(hp.lr)
        self.rng = seed_streams(hp.seed)[2]
        self.buffer = ReplayBuffer(hp.buffer_capacity, (hp.history + 1, 4))
        self.track_delay = track_delay
        self.train_hook_s = train_hook_s
        self.probe_size = probe_size
        self.probes: np.ndarray | None = None
        self.audit = audit
        self.training = training
        self.version = 0
        self.clock = -1
        self.train_steps = 0
        self.skipped = 0
        self.numeric_errors = 0
        self.losses: list[float] = []
        self.delay_samples: list[tuple[int, float, str]] = []  # (tti, value, "train" | "sync")
        self.last_origin = -1

    def ingest(self, exps) -> None:
        for e in exps:
            if e.t < self.last_origin:
                raise ValueError(f"experience for TTI {e.t} arrived after TTI {self.last_origin}")
            self.last_origin = e.t
            self.buffer.add(e)

    def _measure(self, t, phase):
        if self.probes is None:
            n = min(self.probe_size, len(self.buffer))
            if n == 0:
                return
            idx = self.rng.choice(len(self.buffer), n, replace=False)
            self.probes = self.buffer.s[idx].copy()
        value = estimate_delay_metric(self.main, self.decision, self.probes)
        self.delay_samples.append((t, value, phase))

    def _train(self, t):
        hp = self.hp
        if len(self.buffer) < hp.batch_size:
            self.skipped += 1
            if self.audit is not None:
                self.audit.record("train_skip", t, buffer=len(self.buffer))
            return
        batch = self.buffer.sample(hp.batch_size, self.rng)
        try:
            self.main, loss = train_step(self.main, self.target, batch, hp, self.opt)
        except NumericError as exc:
            self.numeric_errors += 1
            if self.audit is not None:
                self.audit.record("numeric_error", t, detail=str(exc))
            return
        if self.train_hook_s:
            busy_wait(self.train_hook_s)
        self.train_steps += 1
        self.losses.append(loss)
        if self.audit is not None:
            self.audit.record("train", t, loss=loss)
        if self.track_delay:
            self._measure(t, "train")

    def _publish(self, t) -> ParamMsg:
        sync(self.main, self.target)
        self.decision = self.main.copy()
        self.version += 1
        msg = ParamMsg.from_params(self.version, self.decision)
        if self.audit is not None:
            self.audit.record("sync", t, version=self.version, checksum=msg.checksum)
        if self.track_delay:
            self._measure(t, "sync")
        return msg

    def advance_to(self, t: int) -> list[ParamMsg]:
        out = []
        if not self.training:
            self.clock = max(self.clock, t)
            return out
        T, U = self.hp.train_interval, self.hp.update_interval
        for tt in range(self.clock + 1, t + 1):
            if tt % T == 0:
                self._train(tt)
            if tt % U == 0:
                out.append(self._publish(tt))
        self.clock = max(self.clock, t)
        return out

    def stats(self) -> dict:
        train = [v for _, v, p in self.delay_samples if p == "train"]
        at_sync = [v for _, v, p in self.delay_samples if p == "sync"]
        return {
            "train_steps": self.train_steps,
            "skipped_ticks": self.skipped,
            "numeric_errors": self.numeric_errors,
            "published": self.version,
            "mean_loss": float(np.mean(self.losses)) if self.losses else None,
            "delay_metric_mean": float(np.mean(train)) if train else None,
            "delay_metric_at_sync_max": float(max(at_sync)) if at_sync else None,
            "delay_samples": [[t, v, p] for t, v, p in self.delay_samples],
        }


def trainer_loop(trainer: Trainer, channel, stop: threading.Event | None = None,
                 reconnect=None, max_retries: int = 5, backoff_s: float = 0.05):
    """Serve one trainer over a duplex channel until a stop message arrives.

    Incoming experience batches are ingested; clock messages advance the
    schedule and, when flagged as a barrier, are acknowledged after any
    resulting ParamMsgs. A stop request lets the current step finish.
    """
    retries = 0
    while stop is None or not stop.is_set():
        try:
            got = channel.recv(timeout=0.1)
        except ChannelClosed:
            if reconnect is None or retries >= max_retries:
                break
            time.sleep(backoff_s * 2 ** retries)
            retries += 1
            channel = reconnect()
            continue
        if got is None:
            continue
        kind, payload = got
        if kind == MSG_EXPERIENCE:
            msg = ExperienceMsg.decode(payload)
            trainer.ingest(msg.experiences)
            for p in trainer.advance_to(msg.tti):
                channel.send(MSG_PARAMS, p.encode())
        elif kind == MSG_CONTROL:
            ctl = json.loads(payload)
            op = ctl["op"]
            if op == "clock":
                for p in trainer.advance_to(ctl["tti"]):
                    channel.send(MSG_PARAMS, p.encode())
                if ctl.get("barrier"):
                    channel.send(MSG_CONTROL, control("ack", tti=ctl["tti"]))
            elif op == "stop":
                channel.send(MSG_CONTROL, control("stopped", stats=trainer.stats()))
                break
    return trainer


def _trainer_process(hp_fields, track_delay, train_hook_s, training, transport, endpoint, niceness):
    if niceness:
        try:
            os.nice(niceness)
        except OSError:
            pass
    hp = Hyperparams(**hp_fields)
    trainer = Trainer(hp, track_delay=track_delay, train_hook_s=train_hook_s, training=training)
    if transport == "tcp":
        host, port = endpoint
        chan = TcpChannel.connect(host, port)
        reconnect = lambda: TcpChannel.connect(host, port)  # noqa: E731
    else:
        chan, reconnect = PipeChannel(endpoint), None
    trainer_loop(trainer, chan, reconnect=reconnect)
    chan.close()


# ---------------------------------------------------------------------------
# inference role
# ---------------------------------------------------------------------------


@dataclass
class DeadlineStats:
    deadline_s: float = DEFAULT_DEADLINE_S
    latencies_s: list = field(default_factory=list)
    fallbacks: int = 0
    late_answers: int = 0

    @property
    def decisions(self) -> int:
        return len(self.latencies_s)

    @property
    def fallback_rate(self) -> float:
        return self.fallbacks / self.decisions if self.decisions else 0.0

    def within_deadline(self) -> float:
        if not self.latencies_s:
            return 1.0
        return float(np.mean(np.asarray(self.latencies_s) <= self.deadline_s))

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.latencies_s, q)) if self.latencies_s else 0.0

    def summary(self) -> dict:
        return {"deadline_s": self.deadline_s, "decisions": self.decisions,
                "fallbacks": self.fallbacks, "late_answers": self.late_answers,
                "fallback_rate": self.fallback_rate, "within_deadline": self.within_deadline(),
                "latency_p50_s": self.quantile(0.5), "latency_p90_s": self.quantile(0.9),
                "latency_p99_s": self.quantile(0.99)}


class InferenceServer:
    """Dedicated inference thread answering greedy-MCS requests from the pair.

    ``stall_s`` busy-waits before each answer (test hook for overload).
    """

    def __init__(self, pair: DecisionPair, stall_s: float = 0.0):
        self.pair = pair
        self.stall_s = stall_s
        self._cv = threading.Condition()
        self._req: tuple[int, np.ndarray] | None = None
        self._resp: tuple[int, int] | None = None
        self._seq = 0
        self._stop = False
        self._thread = threading.Thread(target=self._serve, name="inference", daemon=True)
        self._thread.start()

    def _serve(self):
        cv = self._cv
        while True:
            with cv:
                while self._req is None and not self._stop:
                    cv.wait()
                if self._stop:
                    return
                seq, s = self._req
                self._req = None
            if self.stall_s:
                busy_wait(self.stall_s)
            a = greedy(self.pair.infer(s))
            with cv:
                self._resp = (seq, a)
                cv.notify_all()

    def request(self, s: np.ndarray, deadline_s: float) -> tuple[int | None, float]:
        """Greedy action or ``None`` if the deadline passed; plus the wait time."""
        cv = self._cv
        t0 = time.perf_counter()
        end = t0 + deadline_s
        with cv:
            self._seq += 1
            seq = self._seq
            self._req = (seq, s)
            cv.notify_all()
            while self._resp is None or self._resp[0] != seq:
                remaining = end - time.perf_counter()
                if remaining <= 0:
                    return None, time.perf_counter() - t0
                cv.wait(None if math.isinf(remaining) else remaining)
            a = self._resp[1]
        return a, time.perf_counter() - t0

    def close(self):
        with self._cv:
            self._stop = True
            self._cv.notify_all()
        self._thread.join(timeout=2.0)


def request_decision(server: InferenceServer, s: np.ndarray, deadline_s: float,
                     fallback_mcs: int, stats: DeadlineStats | None = None,
                     audit: AuditLog | None = None, tti: int | None = None):
    """Ask the inference role for an MCS within ``deadline_s``.

    Returns ``(mcs, latency_s, used_fallback)``; a missed deadline yields
    ``fallback_mcs`` and any answer arriving afterwards is discarded.
    """
    a, latency = server.request(s, deadline_s)
    used_fallback = a is None
    if stats is not None:
        stats.latencies_s.append(latency)
        if used_fallback:
            stats.fallbacks += 1
            stats.late_answers += 1
    if used_fallback and audit is not None:
        audit.record("fallback", tti, latency_s=latency, mcs=fallback_mcs,
                     note="late answer discarded")
    return (fallback_mcs if used_fallback else a), latency, used_fallback


# ---------------------------------------------------------------------------
# the agent
# ---------------------------------------------------------------------------


MODES = ("lockstep", "two-role", "realtime")


class DcDqnAgent(LinkAdapter):
    """Decoupled DQN link adapter.

    Every TTI the agent appends a feature frame (latest CQI, latest delivered
    ACK and its MCS, CQI change) to its state window, turns matured feedback
    into aligned experiences, and forwards them to the trainer.
    """

    name = "dcdqn"

    def __init__(self, cfg: SimConfig, hp: Hyperparams | None = None, mode: str = "lockstep",
                 deadline_s: float = DEFAULT_DEADLINE_S, audit: AuditLog | None = None,
                 track_delay: bool = False, train_hook_s: float = 0.0, inference_stall_s: float = 0.0,
                 training: bool = True, trainer_in: str = "process", transport: str = "pipe",
                 flush_every: int = 10, niceness: int = 19):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if trainer_in not in ("thread", "process"):
            raise ValueError("trainer_in must be 'thread' or 'process'")
        if transport not in ("pipe", "tcp", "queue"):
            raise ValueError("transport must be 'pipe', 'tcp' or 'queue'")
        hp = hp or Hyperparams()
        if hp.reward_norm is None:
            hp = dataclasses.replace(hp, reward_norm=tbs(N_MCS - 1, cfg.n_rb, cfg.tables) / cfg.n_rb)
        self.cfg, self.hp, self.mode = cfg, hp, mode
        self.audit = audit
        self.deadline_s = deadline_s if mode == "realtime" else math.inf
        self.flush_every = flush_every
        self.rng = seed_streams(hp.seed)[1]

        self.hist = FeatureHistory(hp.history)
        self.obs = ObservationLog(max(256, 4 * (cfg.d_tx + cfg.d_ack + cfg.d_decision + 1)))
        self.pending = PendingFeedback()
        self.c = self.prev_c = 0
        self.last_ack = 0
        self.last_mcs = 0
        self.last_decision = 0
        self.last_fallback = False
        self.window = self.hist.window
        self.experiences = 0
        self.stats = DeadlineStats(deadline_s)
        self.trainer_stats: dict | None = None

        self.pair = DecisionPair(initial_params(hp), audit)
        self._outbox: list = []
        self._closed = False
        self.trainer: Trainer | None = None
        if mode == "lockstep":
            self.trainer = Trainer(hp, track_delay, train_hook_s, audit=audit, training=training)
            self.server = None
        else:
            self._start_remote(track_delay, train_hook_s, training, trainer_in, transport, niceness)
            self.server = InferenceServer(self.pair, inference_stall_s)

    # -- remote trainer plumbing -----------------------------------------

    def _start_remote(self, track_delay, train_hook_s, training, trainer_in, transport, niceness):
        self._acks: queue.Queue = queue.Queue()
        self._proc = None
        self._thread = None
        if trainer_in == "thread":
            trainer = Trainer(self.hp, track_delay, train_hook_s, training=training)
            if transport == "tcp":
                srv = TcpChannel.listener()
                host, port = srv.getsockname()
                holder = {}
                t = threading.Thread(target=lambda: holder.setdefault("c", TcpChannel.connect(host, port)))
                t.start()
                conn, _ = srv.accept()
                t.join()
                srv.close()
                mine, theirs = TcpChannel(conn), holder["c"]
            else:
                mine, theirs = QueueChannel.pair()
            self._thread = threading.Thread(target=trainer_loop, args=(trainer, theirs),
                                            name="trainer", daemon=True)
            self._thread.start()
        else:
            hp_fields = dataclasses.asdict(self.hp)
            if transport == "tcp":
                srv = TcpChannel.listener()
                endpoint = srv.getsockname()
            else:
                mine, theirs = PipeChannel.pair()
                endpoint = theirs.conn
                transport = "pipe"
            ctx = mp.get_context("fork")
            self._proc = ctx.Process(
                target=_trainer_process, name="trainer", daemon=True,
                args=(hp_fields, track_delay, train_hook_s, training, transport, endpoint, niceness))
            self._proc.start()
            if transport == "tcp":
                srv.settimeout(30.0)
                conn, _ = srv.accept()
                srv.close()
                mine = TcpChannel(conn)
        self.chan = mine
        self._rx = threading.Thread(target=self._receive, name="param-loader", daemon=True)
        self._rx.start()

    def _receive(self):
        while True:
            try:
                got = self.chan.recv(timeout=0.2)
            except (ChannelClosed, OSError):
                self._acks.put(None)
                return
            if got is None:
                if self._closed and self.trainer_stats is not None:
                    return
                continue
            kind, payload = got
            if kind == MSG_PARAMS:
                self.pair.apply_params(ParamMsg.decode(payload))
            elif kind == MSG_CONTROL:
                ctl = json.loads(payload)
                if ctl["op"] == "stopped":
                    self.trainer_stats = ctl["stats"]
                    self._acks.put(ctl)
                    return
                self._acks.put(ctl)

    def _flush(self, t, barrier=False):
        msg = ExperienceMsg(t, tuple(self._outbox))
        self._outbox.clear()
        self.chan.send(MSG_EXPERIENCE, msg.encode())
        if barrier:
            self.chan.send(MSG_CONTROL, control("clock", tti=t, barrier=True))
            while True:
                ack = self._acks.get(timeout=120)
                if ack is None:
                    raise ChannelClosed("trainer connection lost")
                if ack.get("op") == "ack" and ack["tti"] == t:
                    break

    # -- agent contract ---------------------------------------------------

    def on_cqi(self, report):
        self.prev_c, self.c = self.c, report.value

    def on_feedback(self, ev):
        self.last_ack, self.last_mcs = ev.ack, ev.mcs
        self.obs.record_feedback(ev)
        self.pending.push(ev)

    def tick(self, t):
        cfg = self.cfg
        self.window = self.hist.push(build_frame(self.c, self.last_ack, self.last_mcs, self.prev_c))
        self.obs.record_state(t, self.window)
        new = []
        for ev in self.pending.ready(t):
            t0 = ev.origin_tti - cfg.d_tx
            if t0 < 0:
                continue
            new.append(align_experience(self.obs, t0, cfg.d_tx, ev.tti_delivered - ev.origin_tti,
                                        cfg.n_rb))
        self.experiences += len(new)
        hp = self.hp
        control_tick = t % hp.train_interval == 0 or t % hp.update_interval == 0
        if self.mode == "lockstep":
            self.trainer.ingest(new)
            for msg in self.trainer.advance_to(t):
                self.pair.apply_params(msg, t)
        else:
            self._outbox.extend(new)
            if self.mode == "two-role":
                if control_tick:
                    self._flush(t, barrier=True)
            elif control_tick or t % self.flush_every == 0:
                self._flush(t)

    def decide(self, t):
        eps = epsilon_at(t, self.hp)
        explore = self.rng.random() < eps
        self.last_fallback = False
        if self.mode == "lockstep":
            if explore:
                a = int(self.rng.integers(N_MCS))
            else:
                a = greedy(self.pair.infer(self.window))
        else:
            a, _, fb = request_decision(self.server, self.window, self.deadline_s,
                                        self.last_decision, self.stats, self.audit, t)
            self.last_fallback = fb
            if explore and not fb:
                a = int(self.rng.integers(N_MCS))
        self.last_decision = a
        return a

    def close(self):
        if self._closed:
            return
        self._closed = True
        if self.mode == "lockstep":
            self.trainer_stats = self.trainer.stats()
            return
        self.server.close()
        try:
            self.chan.send(MSG_CONTROL, control("stop"))
            deadline = time.monotonic() + 120
            while self.trainer_stats is None and time.monotonic() < deadline:
                try:
                    if self._acks.get(timeout=1.0) is None:
                        break
                except queue.Empty:
                    pass
        except (ChannelClosed, OSError, BrokenPipeError):
            pass
        if self._proc is not None:
            self._proc.join(timeout=10)
            if self._proc.is_alive():
                self._proc.terminate()
        if self._thread is not None:
            self._thread.join(timeout=10)
        self.chan.close()

    def summary(self) -> dict:
        out = {"experiences": self.experiences, "decision_version": self.pair.version,
               "swaps": self.pair.swaps, "param_drops": self.pair.dropped}
        if self.mode == "realtime":
            out["deadline"] = self.stats.summary()
        if self.trainer_stats is not None:
            out["trainer"] = {k: v for k, v in self.trainer_stats.items() if k != "delay_samples"}
        return out


def run_paced(sim, tti_s: float = 1e-3):
    """Step ``sim`` against the wall clock, one TTI every ``tti_s`` seconds."""
    start = time.perf_counter()
    for t in range(sim.t, sim.cfg.tti_count):
        target = start + t * tti_s
        delay = target - time.perf_counter()
        if delay > 2e-4:
            time.sleep(delay - 1e-4)
        while time.perf_counter() < target:
            pass
        sim.step(t)
    close = getattr(sim.agent, "close", None)
    if close is not None:
        close()
    return sim.log
