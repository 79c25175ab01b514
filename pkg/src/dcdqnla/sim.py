"""TTI-granular downlink simulator with delayed CQI/ACK feedback and HARQ.

One transport block is sent per TTI (single UE, full buffer). Each TTI runs:

1. deliver ACK/NACK feedback due now; NACKed blocks join the retransmission
   queue unless they already used ``max_tx`` transmissions (then dropped);
2. deliver the CQI report measured ``d_cqi`` TTIs ago;
3. let the agent observe (``tick``) and, if its decision pipeline is idle,
   request a new MCS decision that takes effect ``d_decision + d_tx`` later;
4. transmit: a queued retransmission (same MCS) preempts a new block;
5. draw the decode outcome from the BLER curve at the chase-combined SNR;
6. schedule the feedback ``d_ack`` TTIs later and log metrics.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .channel import DEFAULT_TABLES, MAX_MCS, LinkTables, SnrTrace, snr_to_cqi, tbs

TTI_MS = 1.0


@dataclass
class SimConfig:
    d_tx: int = 4
    d_ack: int = 8
    d_cqi: int = 4
    cqi_period: int = 40
    d_decision: int = 0
    max_tx: int = 4
    n_rb: int = 50
    tti_count: int = 100_000
    window: int = 2000
    seed: int = 0
    tables: LinkTables = field(default_factory=LinkTables)

    def __post_init__(self):
        for name in ("d_tx", "d_ack", "d_cqi", "d_decision"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_tx < 1:
            raise ValueError("max_tx must be >= 1")
        if self.cqi_period < 1:
            raise ValueError("cqi_period must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.n_rb < 1:
            raise ValueError("n_rb must be >= 1")
        if self.tti_count < 1:
            raise ValueError("tti_count must be >= 1")


@dataclass(slots=True)
class HarqProcess:
    tb_bits: int
    mcs: int
    n_tx: int
    first_tx_tti: int
    feedback_due: int
    ground_snr_at_tx: float
    decision_tti: int
    tx_tti: int = 0
    ack: int = 0


@dataclass(frozen=True, slots=True)
class FeedbackEvent:
    tti_delivered: int
    ack: int
    mcs: int
    tb_bits: int
    rtx_count: int  # transmission count of the block, 1 for a first transmission
    origin_tti: int
    first_tx_tti: int
    decision_tti: int
    dropped: bool = False


@dataclass(frozen=True, slots=True)
class CqiReport:
    value: int
    measured_tti: int
    tti_delivered: int


class MetricsLog:
    """Per-TTI metrics, indexed by transmission TTI.

    ``ack`` and ``delivered_bits`` of row ``t`` describe the outcome of the
    block sent at ``t``; they stay unset (``ack == -1``) until its feedback
    has been delivered.
    """

    CSV_HEADER = ["tti", "mcs", "cqi", "ack", "tb_bits", "delivered_bits",
                  "win_tput_mbps", "cum_bler", "fallback"]

    def __init__(self, n: int, window: int = 2000):
        self.window = window
        self.mcs = np.zeros(n, dtype=np.int64)
        self.cqi = np.full(n, -1, dtype=np.int64)
        self.ack = np.full(n, -1, dtype=np.int64)
        self.tb_bits = np.zeros(n, dtype=np.int64)
        self.delivered_bits = np.zeros(n, dtype=np.int64)
        self.n_tx = np.zeros(n, dtype=np.int64)
        self.fallback = np.zeros(n, dtype=np.int64)
        self.snr = np.zeros(n)
        self.dropped = 0

    def __len__(self):
        return len(self.mcs)

    @property
    def feedback_count(self) -> int:
        return int(np.count_nonzero(self.ack >= 0))

    @property
    def nack_count(self) -> int:
        return int(np.count_nonzero(self.ack == 0))

    def bler(self, start: int = 0, stop: int | None = None) -> float:
        a = self.ack[start:stop]
        n = np.count_nonzero(a >= 0)
        return float(np.count_nonzero(a == 0) / n) if n else 0.0

    def cumulative_bler(self) -> np.ndarray:
        fb = np.cumsum(self.ack >= 0)
        nk = np.cumsum(self.ack == 0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(fb > 0, nk / np.maximum(fb, 1), np.nan)

    def throughput_mbps(self, start: int = 0, stop: int | None = None) -> float:
        d = self.delivered_bits[start:stop]
        return float(d.sum() / (len(d) * TTI_MS) / 1000.0) if len(d) else 0.0

    def windowed_throughput(self, window: int | None = None) -> np.ndarray:
        return windowed_throughput(self, window or self.window)

    def to_csv(self, path):
        win = self.windowed_throughput()
        cb = self.cumulative_bler()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_HEADER)
            for t in range(len(self)):
                has_fb = self.ack[t] >= 0
                w.writerow([
                    t,
                    int(self.mcs[t]),
                    int(self.cqi[t]) if self.cqi[t] >= 0 else "",
                    int(self.ack[t]) if has_fb else "",
                    int(self.tb_bits[t]),
                    int(self.delivered_bits[t]) if has_fb else "",
                    f"{win[t]:.6f}",
                    f"{cb[t]:.6f}" if not np.isnan(cb[t]) else "",
                    int(self.fallback[t]),
                ])


def windowed_throughput(log: MetricsLog, window: int) -> np.ndarray:
    """Short-term throughput (Mbps): ACKed bits in ``(t - window, t]`` over the window."""
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.concatenate([[0], np.cumsum(log.delivered_bits)])
    idx = np.arange(len(log))
    lo = np.maximum(idx + 1 - window, 0)
    return (c[idx + 1] - c[lo]) / (window * TTI_MS) / 1000.0


class AuditTrail:
    """In-memory event record of feedback and CQI deliveries, used by audits."""

    def __init__(self):
        self.feedback: list[FeedbackEvent] = []
        self.tx: list[tuple[int, int, int, int]] = []  # (tti, mcs, n_tx, first_tx_tti)
        self.cqi: list[CqiReport] = []
        self.decisions: list[tuple[int, int, int]] = []  # (decision_tti, effective_tti, mcs)
        self.max_in_flight = 0


class Simulator:
    """Discrete-event engine driving one agent over one SNR trace."""

    def __init__(self, trace: SnrTrace, agent, cfg: SimConfig, audit: AuditTrail | None = None):
        if len(trace) < cfg.tti_count:
            raise ValueError(f"trace has {len(trace)} TTIs, config needs {cfg.tti_count}")
        self.trace = trace
        self.agent = agent
        self.cfg = cfg
        self.audit = audit
        n = cfg.tti_count
        tables = cfg.tables
        self._snr = np.asarray(trace.samples[:n], dtype=float)
        self._cqi_csum = np.concatenate([[0], np.cumsum(snr_to_cqi(self._snr, tables))])
        rng = np.random.default_rng(cfg.seed)
        self._u = rng.random(n)
        self._tbs = [int(x) for x in tbs(np.arange(MAX_MCS + 1), cfg.n_rb, tables)]
        self._thr = [float(x) for x in tables.thr]
        self._k = tables.bler_steepness
        self._combining = [0.0] + [10 * math.log10(i) for i in range(1, cfg.max_tx + 1)]

        self.log = MetricsLog(n, cfg.window)
        self.rtx_queue: deque[HarqProcess] = deque()
        self._in_flight: deque[HarqProcess] = deque()
        self._cqi_due: deque[CqiReport] = deque()
        self._decisions: deque[tuple[int, int, int, bool]] = deque()
        self._mcs = 0
        self._mcs_decision_tti = -1
        self._mcs_fallback = False
        self._next_request = 0
        self._reported_cqi = -1
        self.t = 0

    # -- feedback ---------------------------------------------------------

    def _deliver(self, proc: HarqProcess, t: int):
        cfg = self.cfg
        dropped = not proc.ack and proc.n_tx >= cfg.max_tx
        ev = FeedbackEvent(t, proc.ack, proc.mcs, proc.tb_bits, proc.n_tx, proc.tx_tti,
                           proc.first_tx_tti, proc.decision_tti, dropped)
        log = self.log
        log.ack[proc.tx_tti] = proc.ack
        log.delivered_bits[proc.tx_tti] = proc.tb_bits if proc.ack else 0
        if not proc.ack:
            if dropped:
                log.dropped += 1
            else:
                self.rtx_queue.append(proc)
        if self.audit is not None:
            self.audit.feedback.append(ev)
        self.agent.on_feedback(ev)

    def _measure_cqi(self, t: int) -> int:
        lo = max(0, t - self.cfg.cqi_period + 1)
        mean = (self._cqi_csum[t + 1] - self._cqi_csum[lo]) / (t + 1 - lo)
        return int(math.floor(mean + 0.5))

    # -- main loop --------------------------------------------------------

    def step(self, t: int):
        cfg = self.cfg
        agent = self.agent

        # (1) HARQ feedback
        fl = self._in_flight
        while fl and fl[0].feedback_due <= t:
            self._deliver(fl.popleft(), t)

        # (2) CQI measurement / delivery
        if t % cfg.cqi_period == 0:
            self._cqi_due.append(CqiReport(self._measure_cqi(t), t, t + cfg.d_cqi))
        cq = self._cqi_due
        while cq and cq[0].tti_delivered <= t:
            rep = cq.popleft()
            self._reported_cqi = rep.value
            if self.audit is not None:
                self.audit.cqi.append(rep)
            agent.on_cqi(rep)

        # (3) observation and decision pipeline
        agent.tick(t)
        if t >= self._next_request:
            m = int(agent.decide(t))
            if not 0 <= m <= MAX_MCS:
                raise ValueError(f"agent returned invalid MCS {m} at TTI {t}")
            eff = t + cfg.d_decision + cfg.d_tx
            self._decisions.append((eff, m, t, bool(getattr(agent, "last_fallback", False))))
            if self.audit is not None:
                self.audit.decisions.append((t, eff, m))
            self._next_request = t + max(cfg.d_decision, 1)
        dq = self._decisions
        while dq and dq[0][0] <= t:
            _, self._mcs, self._mcs_decision_tti, self._mcs_fallback = dq.popleft()

        # (4) transmission
        if self.rtx_queue:
            proc = self.rtx_queue.popleft()
            proc.n_tx += 1
            fallback = False
        else:
            proc = HarqProcess(self._tbs[self._mcs], self._mcs, 1, t, 0, 0.0, self._mcs_decision_tti)
            fallback = self._mcs_fallback
        snr = float(self._snr[t])
        proc.tx_tti = t
        proc.ground_snr_at_tx = snr
        proc.feedback_due = t + cfg.d_ack

        # (5) decode outcome
        x = self._k * (snr + self._combining[proc.n_tx] - self._thr[proc.mcs])
        p_err = 1.0 / (1.0 + math.exp(x)) if x > -700 else 1.0
        proc.ack = 1 if self._u[t] >= p_err else 0

        # (6) feedback schedule + metrics
        log = self.log
        log.mcs[t] = proc.mcs
        log.tb_bits[t] = proc.tb_bits
        log.n_tx[t] = proc.n_tx
        log.cqi[t] = self._reported_cqi
        log.fallback[t] = fallback
        log.snr[t] = snr
        if self.audit is not None:
            self.audit.tx.append((t, proc.mcs, proc.n_tx, proc.first_tx_tti))
        fl.append(proc)
        if self.audit is not None:
            self.audit.max_in_flight = max(self.audit.max_in_flight, len(fl))
        if cfg.d_ack == 0:
            self._deliver(fl.popleft(), t)
        self.t = t + 1
        return proc

    def run(self) -> MetricsLog:
        for t in range(self.t, self.cfg.tti_count):
            self.step(t)
        close = getattr(self.agent, "close", None)
        if close is not None:
            close()
        return self.log


def run(trace: SnrTrace, agent, cfg: SimConfig, audit: AuditTrail | None = None) -> MetricsLog:
    return Simulator(trace, agent, cfg, audit).run()
