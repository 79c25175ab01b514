"""Deep Q-learning pieces for link adaptation: features, reward, delayed
experience alignment, replay memory, epsilon-greedy selection and the TD step.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .channel import MAX_CQI, MAX_MCS, N_MCS
from .qnet import Adam, NumericError, QNetParams, backprop, forward_cache, q_forward, q_values
from .sim import FeedbackEvent

N_FEATURES = 4


def reward(tb_bits: int, rtx: int, rb: int, ack: int) -> float:
    """Per-RB reward of one feedback: TB bits shared by its transmissions on
    ACK, ``-rtx / rb`` on NACK."""
    if rtx < 1:
        raise ValueError("rtx must be >= 1")
    if rb < 1:
        raise ValueError("rb must be >= 1")
    if ack:
        return tb_bits / (rtx * rb)
    return -rtx / rb


def build_frame(c: int, ack: int, m: int, prev_c: int) -> np.ndarray:
    """Normalized feature frame ``[cqi, ack, mcs, cqi delta]``."""
    return np.array([c / MAX_CQI, float(ack), m / MAX_MCS, (c - prev_c) / MAX_CQI])


class FeatureHistory:
    """Fixed-length window of the last ``history + 1`` frames, newest first.

    Slots not yet observed are zero frames.
    """

    def __init__(self, history: int = 20):
        if history < 0:
            raise ValueError("history must be >= 0")
        self.window = np.zeros((history + 1, N_FEATURES))

    def push(self, frame: np.ndarray) -> np.ndarray:
        w = np.empty_like(self.window)
        w[0] = frame
        w[1:] = self.window[:-1]
        self.window = w
        return w


@dataclass(frozen=True)
class Experience:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    t: int  # TTI of s


class AlignmentError(LookupError):
    """An observation needed to assemble an experience is missing."""


class ObservationLog:
    """Per-TTI states, transmitted actions (by TX TTI) and feedback (by delivery TTI)."""

    def __init__(self, horizon: int = 256):
        self.horizon = horizon
        self.states: dict[int, np.ndarray] = {}
        self.actions: dict[int, int] = {}
        self.feedback: dict[int, FeedbackEvent] = {}

    def record_state(self, t: int, s: np.ndarray) -> None:
        self.states[t] = s
        old = t - self.horizon
        if old in self.states:
            del self.states[old]
            self.actions.pop(old, None)
            self.feedback.pop(old, None)

    def record_feedback(self, ev: FeedbackEvent) -> None:
        self.actions[ev.origin_tti] = ev.mcs
        self.feedback[ev.tti_delivered] = ev


def align_experience(log: ObservationLog, t: int, d_tx: int, d_ack: int, rb: int) -> Experience:
    """Assemble ``[s_t, a_{t+d_tx}, r_{t+d_tx+d_ack}, s_{t+d_tx+d_ack}]``."""
    t_tx, t_fb = t + d_tx, t + d_tx + d_ack
    try:
        s = log.states[t]
        a = log.actions[t_tx]
        ev = log.feedback[t_fb]
        s_next = log.states[t_fb]
    except KeyError as exc:
        raise AlignmentError(f"no observation for TTI {exc.args[0]} aligning TTI {t}") from None
    if ev.origin_tti != t_tx or ev.mcs != a:
        raise AlignmentError(f"feedback at TTI {t_fb} belongs to TTI {ev.origin_tti}, not {t_tx}")
    return Experience(s, a, reward(ev.tb_bits, ev.rtx_count, rb, ev.ack), s_next, t)


class ReplayBuffer:
    """Ring buffer of experiences with uniform sampling without replacement."""

    def __init__(self, capacity: int = 4096, window_shape=(21, N_FEATURES)):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, *window_shape))
        self.s_next = np.zeros((capacity, *window_shape))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.t = np.zeros(capacity, dtype=np.int64)
        self.pos = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, e: Experience) -> None:
        i = self.pos
        self.s[i] = e.s
        self.s_next[i] = e.s_next
        self.a[i] = e.a
        self.r[i] = e.r
        self.t[i] = e.t
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n > self.size:
            raise ValueError(f"cannot sample {n} from {self.size} experiences")
        return rng.choice(self.size, n, replace=False)

    def sample(self, n: int, rng: np.random.Generator):
        """Return ``(s, a, r, s_next)`` arrays for ``n`` distinct experiences."""
        idx = self.sample_indices(n, rng)
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx]

    def windows(self) -> np.ndarray:
        return self.s[:self.size]


@dataclass
class Hyperparams:
    gamma: float = 0.9
    lr: float = 1e-3
    batch_size: int = 64
    train_interval: int = 50
    update_interval: int | None = None  # None -> 10 * train_interval
    history: int = 20
    hidden: int = 64
    buffer_capacity: int = 4096
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay_ttis: int = 10_000
    # TD targets use reward / reward_norm; None -> largest possible ACK reward
    reward_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.batch_size < 1 or self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size must be in [1, buffer_capacity]")
        if self.train_interval < 1:
            raise ValueError("train_interval must be >= 1")
        if self.update_interval is None:
            self.update_interval = 10 * self.train_interval
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.eps_end <= 1 and 0 <= self.eps_start <= 1):
            raise ValueError("epsilon bounds must lie in [0, 1]")
        if self.eps_decay_ttis < 0:
            raise ValueError("eps_decay_ttis must be >= 0")
        if self.reward_norm is not None and self.reward_norm <= 0:
            raise ValueError("reward_norm must be > 0")


def epsilon_at(t: int, hp: Hyperparams) -> float:
    """Linear annealing from ``eps_start`` to ``eps_end`` over ``eps_decay_ttis``."""
    if hp.eps_decay_ttis == 0 or t >= hp.eps_decay_ttis:
        return hp.eps_end
    return hp.eps_start + (hp.eps_end - hp.eps_start) * t / hp.eps_decay_ttis


def greedy(q: np.ndarray) -> int:
    return int(np.argmax(q))  # first maximum -> lowest index on ties


def select_action(params: QNetParams, s: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy MCS from the decision network."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(N_MCS))
    return greedy(q_forward(params, s))


def td_targets(target: QNetParams, r: np.ndarray, s_next: np.ndarray, hp: Hyperparams) -> np.ndarray:
    norm = hp.reward_norm or 1.0
    return np.asarray(r) / norm + hp.gamma * q_values(target, s_next).max(axis=1)


def td_loss_and_grad(main: QNetParams, target: QNetParams, batch, hp: Hyperparams):
    """Mean squared TD error of ``main`` on ``batch`` and its gradient."""
    s, a, r, s_next = batch
    a = np.asarray(a)
    n = len(a)
    y = td_targets(target, r, s_next, hp)
    q, cache = forward_cache(main, s)
    err = y - q[np.arange(n), a]
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise NumericError("non-finite TD loss")
    dq = np.zeros_like(q)
    dq[np.arange(n), a] = -2.0 * err / n
    return loss, backprop(main, cache, dq)


def train_step(main: QNetParams, target: QNetParams, batch, hp: Hyperparams, opt: Adam):
    """One TD(0) update of ``main`` against a frozen ``target``.

    ``batch`` is ``(s, a, r, s_next)``. Returns the updated parameters and the
    mean squared TD error measured before the update.
    """
    loss, grads = td_loss_and_grad(main, target, batch, hp)
    new = opt.step(main, grads)
    if not new.all_finite():
        raise NumericError("non-finite parameters after update")
    return new, loss


def sync(src: QNetParams, dst: QNetParams) -> None:
    """Overwrite ``dst`` with an exact copy of ``src``."""
    if not src.same_shapes(dst) or list(src.arrays) != list(dst.arrays):
        raise ValueError("parameter shapes differ")
    for k, v in src.arrays.items():
        dst.arrays[k][...] = v
    dst.__dict__.pop("_prep", None)


class PendingFeedback:
    """Feedback events waiting until the state at their delivery TTI exists."""

    def __init__(self):
        self.q: deque[FeedbackEvent] = deque()

    def push(self, ev: FeedbackEvent):
        self.q.append(ev)

    def ready(self, t: int):
        q = self.q
        while q and q[0].tti_delivered <= t:
            yield q.popleft()
