"""Link adapters: the agent interface plus ILLA, OLLA, Bayesian, fixed and genie agents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import (DEFAULT_TABLES, MAX_MCS, N_CQI, N_MCS, LinkTables, bler, cqi_to_snr,
                      tbs)
from .sim import CqiReport, FeedbackEvent, SimConfig


class LinkAdapter:
    """Base agent. The simulator calls, per TTI: ``on_feedback`` / ``on_cqi``
    for every delivered observation, then ``tick(t)``, then ``decide(t)``
    whenever its decision pipeline is idle. A decision requested at ``t``
    takes effect at ``t + d_tx`` (plus any decision delay).
    """

    name = "base"
    last_fallback = False

    def on_cqi(self, report: CqiReport) -> None:
        pass

    def on_feedback(self, ev: FeedbackEvent) -> None:
        pass

    def tick(self, t: int) -> None:
        pass

    def decide(self, t: int) -> int:
        raise NotImplementedError

    def close(self) -> None:
        pass


class FixedAgent(LinkAdapter):
    name = "fixed"

    def __init__(self, mcs: int):
        if not 0 <= mcs <= MAX_MCS:
            raise ValueError(f"MCS out of range: {mcs}")
        self.mcs = mcs

    def decide(self, t):
        return self.mcs


class OracleAgent(LinkAdapter):
    """Genie that reads the ground-truth SNR of the TTI its decision lands on
    and maximizes expected first-transmission throughput."""

    name = "oracle"

    def __init__(self, snr: np.ndarray, cfg: SimConfig):
        snr = np.asarray(snr, dtype=float)
        tables = cfg.tables
        rate = tbs(np.arange(N_MCS), cfg.n_rb, tables)
        p_ok = 1.0 - bler(np.arange(N_MCS)[None, :], snr[:, None], tables)
        # argmax keeps the lowest index on ties
        self._best = np.argmax(p_ok * rate[None, :], axis=1)
        self._lead = cfg.d_tx + cfg.d_decision

    def decide(self, t):
        k = min(t + self._lead, len(self._best) - 1)
        return int(self._best[k])


# ---------------------------------------------------------------------------
# ILLA / OLLA
# ---------------------------------------------------------------------------


def _largest_below(thr: np.ndarray, snr: float) -> int:
    return max(int(np.searchsorted(thr, snr, side="right")) - 1, 0)


def illa_select(c: int, tables: LinkTables = DEFAULT_TABLES) -> int:
    """Highest MCS whose threshold does not exceed the CQI's SNR."""
    return _largest_below(tables.thr, cqi_to_snr(c, tables))


OLLA_STEP_RULES = ("ratio", "balanced")


@dataclass
class OllaState:
    """SNR offset controller.

    ``step_rule="ratio"`` uses ``delta_down = delta_up / (1/target - 1)``.
    Since ACKs raise the offset by the larger step, that rule settles where
    the NACK fraction is ``1 - target_bler``. ``"balanced"`` uses
    ``delta_up * (1/target - 1)``, whose fixed point is ``target_bler``.
    """

    offset: float = 0.0
    delta_up: float = 0.001
    target_bler: float = 0.1
    step_rule: str = "ratio"

    def __post_init__(self):
        if not 0.0 < self.target_bler < 1.0:
            raise ValueError("target_bler must be in (0, 1)")
        if self.delta_up <= 0:
            raise ValueError("delta_up must be > 0")
        if self.step_rule not in OLLA_STEP_RULES:
            raise ValueError(f"step_rule must be one of {OLLA_STEP_RULES}")

    @property
    def delta_down(self) -> float:
        if self.step_rule == "balanced":
            return self.delta_up * (1.0 / self.target_bler - 1.0)
        return self.delta_up / (1.0 / self.target_bler - 1.0)

    @property
    def equilibrium_bler(self) -> float:
        """NACK fraction at which the expected offset drift is zero."""
        return self.delta_up / (self.delta_up + self.delta_down)


def olla_update(state: OllaState, ack: int) -> OllaState:
    """Apply one ACK/NACK to the SNR offset (in place; returns the state)."""
    if ack:
        state.offset += state.delta_up
    else:
        state.offset -= state.delta_down
    return state


def olla_select(c: int, state: OllaState, tables: LinkTables = DEFAULT_TABLES) -> int:
    return _largest_below(tables.thr, cqi_to_snr(c, tables) + state.offset)


class IllaAgent(LinkAdapter):
    name = "illa"

    def __init__(self, tables: LinkTables = DEFAULT_TABLES):
        self.tables = tables
        self.cqi = 0

    def on_cqi(self, report):
        self.cqi = report.value

    def decide(self, t):
        return illa_select(self.cqi, self.tables)


class OllaAgent(LinkAdapter):
    name = "olla"

    def __init__(self, tables: LinkTables = DEFAULT_TABLES, delta_up: float = 0.001,
                 target_bler: float = 0.1, first_tx_only: bool = False,
                 step_rule: str = "balanced"):
        self.tables = tables
        self.state = OllaState(0.0, delta_up, target_bler, step_rule)
        self.first_tx_only = first_tx_only
        self.cqi = 0

    def on_cqi(self, report):
        self.cqi = report.value

    def on_feedback(self, ev):
        if self.first_tx_only and ev.rtx_count > 1:
            return
        olla_update(self.state, ev.ack)

    def decide(self, t):
        return olla_select(self.cqi, self.state, self.tables)


# ---------------------------------------------------------------------------
# Bayesian (Beta-Bernoulli Thompson sampling per CQI)
# ---------------------------------------------------------------------------


@dataclass
class BayesState:
    alpha: np.ndarray
    beta: np.ndarray
    alpha0: float = 1.0
    beta0: float = 1.0

    @classmethod
    def fresh(cls, alpha0: float = 1.0, beta0: float = 1.0) -> "BayesState":
        if alpha0 <= 0 or beta0 <= 0:
            raise ValueError("Beta prior parameters must be > 0")
        return cls(np.full((N_CQI, N_MCS), alpha0), np.full((N_CQI, N_MCS), beta0),
                   alpha0, beta0)


def bayes_update(state: BayesState, c_at_tx: int, m: int, ack: int, n_tx: int = 1) -> BayesState:
    """Count a first-transmission outcome; retransmission feedback is ignored."""
    if n_tx != 1:
        return state
    if ack:
        state.alpha[c_at_tx, m] += 1
    else:
        state.beta[c_at_tx, m] += 1
    return state


def bayes_select(c: int, state: BayesState, n_rb: int, rng: np.random.Generator,
                 tables: LinkTables = DEFAULT_TABLES, draw=None) -> int:
    """Thompson sample of success probabilities, maximized against TB size.

    ``draw(alpha, beta) -> probabilities`` replaces the Beta sampler in tests.
    """
    a, b = state.alpha[c], state.beta[c]
    p = draw(a, b) if draw is not None else rng.beta(a, b)
    score = np.asarray(p) * tbs(np.arange(N_MCS), n_rb, tables)
    return int(np.argmax(score))


class BayesAgent(LinkAdapter):
    name = "bayes"

    def __init__(self, n_rb: int, tables: LinkTables = DEFAULT_TABLES, seed: int = 0,
                 alpha0: float = 1.0, beta0: float = 1.0):
        self.n_rb = n_rb
        self.tables = tables
        self.rng = np.random.default_rng(seed)
        self.state = BayesState.fresh(alpha0, beta0)
        self.cqi = 0
        self._cqi_at_decision: dict[int, int] = {}

    def on_cqi(self, report):
        self.cqi = report.value

    def on_feedback(self, ev):
        c = self._cqi_at_decision.pop(ev.decision_tti, None) if ev.rtx_count == 1 else None
        if c is not None:
            bayes_update(self.state, c, ev.mcs, ev.ack, ev.rtx_count)

    def decide(self, t):
        self._cqi_at_decision[t] = self.cqi
        if len(self._cqi_at_decision) > 4096:
            # decisions superseded by retransmissions never get first-tx feedback
            for k in sorted(self._cqi_at_decision)[:2048]:
                del self._cqi_at_decision[k]
        return bayes_select(self.cqi, self.state, self.n_rb, self.rng, self.tables)
