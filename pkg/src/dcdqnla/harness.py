"""Experiment configuration, single runs, parameter sweeps and run summaries."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import BayesAgent, FixedAgent, IllaAgent, OllaAgent, OracleAgent, OLLA_STEP_RULES
from .channel import TRACE_KINDS, LinkTables, SnrTrace, TraceParams, generate_trace
from .dqn import Hyperparams
from .runtime import MODES, AuditLog, DcDqnAgent, run_paced
from .sim import AuditTrail, MetricsLog, SimConfig, Simulator

log = logging.getLogger(__name__)

AGENT_NAMES = ("illa", "olla", "bayes", "dcdqn", "oracle", "fixed:<m>")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


@dataclass
class OllaConfig:
    delta_up: float = 0.001
    target_bler: float = 0.1
    first_tx_only: bool = False
    step_rule: str = "balanced"


@dataclass
class BayesConfig:
    alpha0: float = 1.0
    beta0: float = 1.0


@dataclass
class RuntimeConfig:
    mode: str = "lockstep"
    deadline_ms: float = 0.5
    trainer_in: str = "process"
    transport: str = "pipe"
    track_delay: bool = False
    train_hook_ms: float = 0.0
    training: bool = True


@dataclass
class ExperimentSection:
    scenario: str = "mobile"
    agent: str = "dcdqn"
    seed: int = 0
    trace_seed: int | None = None  # None -> seed
    out_dir: str = "runs"
    name: str = ""


@dataclass
class SweepConfig:
    param: str = ""
    values: str = ""


@dataclass
class TablesConfig:
    cqi_snr_base: float = -6.7
    cqi_snr_step: float = 1.9
    mcs_thr: str = ""  # comma-separated; empty -> defaults
    mcs_eff: str = ""
    re_per_rb: int = 150
    bler_steepness: float = 2.0

    def build(self) -> LinkTables:
        kw = dict(cqi_snr_base=self.cqi_snr_base, cqi_snr_step=self.cqi_snr_step,
                  re_per_rb=self.re_per_rb, bler_steepness=self.bler_steepness)
        if self.mcs_thr:
            kw["mcs_thr"] = tuple(float(x) for x in self.mcs_thr.split(","))
        if self.mcs_eff:
            kw["mcs_eff"] = tuple(float(x) for x in self.mcs_eff.split(","))
        return LinkTables(**kw)


@dataclass
class SimSection:
    d_tx: int = 4
    d_ack: int = 8
    d_cqi: int = 4
    cqi_period: int = 40
    d_decision: int = 0
    max_tx: int = 4
    n_rb: int = 50
    tti_count: int = 100_000
    window: int = 2000


@dataclass
class DqnSection:
    gamma: float = 0.9
    lr: float = 1e-3
    batch_size: int = 64
    train_interval: int = 50
    update_interval: int | None = None
    history: int = 20
    hidden: int = 64
    buffer_capacity: int = 4096
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay_ttis: int = 10_000
    reward_norm: float | None = None


SECTIONS = {
    "experiment": ExperimentSection,
    "sim": SimSection,
    "tables": TablesConfig,
    "trace": TraceParams,
    "dqn": DqnSection,
    "olla": OllaConfig,
    "bayes": BayesConfig,
    "runtime": RuntimeConfig,
    "sweep": SweepConfig,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    sim: SimSection = field(default_factory=SimSection)
    tables: TablesConfig = field(default_factory=TablesConfig)
    trace: TraceParams = field(default_factory=TraceParams)
    dqn: DqnSection = field(default_factory=DqnSection)
    olla: OllaConfig = field(default_factory=OllaConfig)
    bayes: BayesConfig = field(default_factory=BayesConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    # -- building blocks ---------------------------------------------------

    def sim_config(self) -> SimConfig:
        return SimConfig(**dataclasses.asdict(self.sim), seed=self.experiment.seed,
                         tables=self.tables.build())

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(**dataclasses.asdict(self.dqn), seed=self.experiment.seed)

    @property
    def trace_seed(self) -> int:
        e = self.experiment
        return e.seed if e.trace_seed is None else e.trace_seed

    # -- (de)serialization -----------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)

    def set(self, dotted: str, raw: str) -> None:
        section, key = resolve_key(dotted)
        sec = getattr(self, section)
        hint = typing.get_type_hints(type(sec))[key]
        setattr(sec, key, _coerce(raw, hint, f"{section}.{key}"))

    def validate(self) -> "ExperimentConfig":
        """Check every section; raises ConfigError naming the field."""
        e = self.experiment
        if e.scenario not in TRACE_KINDS and not Path(e.scenario).is_file():
            raise ConfigError("experiment.scenario",
                              f"{e.scenario!r} is neither one of {TRACE_KINDS} nor an existing trace file")
        parse_agent(e.agent)
        if self.olla.step_rule not in OLLA_STEP_RULES:
            raise ConfigError("olla.step_rule", f"must be one of {OLLA_STEP_RULES}")
        rt = self.runtime
        if rt.mode not in MODES:
            raise ConfigError("runtime.mode", f"must be one of {MODES}")
        if rt.trainer_in not in ("thread", "process"):
            raise ConfigError("runtime.trainer_in", "must be 'thread' or 'process'")
        if rt.transport not in ("pipe", "tcp", "queue"):
            raise ConfigError("runtime.transport", "must be 'pipe', 'tcp' or 'queue'")
        if rt.deadline_ms <= 0:
            raise ConfigError("runtime.deadline_ms", "must be > 0")
        for name, build in (("sim", self.sim_config), ("tables", self.tables.build),
                            ("dqn", self.hyperparams)):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(_field_path(name, str(exc)), str(exc)) from None
        try:
            TraceParams(**dataclasses.asdict(self.trace))
        except ValueError as exc:
            raise ConfigError(_field_path("trace", str(exc)), str(exc)) from None
        if self.sweep.param:
            resolve_key(self.sweep.param)
        return self


def _field_path(section: str, msg: str) -> str:
    word = msg.split(" ", 1)[0]
    names = {f.name for f in dataclasses.fields(SECTIONS[section])}
    return f"{section}.{word}" if word in names else section


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(raw: str, hint, path: str):
    raw = raw.strip()
    args = typing.get_args(hint)
    if type(None) in args:
        if raw == "" or raw.lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(path, f"cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def resolve_key(name: str) -> tuple[str, str]:
    """Map ``section.key`` (or an unambiguous bare ``key``) to its section and key."""
    if "." in name:
        section, key = name.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(name, f"unknown section {section!r}")
        if key not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
            raise ConfigError(name, f"unknown key {key!r} in section [{section}]")
        return section, key
    hits = [s for s, cls in SECTIONS.items() if name in {f.name for f in dataclasses.fields(cls)}]
    if len(hits) != 1:
        raise ConfigError(name, "unknown key" if not hits else f"ambiguous key; found in {hits}")
    return hits[0], name


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read an INI file (optional) and apply ``section.key=value`` overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        cp = configparser.ConfigParser()
        cp.read(path)
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(section, "unknown section")
            for key, raw in cp[section].items():
                cfg.set(f"{section}.{key}", raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    return cfg.validate()


def parse_agent(name: str) -> tuple[str, int | None]:
    if name.startswith("fixed:"):
        try:
            m = int(name.split(":", 1)[1])
        except ValueError:
            raise ConfigError("experiment.agent", f"bad fixed MCS in {name!r}") from None
        if not 0 <= m <= 27:
            raise ConfigError("experiment.agent", f"fixed MCS {m} outside [0, 27]")
        return "fixed", m
    if name not in ("illa", "olla", "bayes", "dcdqn", "oracle"):
        raise ConfigError("experiment.agent", f"unknown agent {name!r}; expected one of {AGENT_NAMES}")
    return name, None


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


def build_trace(cfg: ExperimentConfig) -> SnrTrace:
    scen = cfg.experiment.scenario
    n = cfg.sim.tti_count
    if scen in TRACE_KINDS:
        return generate_trace(scen, n, cfg.trace_seed, cfg.trace)
    return SnrTrace.from_csv(scen)


def build_agent(cfg: ExperimentConfig, trace: SnrTrace, sim_cfg: SimConfig, audit: AuditLog | None):
    kind, m = parse_agent(cfg.experiment.agent)
    tables = sim_cfg.tables
    if kind == "fixed":
        return FixedAgent(m)
    if kind == "oracle":
        return OracleAgent(trace.samples[:sim_cfg.tti_count], sim_cfg)
    if kind == "illa":
        return IllaAgent(tables)
    if kind == "olla":
        o = cfg.olla
        return OllaAgent(tables, o.delta_up, o.target_bler, o.first_tx_only, o.step_rule)
    if kind == "bayes":
        return BayesAgent(sim_cfg.n_rb, tables, cfg.experiment.seed, cfg.bayes.alpha0, cfg.bayes.beta0)
    rt = cfg.runtime
    return DcDqnAgent(sim_cfg, cfg.hyperparams(), mode=rt.mode, deadline_s=rt.deadline_ms / 1000,
                      audit=audit, track_delay=rt.track_delay, train_hook_s=rt.train_hook_ms / 1000,
                      training=rt.training, trainer_in=rt.trainer_in, transport=rt.transport)


def convergence_tti(win: np.ndarray, hold: int = 10_000, tol: float = 0.05,
                    start: int = 0) -> int | None:
    """First TTI from which windowed throughput stays within ``tol`` of its final
    (last-quartile mean) level for at least ``hold`` TTIs."""
    n = len(win)
    if n == 0 or hold > n - start:
        return None
    final = float(np.mean(win[3 * n // 4:]))
    bad = np.abs(win - final) > tol * abs(final)
    bad[:start] = True
    c = np.concatenate([[0], np.cumsum(bad)])
    ok = c[hold:] - c[:-hold] == 0  # ok[t] <=> no violation in [t, t + hold)
    idx = np.flatnonzero(ok)
    return int(idx[0]) if len(idx) else None


def summarize(mlog: MetricsLog, window: int) -> dict:
    """Summary statistics, all derivable from the metrics CSV."""
    n = len(mlog)
    win = mlog.windowed_throughput(window)
    q = 3 * n // 4
    return {
        "ttis": n,
        "throughput_mbps": mlog.throughput_mbps(),
        "last_quartile_throughput_mbps": mlog.throughput_mbps(q),
        "bler": mlog.bler(),
        "last_quartile_bler": mlog.bler(q),
        "fallback_rate": float(np.mean(mlog.fallback)) if n else 0.0,
        "convergence_tti": convergence_tti(win, start=min(window - 1, n)),
        "feedbacks": mlog.feedback_count,
        "dropped_tbs": mlog.dropped,
    }


@dataclass
class RunResult:
    run_dir: Path | None
    summary: dict
    log: MetricsLog
    agent: object = None
    audit: AuditLog | None = None


def _run_dir(root: Path, label: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{label}"
    d, i = base, 1
    while d.exists():
        i += 1
        d = Path(f"{base}-{i}")
    d.mkdir(parents=True)
    return d


def run_experiment(cfg: ExperimentConfig, out_root=None, trace: SnrTrace | None = None,
                   write: bool = True) -> RunResult:
    """Build trace, agent and runtime from ``cfg``, run, and write the artifacts.

    Artifacts (under a timestamped directory): ``config.ini`` (resolved
    configuration), ``metrics.csv``, ``summary.json`` and ``audit.jsonl``.
    """
    cfg.validate()
    sim_cfg = cfg.sim_config()
    trace = trace if trace is not None else build_trace(cfg)
    run_dir = None
    audit_path = None
    if write:
        root = Path(out_root if out_root is not None else cfg.experiment.out_dir)
        label = cfg.experiment.name or cfg.experiment.agent.replace(":", "")
        run_dir = _run_dir(root, label)
        (run_dir / "config.ini").write_text(cfg.to_ini())
        audit_path = run_dir / "audit.jsonl"
    audit = AuditLog(audit_path)
    agent = build_agent(cfg, trace, sim_cfg, audit)
    sim = Simulator(trace, agent, sim_cfg)
    t0 = time.perf_counter()
    try:
        if cfg.runtime.mode == "realtime" and isinstance(agent, DcDqnAgent):
            mlog = run_paced(sim)
        else:
            mlog = sim.run()
    except Exception as exc:
        getattr(agent, "close", lambda: None)()
        audit.close()
        raise RuntimeError(f"run failed at TTI {sim.t}: {exc}") from exc
    wall = time.perf_counter() - t0
    summary = summarize(mlog, sim_cfg.window)
    summary.update(agent=cfg.experiment.agent, scenario=cfg.experiment.scenario,
                   seed=cfg.experiment.seed, wall_time_s=round(wall, 3))
    if isinstance(agent, DcDqnAgent):
        summary["dcdqn"] = agent.summary()
        ts = agent.trainer_stats or {}
        if ts.get("delay_metric_mean") is not None:
            summary["delay_metric"] = {
                "mean": ts["delay_metric_mean"],
                "max_at_sync": ts["delay_metric_at_sync_max"],
                "note": "empirical max over a frozen probe set; lower bound of the true supremum",
            }
    if write:
        mlog.to_csv(run_dir / "metrics.csv")
        (run_dir / "summary.json").write_text(json.dumps(_deterministic(summary), indent=2,
                                                         sort_keys=True) + "\n")
    audit.close()
    return RunResult(run_dir, summary, mlog, agent, audit)


def _deterministic(summary: dict) -> dict:
    # wall-clock quantities vary run to run; keep them out of summary.json
    return {k: v for k, v in summary.items() if k != "wall_time_s"}


SWEEP_COLUMNS = ["param", "value", "status", "throughput_mbps", "last_quartile_throughput_mbps",
                 "bler", "last_quartile_bler", "fallback_rate", "convergence_tti",
                 "delay_metric_mean", "run_dir", "error"]


def run_sweep(cfg: ExperimentConfig, param: str | None = None, values=None, out_root=None,
              write: bool = True) -> list[dict]:
    """Run ``cfg`` once per value of ``param`` on a common trace.

    Failures are recorded per value and do not stop the sweep. Writes
    ``sweep.csv`` under a timestamped directory when ``write`` is set.
    """
    param = param or cfg.sweep.param
    if values is None:
        values = [v for v in cfg.sweep.values.split(",") if v.strip()]
    if not param or not values:
        raise ConfigError("sweep", "a parameter name and at least one value are required")
    section, key = resolve_key(param)
    values = [str(v).strip() for v in values]
    for v in values:  # reject bad values before running anything
        _clone(cfg).set(f"{section}.{key}", v)
    common = None if section in ("trace", "experiment") else build_trace(cfg)
    sweep_dir = None
    if write:
        root = Path(out_root if out_root is not None else cfg.experiment.out_dir)
        sweep_dir = _run_dir(root, f"sweep-{section}.{key}")
        (sweep_dir / "config.ini").write_text(cfg.to_ini())
    rows = []
    for v in values:
        row = {"param": f"{section}.{key}", "value": v}
        try:
            point = _clone(cfg)
            point.set(f"{section}.{key}", v)
            point.experiment.name = f"{key}={v}"
            res = run_experiment(point, sweep_dir, common, write)
            s = res.summary
            row.update(status="ok", run_dir=str(res.run_dir or ""), error="",
                       delay_metric_mean=(s.get("delay_metric") or {}).get("mean"),
                       **{k: s[k] for k in SWEEP_COLUMNS if k in s})
        except Exception as exc:  # isolate per-value failures
            log.exception("sweep value %s=%s failed", param, v)
            row.update(status="error", error=str(exc))
        rows.append(row)
    if write:
        with open(sweep_dir / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, SWEEP_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in SWEEP_COLUMNS})
    return rows


def _clone(cfg: ExperimentConfig) -> ExperimentConfig:
    return ExperimentConfig(**{name: dataclasses.replace(getattr(cfg, name)) for name in SECTIONS})
