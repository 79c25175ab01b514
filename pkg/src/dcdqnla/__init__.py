"""Trace-driven TTI-level link adaptation simulator with a decoupled DQN agent."""

from .agents import BayesAgent, FixedAgent, IllaAgent, LinkAdapter, OllaAgent, OracleAgent
from .channel import DEFAULT_TABLES, LinkTables, SnrTrace, TraceParams, generate_trace
from .dqn import Hyperparams
from .harness import ExperimentConfig, load_config, run_experiment, run_sweep
from .runtime import DcDqnAgent
from .sim import MetricsLog, SimConfig, Simulator, run

__all__ = [
    "BayesAgent", "DcDqnAgent", "DEFAULT_TABLES", "ExperimentConfig", "FixedAgent",
    "Hyperparams", "IllaAgent", "LinkAdapter", "LinkTables", "MetricsLog", "OllaAgent",
    "OracleAgent", "SimConfig", "Simulator", "SnrTrace", "TraceParams", "generate_trace",
    "load_config", "run", "run_experiment", "run_sweep",
]
__version__ = "0.1.0"
