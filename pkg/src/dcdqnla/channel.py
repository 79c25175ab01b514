"""Link-level abstraction: SNR/CQI/MCS tables, BLER curve, HARQ combining gain
and synthetic SNR trace generation.

All mapping functions accept scalars or numpy arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

N_MCS = 28
N_CQI = 16
MAX_CQI = N_CQI - 1
MAX_MCS = N_MCS - 1

TRACE_KINDS = ("static", "mobile", "mobile-to-static")

# Guards floor() against representation error at exact table boundaries.
_EPS = 1e-9


def _default_thr() -> tuple[float, ...]:
    return tuple(-6.5 + 1.0 * m for m in range(N_MCS))


def _default_eff() -> tuple[float, ...]:
    return tuple(float(x) for x in np.linspace(0.15, 5.55, N_MCS))


@dataclass(frozen=True)
class LinkTables:
    """SNR<->CQI<->MCS mapping tables.

    Parameters
    ----------
    cqi_snr_base : float
        SNR (dB) at which CQI 1 starts.
    cqi_snr_step : float
        Width (dB) of one CQI level.
    mcs_thr : tuple of float
        Per-MCS SNR threshold (dB); BLER is 0.5 exactly at the threshold.
    mcs_eff : tuple of float
        Per-MCS spectral efficiency in bits per resource element.
    re_per_rb : int
        Data resource elements per RB per TTI.
    bler_steepness : float
        Slope ``k`` (1/dB) of the logistic BLER waterfall.
    """

    cqi_snr_base: float = -6.7
    cqi_snr_step: float = 1.9
    mcs_thr: tuple = field(default_factory=_default_thr)
    mcs_eff: tuple = field(default_factory=_default_eff)
    re_per_rb: int = 150
    bler_steepness: float = 2.0

    def __post_init__(self):
        thr = np.asarray(self.mcs_thr, dtype=float)
        eff = np.asarray(self.mcs_eff, dtype=float)
        if thr.shape != (N_MCS,) or eff.shape != (N_MCS,):
            raise ValueError(f"mcs tables must have {N_MCS} entries")
        if np.any(np.diff(thr) <= 0):
            raise ValueError("mcs_thr must be strictly increasing")
        if np.any(np.diff(eff) <= 0) or eff[0] <= 0:
            raise ValueError("mcs_eff must be strictly increasing and positive")
        if self.bler_steepness <= 0:
            raise ValueError("bler_steepness must be > 0")
        if self.cqi_snr_step <= 0:
            raise ValueError("cqi_snr_step must be > 0")
        if self.re_per_rb < 1:
            raise ValueError("re_per_rb must be >= 1")
        # tuples keep the dataclass hashable; arrays are cached for lookups
        object.__setattr__(self, "mcs_thr", tuple(float(x) for x in thr))
        object.__setattr__(self, "mcs_eff", tuple(float(x) for x in eff))
        object.__setattr__(self, "_thr", thr)
        object.__setattr__(self, "_eff", eff)

    @property
    def thr(self) -> np.ndarray:
        return self._thr

    @property
    def eff(self) -> np.ndarray:
        return self._eff

    def scaled(self, factor: float) -> "LinkTables":
        """Return tables with every dB quantity multiplied by ``factor``."""
        return LinkTables(
            cqi_snr_base=self.cqi_snr_base * factor,
            cqi_snr_step=self.cqi_snr_step * factor,
            mcs_thr=tuple(x * factor for x in self.mcs_thr),
            mcs_eff=self.mcs_eff,
            re_per_rb=self.re_per_rb,
            bler_steepness=self.bler_steepness / factor,
        )


DEFAULT_TABLES = LinkTables()


def snr_to_cqi(snr, tables: LinkTables = DEFAULT_TABLES):
    """Quantize SNR (dB) to a CQI in [0, 15]."""
    snr = np.asarray(snr, dtype=float)
    c = np.floor((snr - tables.cqi_snr_base) / tables.cqi_snr_step + _EPS) + 1
    c = np.clip(c, 0, MAX_CQI).astype(np.int64)
    return int(c) if c.ndim == 0 else c


def cqi_to_snr(c, tables: LinkTables = DEFAULT_TABLES):
    """Representative SNR (dB) of a CQI; CQI 0 maps one step below CQI 1."""
    c = np.asarray(c)
    if np.any((c < 0) | (c > MAX_CQI)):
        raise ValueError(f"CQI out of range: {c}")
    out = tables.cqi_snr_base + (np.maximum(c, 0) - 1) * tables.cqi_snr_step
    return float(out) if out.ndim == 0 else out


def bler(m, effective_snr, tables: LinkTables = DEFAULT_TABLES):
    """Block error probability of MCS ``m`` at ``effective_snr`` dB."""
    thr = tables.thr[np.asarray(m)]
    p = expit(-tables.bler_steepness * (np.asarray(effective_snr, dtype=float) - thr))
    return float(p) if np.ndim(p) == 0 else p


def tbs(m, n_rb: int, tables: LinkTables = DEFAULT_TABLES):
    """Transport block size in bits for MCS ``m`` over ``n_rb`` resource blocks."""
    if n_rb < 1:
        raise ValueError("n_rb must be >= 1")
    bits = np.floor(tables.eff[np.asarray(m)] * n_rb * tables.re_per_rb + _EPS)
    bits = bits.astype(np.int64)
    return int(bits) if bits.ndim == 0 else bits


def harq_effective_snr(snr, n_tx):
    """Chase-combined SNR after ``n_tx`` identical transmissions."""
    n_tx = np.asarray(n_tx)
    if np.any(n_tx < 1):
        raise ValueError("n_tx must be >= 1")
    out = np.asarray(snr, dtype=float) + 10.0 * np.log10(n_tx)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# SNR traces
# ---------------------------------------------------------------------------


@dataclass
class TraceParams:
    """Synthetic trace generator configuration (all levels in dB)."""

    static_mean_db: float = 12.0
    static_jitter_db: float = 0.5
    mobile_start_db: float = 12.0
    walk_step_db: float = 0.05
    walk_min_db: float = 4.0
    walk_max_db: float = 20.0
    # per-TTI correlation of the complex Gauss-Markov fading gain
    fading_corr: float = 0.99
    switch_tti: int = 70000

    def __post_init__(self):
        if self.static_jitter_db < 0 or self.walk_step_db < 0:
            raise ValueError("jitter and walk step must be >= 0")
        if not self.walk_min_db < self.walk_max_db:
            raise ValueError("walk_min_db must be < walk_max_db")
        if not 0.0 <= self.fading_corr < 1.0:
            raise ValueError("fading_corr must be in [0, 1)")
        if self.switch_tti < 0:
            raise ValueError("switch_tti must be >= 0")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class SnrTrace:
    samples: np.ndarray
    label: str
    seed: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 1 or len(self.samples) < 1:
            raise ValueError("trace needs at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("trace samples must be finite")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, t):
        return self.samples[t]

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tti", "snr_db"])
            for t, x in enumerate(self.samples):
                w.writerow([t, repr(float(x))])

    @classmethod
    def from_csv(cls, path, label: str | None = None) -> "SnrTrace":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["tti", "snr_db"]:
                raise ValueError(f"{path}: expected header 'tti,snr_db'")
            ttis, snr = [], []
            for row in reader:
                ttis.append(int(row["tti"]))
                snr.append(float(row["snr_db"]))
        if ttis != list(range(len(ttis))):
            raise ValueError(f"{path}: TTI indices must be contiguous from 0")
        return cls(np.array(snr), label or path.stem)


def _static(n: int, p: TraceParams, rng: np.random.Generator) -> np.ndarray:
    return p.static_mean_db + p.static_jitter_db * rng.standard_normal(n)


def _mobile(n: int, p: TraceParams, rng: np.random.Generator) -> np.ndarray:
    # bounded random walk of the local mean, reflected at the bounds
    steps = p.walk_step_db * rng.standard_normal(n)
    mean = np.empty(n)
    x = p.mobile_start_db
    lo, hi = p.walk_min_db, p.walk_max_db
    for t in range(n):
        x += steps[t]
        if x > hi:
            x = 2 * hi - x
        elif x < lo:
            x = 2 * lo - x
        mean[t] = x
    # unit-power Rayleigh fading from a first-order Gauss-Markov gain
    w = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)
    rho = p.fading_corr
    h = np.empty(n, dtype=complex)
    h[0] = w[0]
    innov = np.sqrt(1 - rho * rho)
    for t in range(1, n):
        h[t] = rho * h[t - 1] + innov * w[t]
    power = np.maximum(np.abs(h) ** 2, 1e-12)
    return mean + 10 * np.log10(power)


def generate_trace(kind: str, length: int, seed: int,
                   params: TraceParams | None = None) -> SnrTrace:
    """Generate a deterministic synthetic SNR trace.

    ``static`` is a constant level with Gaussian jitter; ``mobile`` is a
    bounded random-walk mean plus correlated Rayleigh fading;
    ``mobile-to-static`` switches from the former to the latter at
    ``params.switch_tti``.
    """
    if kind not in TRACE_KINDS:
        raise ValueError(f"unknown trace kind {kind!r}; expected one of {TRACE_KINDS}")
    if length < 1:
        raise ValueError("length must be >= 1")
    p = params or TraceParams()
    rng = np.random.default_rng(seed)
    if kind == "static":
        x = _static(length, p, rng)
    elif kind == "mobile":
        x = _mobile(length, p, rng)
    else:
        k = min(p.switch_tti, length)
        x = np.concatenate([_mobile(k, p, rng), _static(length - k, p, rng)])
    return SnrTrace(x, kind, seed)
