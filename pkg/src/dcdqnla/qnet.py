"""GRU -> FC -> FC -> linear Q-network with hand-written backpropagation.

Inputs are state windows of shape ``(l + 1, 4)`` stored newest-first; the GRU
consumes them oldest-first from a zero hidden state. The GRU cell follows the
common gate layout where the reset gate scales the recurrent candidate term::

    r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
    z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
    n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
    h' = (1 - z) * n + z * h

Parameter values are kept on the float32 grid (so wire snapshots are
lossless) while all arithmetic runs in float64.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict

import numpy as np

from .channel import N_MCS

N_FEATURES = 4

_LAYOUT = ("gru.w_ih", "gru.w_hh", "gru.b_ih", "gru.b_hh",
           "fc1.w", "fc1.b", "fc2.w", "fc2.b", "out.w", "out.b")


class NumericError(ArithmeticError):
    """Non-finite parameter, activation or loss."""


def _shapes(hidden: int, n_in: int = N_FEATURES, n_out: int = N_MCS):
    h3 = 3 * hidden
    return OrderedDict([
        ("gru.w_ih", (n_in, h3)), ("gru.w_hh", (hidden, h3)),
        ("gru.b_ih", (h3,)), ("gru.b_hh", (h3,)),
        ("fc1.w", (hidden, hidden)), ("fc1.b", (hidden,)),
        ("fc2.w", (hidden, hidden)), ("fc2.b", (hidden,)),
        ("out.w", (hidden, n_out)), ("out.b", (n_out,)),
    ])


def to_f32_grid(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class QNetParams:
    """Named parameter tensors of the Q-network."""

    def __init__(self, arrays: "OrderedDict[str, np.ndarray]"):
        if tuple(arrays) != _LAYOUT:
            raise ValueError(f"parameter names must be {_LAYOUT}")
        self.arrays = OrderedDict((k, np.asarray(v, dtype=np.float64)) for k, v in arrays.items())
        hidden = self.arrays["gru.w_hh"].shape[0]
        n_in = self.arrays["gru.w_ih"].shape[0]
        n_out = self.arrays["out.b"].shape[0]
        for k, shape in _shapes(hidden, n_in, n_out).items():
            if self.arrays[k].shape != shape:
                raise ValueError(f"{k}: shape {self.arrays[k].shape} != {shape}")

    @property
    def hidden(self) -> int:
        return self.arrays["gru.w_hh"].shape[0]

    @property
    def n_actions(self) -> int:
        return self.arrays["out.b"].shape[0]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def __getitem__(self, k):
        return self.arrays[k]

    def copy(self) -> "QNetParams":
        return QNetParams(OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def with_flat(self, vec: np.ndarray) -> "QNetParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.size}")
        out, i = OrderedDict(), 0
        for k, v in self.arrays.items():
            out[k] = vec[i:i + v.size].reshape(v.shape).copy()
            i += v.size
        return QNetParams(out)

    def same_shapes(self, other: "QNetParams") -> bool:
        return all(a.shape == b.shape for a, b in zip(self.arrays.values(), other.arrays.values()))

    # -- wire format ------------------------------------------------------
    #   u32 manifest length | manifest "name:d1,d2\n"... | float32 LE values

    def to_bytes(self) -> bytes:
        manifest = "".join(f"{k}:{','.join(map(str, v.shape))}\n" for k, v in self.arrays.items())
        m = manifest.encode()
        return struct.pack("<I", len(m)) + m + self.flat().astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "QNetParams":
        (mlen,) = struct.unpack_from("<I", data, 0)
        manifest = data[4:4 + mlen].decode()
        vals = np.frombuffer(data, dtype="<f4", offset=4 + mlen).astype(np.float64)
        out, i = OrderedDict(), 0
        for line in manifest.splitlines():
            name, dims = line.split(":")
            shape = tuple(int(d) for d in dims.split(",") if d)
            n = int(np.prod(shape))
            out[name] = vals[i:i + n].reshape(shape).copy()
            i += n
        if i != vals.size:
            raise ValueError("manifest does not match payload length")
        return cls(out)

    def checksum(self) -> int:
        return zlib.crc32(self.to_bytes())


def init_params(hidden: int = 64, rng: np.random.Generator | None = None,
                n_in: int = N_FEATURES, n_out: int = N_MCS) -> QNetParams:
    """Uniform fan-in initialization; biases start at zero."""
    rng = rng or np.random.default_rng(0)
    out = OrderedDict()
    for k, shape in _shapes(hidden, n_in, n_out).items():
        if k.startswith("gru."):
            bound = 1.0 / np.sqrt(hidden)
            out[k] = rng.uniform(-bound, bound, shape) if k.endswith("w_ih") or k.endswith("w_hh") \
                else np.zeros(shape)
        elif k.endswith(".w"):
            bound = np.sqrt(6.0 / shape[0]) if k != "out.w" else 1.0 / np.sqrt(shape[0])
            out[k] = rng.uniform(-bound, bound, shape)
        else:
            out[k] = np.zeros(shape)
        out[k] = to_f32_grid(out[k])
    return QNetParams(out)


def zeros_like(p: QNetParams) -> QNetParams:
    return QNetParams(OrderedDict((k, np.zeros_like(v)) for k, v in p.arrays.items()))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _sigmoid(x, out=None):
    out = np.negative(x, out=out)
    np.exp(out, out=out)
    out += 1.0
    return np.reciprocal(out, out=out)


def _prepared(p: QNetParams):
    """Gate-split contiguous weights, cached on the (immutable) parameter set."""
    prep = getattr(p, "_prep", None)
    if prep is None:
        a = p.arrays
        H = p.hidden
        w_ih, w_hh = a["gru.w_ih"], a["gru.w_hh"]
        b_ih, b_hh = a["gru.b_ih"], a["gru.b_hh"]
        prep = (np.ascontiguousarray(w_ih[:, :2 * H]), np.ascontiguousarray(w_ih[:, 2 * H:]),
                np.ascontiguousarray(w_hh[:, :2 * H]), np.ascontiguousarray(w_hh[:, 2 * H:]),
                b_ih[:2 * H] + b_hh[:2 * H], b_ih[2 * H:].copy(), b_hh[2 * H:].copy())
        p._prep = prep
    return prep


def _forward_one_np(p: QNetParams, s: np.ndarray) -> np.ndarray:
    a = p.arrays
    H = p.hidden
    wi_rz, wi_n, wh_rz, wh_n, b_rz, b_in, b_hn = _prepared(p)
    xo = s[::-1]
    x_rz = xo @ wi_rz
    x_rz += b_rz
    x_n = xo @ wi_n
    x_n += b_in
    h = np.zeros(H)
    with np.errstate(over="ignore"):
        for k in range(len(xo)):
            rz = h @ wh_rz
            rz += x_rz[k]
            _sigmoid(rz, out=rz)
            hn = h @ wh_n
            hn += b_hn
            hn *= rz[:H]
            hn += x_n[k]
            n = np.tanh(hn, out=hn)
            h -= n
            h *= rz[H:]
            h += n
    f = np.maximum(h @ a["fc1.w"] + a["fc1.b"], 0.0)
    f = np.maximum(f @ a["fc2.w"] + a["fc2.b"], 0.0)
    return f @ a["out.w"] + a["out.b"]


try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

if njit is not None:
    # reassociation lets the dot-product loops vectorize; NaN/inf semantics are kept
    @njit(cache=True, fastmath={"reassoc", "contract", "arcp"}, error_model="numpy",
          boundscheck=False)
    def _gru_q_kernel(s, wi, wh, bi, bh, w1, b1, w2, b2, wo, bo):
        L1, F = s.shape
        H = wh.shape[0]
        H3 = 3 * H
        h = np.zeros(H)
        hh = np.empty(H3)
        xp = np.empty(H3)
        for k in range(L1):
            x = s[L1 - 1 - k]
            for j in range(H3):
                xp[j] = bi[j]
                hh[j] = bh[j]
            for i in range(F):
                xi = x[i]
                for j in range(H3):
                    xp[j] += xi * wi[i, j]
            for i in range(H):
                hi = h[i]
                for j in range(H3):
                    hh[j] += hi * wh[i, j]
            for j in range(H):
                r = 1.0 / (1.0 + np.exp(-(xp[j] + hh[j])))
                z = 1.0 / (1.0 + np.exp(-(xp[H + j] + hh[H + j])))
                n = np.tanh(xp[2 * H + j] + r * hh[2 * H + j])
                h[j] = n + z * (h[j] - n)
        f = h
        for w, b, relu in ((w1, b1, True), (w2, b2, True), (wo, bo, False)):
            out = b.copy()
            for i in range(f.shape[0]):
                fi = f[i]
                for j in range(out.shape[0]):
                    out[j] += fi * w[i, j]
            if relu:
                for j in range(out.shape[0]):
                    out[j] = max(out[j], 0.0)
            f = out
        return f

    def _forward_one(p: QNetParams, s: np.ndarray) -> np.ndarray:
        a = p.arrays
        return _gru_q_kernel(np.ascontiguousarray(s), a["gru.w_ih"], a["gru.w_hh"], a["gru.b_ih"],
                             a["gru.b_hh"], a["fc1.w"], a["fc1.b"], a["fc2.w"], a["fc2.b"],
                             a["out.w"], a["out.b"])
else:  # pragma: no cover
    _forward_one = _forward_one_np


def _forward(p: QNetParams, X: np.ndarray, keep: bool):
    a = p.arrays
    H = p.hidden
    B, L1, _ = X.shape
    wi_rz, wi_n, wh_rz, wh_n, b_rz, b_in, b_hn = _prepared(p)
    Xo = np.ascontiguousarray(X[:, ::-1, :].transpose(1, 0, 2))  # (L1, B, 4), oldest first
    h = np.zeros((B, H))
    cache = [] if keep else None
    with np.errstate(over="ignore"):
        for k in range(L1):
            x = Xo[k]
            rz = h @ wh_rz
            rz += x @ wi_rz
            rz += b_rz
            _sigmoid(rz, out=rz)
            r, z = rz[:, :H], rz[:, H:]
            hn = h @ wh_n
            hn += b_hn
            n = r * hn
            n += x @ wi_n
            n += b_in
            np.tanh(n, out=n)
            h_new = h - n
            h_new *= z
            h_new += n
            if keep:
                cache.append((h, r, z, n, hn))
            h = h_new
    f1p = h @ a["fc1.w"] + a["fc1.b"]
    f1 = np.maximum(f1p, 0.0)
    f2p = f1 @ a["fc2.w"] + a["fc2.b"]
    f2 = np.maximum(f2p, 0.0)
    q = f2 @ a["out.w"] + a["out.b"]
    if keep:
        return q, (Xo, cache, h, f1p, f1, f2p, f2)
    return q, None


def q_values(p: QNetParams, windows: np.ndarray) -> np.ndarray:
    """Q-values for a batch of windows ``(B, l + 1, 4)`` -> ``(B, n_actions)``."""
    q, _ = _forward(p, np.asarray(windows, dtype=np.float64), keep=False)
    if not np.all(np.isfinite(q)):
        raise NumericError("non-finite Q-values")
    return q


def q_forward(p: QNetParams, s: np.ndarray) -> np.ndarray:
    """Q-values of a single state window ``(l + 1, 4)``.

    Uses a vector code path; results agree with :func:`q_values` to rounding.
    """
    q = _forward_one(p, np.asarray(s, dtype=np.float64))
    if not np.all(np.isfinite(q)):
        raise NumericError("non-finite Q-values")
    return q


def forward_cache(p: QNetParams, windows: np.ndarray):
    """Forward pass retaining the activations needed by :func:`backprop`."""
    return _forward(p, np.asarray(windows, dtype=np.float64), True)


def backprop(p: QNetParams, cache, dq: np.ndarray) -> QNetParams:
    """Gradient of ``sum(dq * Q)`` w.r.t. every parameter, through time."""
    a = p.arrays
    H = p.hidden
    Xo, steps, h, f1p, f1, f2p, f2 = cache
    g = {}
    g["out.w"] = f2.T @ dq
    g["out.b"] = dq.sum(0)
    d = (dq @ a["out.w"].T) * (f2p > 0)
    g["fc2.w"] = f1.T @ d
    g["fc2.b"] = d.sum(0)
    d = (d @ a["fc2.w"].T) * (f1p > 0)
    g["fc1.w"] = h.T @ d
    g["fc1.b"] = d.sum(0)
    dh = d @ a["fc1.w"].T

    w_hhT = np.ascontiguousarray(a["gru.w_hh"].T)
    B = dq.shape[0]
    L1 = len(steps)
    # per-step gate gradients, stacked for one weight-gradient product at the end
    dG = np.empty((L1, B, 3 * H))  # pre-activations fed by the input projection
    dHH = np.empty((L1, B, 3 * H))  # recurrent projections
    Hprev = np.empty((L1, B, H))
    for k in range(L1 - 1, -1, -1):
        h_prev, r, z, n, hn = steps[k]
        dan = dh * (1.0 - z)
        dan *= 1.0 - n * n
        gk = dG[k]
        gk[:, :H] = dan * hn * r * (1.0 - r)
        gk[:, H:2 * H] = dh * (h_prev - n) * z * (1.0 - z)
        gk[:, 2 * H:] = dan
        hk = dHH[k]
        hk[:, :2 * H] = gk[:, :2 * H]
        hk[:, 2 * H:] = dan * r
        Hprev[k] = h_prev
        dh = dh * z + hk @ w_hhT
    dG2 = dG.reshape(L1 * B, 3 * H)
    dHH2 = dHH.reshape(L1 * B, 3 * H)
    g["gru.w_ih"] = Xo.reshape(L1 * B, -1).T @ dG2
    g["gru.b_ih"] = dG2.sum(0)
    g["gru.w_hh"] = Hprev.reshape(L1 * B, H).T @ dHH2
    g["gru.b_hh"] = dHH2.sum(0)
    return QNetParams(OrderedDict((k, g[k]) for k in _LAYOUT))


def backward(p: QNetParams, windows: np.ndarray, dq: np.ndarray):
    """Forward pass plus gradient of ``sum(dq * Q)``; returns ``(Q, grads)``."""
    q, cache = forward_cache(p, windows)
    return q, backprop(p, cache, dq)


class Adam:
    """Adaptive-moment optimizer; updated parameters are rounded to the float32 grid."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: QNetParams, grads: QNetParams) -> QNetParams:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        out = OrderedDict()
        for k, w in params.arrays.items():
            g = grads.arrays[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(w)
                self.v[k] = np.zeros_like(w)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            out[k] = to_f32_grid(w - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return QNetParams(out)
