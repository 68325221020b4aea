"""Symbol detection over a sparse DD effective channel.

``mp_detect`` is Gaussian-approximation message passing on the factor graph
of ``H``: each observation treats the interference from all but one
connected symbol as Gaussian, and each symbol combines the resulting
likelihoods from all but one observation. ``ml_detect`` is the exhaustive
minimum-distance oracle for tiny grids.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .config import ConfigError
from .ior import EffectiveChannel

ML_MAX_BITS = 16


def _gray(n: int) -> np.ndarray:
    i = np.arange(n)
    return i ^ (i >> 1)


@dataclass(frozen=True, eq=False)
class Constellation:
    """Unit-energy constellation with a bit label per point (row of ``labels``)."""

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        q = len(self.points)
        if q < 2 or q & (q - 1):
            raise ConfigError("constellation size must be a power of two")
        if self.labels.shape != (q, self.bits_per_symbol):
            raise ConfigError("label table shape mismatch")
        self.points.setflags(write=False)
        self.labels.setflags(write=False)

    @classmethod
    def qam(cls, order: int = 4) -> "Constellation":
        """Square Gray-labelled QAM normalized to unit average energy."""
        side = int(round(np.sqrt(order)))
        if side * side != order or side < 2 or side & (side - 1):
            raise ConfigError(f"order {order} is not a square power of two")
        half = side.bit_length() - 1
        levels = 2 * np.arange(side) - side + 1
        gray = _gray(side)
        pts, labs = [], []
        for i, j in itertools.product(range(side), repeat=2):
            pts.append(levels[i] + 1j * levels[j])
            code = (int(gray[i]) << half) | int(gray[j])
            labs.append([(code >> b) & 1 for b in reversed(range(2 * half))])
        pts = np.asarray(pts)
        pts = pts / np.sqrt(np.mean(np.abs(pts) ** 2))
        return cls(pts, np.asarray(labs, dtype=np.int8))

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def bits_per_symbol(self) -> int:
        return self.size.bit_length() - 1

    def slice(self, x) -> np.ndarray:
        """Index of the nearest point for each entry of ``x``."""
        x = np.asarray(x)
        return np.argmin(np.abs(x[..., None] - self.points) ** 2, axis=-1)

    def random_indices(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.integers(0, self.size, size=shape)

    def bits(self, indices) -> np.ndarray:
        return self.labels[np.asarray(indices)]


def bit_errors(tx_indices, rx_indices, const: Constellation) -> int:
    return int(np.count_nonzero(const.bits(tx_indices) != const.bits(rx_indices)))


@dataclass(frozen=True)
class DetectorConfig:
    """``select`` picks which iterate's decisions are returned: the one with
    the smallest residual ``||y - H x||`` (default), the one with the most
    confident symbols (``"indicator"``), or simply the last one."""

    max_iterations: int = 30
    damping: float = 0.6
    tol: float = 1e-4
    select: str = "residual"
    confidence: float = 0.99

    def __post_init__(self):
        if self.select not in ("residual", "indicator", "last"):
            raise ConfigError(f"unknown selection rule {self.select!r}")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not 0 < self.damping <= 1:
            raise ConfigError("damping must lie in (0, 1]")
        if self.tol < 0:
            raise ConfigError("tol must be >= 0")


@dataclass(frozen=True, eq=False)
class DetectionResult:
    """``indices`` is -1 and ``posteriors`` zero at positions given as known."""

    symbols: np.ndarray
    indices: np.ndarray
    posteriors: np.ndarray
    iterations: int
    converged: bool


def _as_matrix(H) -> sp.csr_matrix:
    return H.matrix if isinstance(H, EffectiveChannel) else sp.csr_matrix(H)


def _split_known(y, H, known_mask, known_values):
    """Subtract known symbols from ``y`` and keep the columns of unknowns."""
    A = _as_matrix(H)
    y = np.asarray(y, dtype=complex).reshape(-1)
    if known_mask is None:
        active = np.ones(A.shape[1], dtype=bool)
        return y, A, active
    mask = np.asarray(known_mask, dtype=bool).reshape(-1)
    vals = np.asarray(known_values, dtype=complex).reshape(-1)
    y = y - A[:, mask] @ vals[mask]
    return y, A[:, ~mask].tocsr(), ~mask


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _finish(shape, active, const, post, known_values, iterations, converged):
    n = active.size
    indices = np.full(n, -1)
    symbols = np.zeros(n, dtype=complex)
    posteriors = np.zeros((n, const.size))
    idx = post.argmax(axis=1)
    indices[active] = idx
    symbols[active] = const.points[idx]
    posteriors[active] = post
    if known_values is not None:
        kv = np.asarray(known_values, dtype=complex).reshape(-1)
        symbols[~active] = kv[~active]
    return DetectionResult(symbols.reshape(shape), indices.reshape(shape),
                           posteriors.reshape(shape + (const.size,)), iterations, converged)


def mp_detect(y: np.ndarray, H, noise_var: float, const: Constellation,
              cfg: DetectorConfig = DetectorConfig(), known_mask=None,
              known_values=None) -> DetectionResult:
    """Damped Gaussian-approximation message passing.

    Messages live on the nonzero entries (edges) of ``H``. Updates are
    synchronous over all edges, so the schedule is deterministic. On small
    loopy graphs the messages can settle on a wrong fixed point, so the
    returned decisions come from the iterate chosen by ``cfg.select``.
    """
    if not noise_var > 0:
        raise ValueError("noise_var must be positive")
    shape = np.shape(y)
    yv, A, active = _split_known(y, H, known_mask, known_values)
    A_csr = A
    A = A.tocoo()
    rows, cols, h = A.row, A.col, A.data.astype(complex)
    n_obs, n_var = A.shape
    pts = const.points
    pts_e = np.abs(pts) ** 2
    Q = const.size
    if n_var == 0:
        return _finish(shape, active, const, np.zeros((0, Q)), known_values, 0, True)

    h_pts = h[:, None] * pts[None, :]                      # (E, Q)
    y_e = yv[rows]
    h2 = np.abs(h) ** 2
    p = np.full((len(h), Q), 1.0 / Q)                      # variable -> observation
    converged = False
    it = 0
    best_post, best_score = None, np.inf
    for it in range(1, cfg.max_iterations + 1):
        mean = p @ pts
        var = np.maximum(p @ pts_e - (mean.real ** 2 + mean.imag ** 2), 0.0)
        hm = h * mean
        s_re = np.bincount(rows, hm.real, n_obs)
        s_im = np.bincount(rows, hm.imag, n_obs)
        v_row = np.bincount(rows, h2 * var, n_obs) + noise_var
        mu = (s_re + 1j * s_im)[rows] - hm
        sig = np.maximum(v_row[rows] - h2 * var, 1e-300)
        d = (y_e - mu)[:, None] - h_pts                    # (E, Q)
        ll = -(d.real ** 2 + d.imag ** 2) / sig[:, None]
        total = np.stack([np.bincount(cols, ll[:, a], n_var) for a in range(Q)], axis=1)
        p_new = _softmax(total[cols] - ll)
        p_next = cfg.damping * p_new + (1 - cfg.damping) * p
        delta = np.abs(p_next - p).max()
        p = p_next
        post = _softmax(total)
        if cfg.select == "residual":
            score = np.linalg.norm(yv - A_csr @ pts[post.argmax(axis=1)])
        elif cfg.select == "indicator":
            score = -np.mean(post.max(axis=1) >= cfg.confidence)
        else:
            score = -it
        if score < best_score:
            best_post, best_score = post, score
        if delta < cfg.tol:
            converged = True
            break
    return _finish(shape, active, const, best_post, known_values, it, converged)


def ml_detect(y: np.ndarray, H, const: Constellation, known_mask=None,
              known_values=None) -> DetectionResult:
    """Exhaustive minimum-distance detection (at most ``ML_MAX_BITS`` bits)."""
    shape = np.shape(y)
    yv, A, active = _split_known(y, H, known_mask, known_values)
    n_var = A.shape[1]
    if n_var * const.bits_per_symbol > ML_MAX_BITS:
        raise ValueError(f"ML search over {n_var * const.bits_per_symbol} bits exceeds "
                         f"{ML_MAX_BITS}")
    Ad = A.toarray()
    idx = np.array(list(itertools.product(range(const.size), repeat=n_var)), dtype=int)
    if n_var == 0:
        idx = np.zeros((1, 0), dtype=int)
    cand = const.points[idx]                               # (H, n_var)
    cost = np.sum(np.abs(yv[None, :] - cand @ Ad.T) ** 2, axis=1)
    best = idx[int(np.argmin(cost))]
    post = np.zeros((n_var, const.size))
    post[np.arange(n_var), best] = 1.0
    return _finish(shape, active, const, post, known_values, 1, True)
