"""Embedded-pilot channel estimation for CP-OTFS with unequal CPs (M = M').

The pilot sits at ``(k_p, l_p)`` surrounded by a zero guard region. In the
pilot window a path ``(h, k)`` at delay bin ``l`` contributes

    h * x_p * exp(j2pi l_p k / (N M)) * G(k + khat - kk, k)     (kk = 0..2 khat)

so each candidate Doppler index has a known response vector ``psi_k``.
The baseline reads one window cell per candidate and thresholds it; the
interference-cancellation estimator greedily picks the candidate best
matching the residual, re-solves all picked coefficients jointly by least
squares, and subtracts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ChannelRealization, ConfigError, SystemConfig, check_grid
from .ior import EffectiveChannel, _window, _wrap, build_effective_channel, g_closed


@dataclass
class MulCounter:
    """Tally of complex multiplications performed by an estimator."""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += int(n)


@dataclass(frozen=True)
class PilotLayout:
    x_p: complex
    k_p: int
    l_p: int
    k_max: int
    l_max: int
    n_hat: int = 0

    def __post_init__(self):
        if self.k_max < 0 or self.l_max < 0 or self.n_hat < 0:
            raise ConfigError("k_max, l_max and n_hat must be non-negative")

    @property
    def k_hat_max(self) -> int:
        return self.k_max + self.n_hat

    @property
    def doppler_candidates(self) -> np.ndarray:
        kh = self.k_hat_max
        return np.arange(-kh, kh + 1)

    def check(self, cfg: SystemConfig) -> "PilotLayout":
        kh = self.k_hat_max
        if self.k_p - 2 * kh < 0 or self.k_p + 2 * kh > cfg.N - 1:
            raise ConfigError(f"guard Doppler span {4 * kh + 1} does not fit N={cfg.N} around k_p")
        if self.l_p - self.l_max < 0 or self.l_p + self.l_max > cfg.M - 1:
            raise ConfigError(f"guard delay span {2 * self.l_max + 1} does not fit M={cfg.M} around l_p")
        return self

    def guard_mask(self, cfg: SystemConfig) -> np.ndarray:
        """Pilot plus guard bins."""
        self.check(cfg)
        kh = self.k_hat_max
        mask = np.zeros((cfg.N, cfg.M), dtype=bool)
        mask[self.k_p - 2 * kh: self.k_p + 2 * kh + 1,
             self.l_p - self.l_max: self.l_p + self.l_max + 1] = True
        return mask

    def data_mask(self, cfg: SystemConfig) -> np.ndarray:
        return ~self.guard_mask(cfg)

    @classmethod
    def centred(cls, cfg: SystemConfig, x_p: complex, k_max: int, l_max: int,
                n_hat: int = 0) -> "PilotLayout":
        return cls(x_p, cfg.N // 2, cfg.M // 2, k_max, l_max, n_hat).check(cfg)


@dataclass(frozen=True)
class CeConfig:
    """``threshold_ic`` and ``threshold_baseline`` apply to coefficient
    magnitudes ``|h|``; ``n_hat`` truncates the Doppler kernel inside the
    candidate response vectors (``None`` keeps it whole)."""

    i_bar: int = 5
    threshold_ic: float = 0.0
    threshold_baseline: float = 0.0
    n_hat: int | None = None

    def __post_init__(self):
        if self.i_bar < 1:
            raise ConfigError("i_bar must be >= 1")
        if self.threshold_ic < 0 or self.threshold_baseline < 0:
            raise ConfigError("thresholds must be >= 0")

    @classmethod
    def for_snr(cls, snr_p_linear: float, **kw) -> "CeConfig":
        """Both thresholds at three noise standard deviations of ``|h|``."""
        t = 3.0 / math.sqrt(snr_p_linear)
        return cls(threshold_ic=t, threshold_baseline=t, **kw)


@dataclass(frozen=True)
class EstimatedChannel:
    """Per delay bin, a tuple of ``(coefficient, doppler_index)`` pairs.

    ``spread`` tells whether the pairs are propagation paths (reconstructed
    through the Doppler spreading kernel) or plain DD taps.
    """

    bins: dict = field(default_factory=dict)
    spread: bool = True

    def paths(self):
        for l in sorted(self.bins):
            for h, k in self.bins[l]:
                yield h, k, l

    def __len__(self) -> int:
        return sum(len(v) for v in self.bins.values())

    def to_realization(self) -> ChannelRealization:
        items = list(self.paths())
        return ChannelRealization.from_arrays([h for h, _, _ in items],
                                              [k for _, k, _ in items],
                                              [l for _, _, l in items])


def embed_pilot(data: np.ndarray, layout: PilotLayout, cfg: SystemConfig) -> np.ndarray:
    data = check_grid(data, (cfg.N, cfg.M), "DD grid")
    out = np.array(data, dtype=complex)
    out[layout.guard_mask(cfg)] = 0
    out[layout.k_p, layout.l_p] = layout.x_p
    return out


def extract_window(y: np.ndarray, layout: PilotLayout, cfg: SystemConfig) -> np.ndarray:
    """``Y_ch[l, kk] = Y_DD[k_p - khat + kk, l_p + l]`` for ``l = 0..l_max``."""
    y = check_grid(y, (cfg.N, cfg.M), "DD grid")
    layout.check(cfg)
    kh = layout.k_hat_max
    return np.array(y[layout.k_p - kh: layout.k_p + kh + 1,
                      layout.l_p: layout.l_p + layout.l_max + 1].T)


def response_matrix(layout: PilotLayout, cfg: SystemConfig,
                    n_hat: int | None = None) -> np.ndarray:
    """Columns are the window responses of a unit path at each candidate Doppler."""
    if cfg.has_ecu:
        raise ConfigError("pilot-window model assumes M == M_prime")
    kh = layout.k_hat_max
    kk = np.arange(2 * kh + 1)
    lo, hi = _window(cfg.N if n_hat is None else n_hat)
    cols = []
    for k in layout.doppler_candidates:
        q = _wrap(k + kh - kk, cfg.N)
        g = np.where((q >= lo) & (q <= hi), g_closed(q, int(k), cfg), 0.0)
        cols.append(np.exp(2j * np.pi * layout.l_p * k / (cfg.N * cfg.M)) * g)
    return layout.x_p * np.stack(cols, axis=1)


def threshold_ce(y_ch: np.ndarray, layout: PilotLayout, cfg: SystemConfig,
                 ce: CeConfig = CeConfig(), counter: MulCounter | None = None) -> EstimatedChannel:
    """Read each candidate's window cell, undo pilot and phase, threshold."""
    kh = layout.k_hat_max
    y_ch = check_grid(y_ch, (layout.l_max + 1, 2 * kh + 1), "pilot window")
    bins = {}
    for l in range(layout.l_max + 1):
        taps = []
        for k in layout.doppler_candidates:
            h = y_ch[l, k + kh] / (layout.x_p * np.exp(2j * np.pi * layout.l_p * k / (cfg.N * cfg.M)))
            if abs(h) >= ce.threshold_baseline and h != 0:
                taps.append((complex(h), int(k)))
        if counter is not None:
            counter.add(2 * kh + 1)
        if taps:
            bins[l] = tuple(taps)
    return EstimatedChannel(bins, spread=False)


def _pick(obj: np.ndarray, cands: np.ndarray) -> int:
    """Index of the largest objective; near-ties go to the smaller ``|k|``, then smaller ``k``."""
    top = obj.max()
    tied = np.flatnonzero(obj >= top * (1 - 1e-12))
    return int(min(tied, key=lambda i: (abs(cands[i]), cands[i])))


def ic_ce(y_ch: np.ndarray, layout: PilotLayout, cfg: SystemConfig,
          ce: CeConfig = CeConfig(), counter: MulCounter | None = None,
          trace: list | None = None) -> EstimatedChannel:
    """Greedy interference-cancellation estimate, delay bin by delay bin.

    ``trace``, when given, receives per-bin lists of residual norms (entry 0
    is ``||y_ch[l]||``).
    """
    kh = layout.k_hat_max
    K = 2 * kh + 1
    y_ch = check_grid(y_ch, (layout.l_max + 1, K), "pilot window")
    cands = layout.doppler_candidates
    Psi = response_matrix(layout, cfg, ce.n_hat)
    norms2 = np.sum(np.abs(Psi) ** 2, axis=0)
    live = norms2 > 0
    if counter is not None:
        counter.add(K * K)
    bins = {}
    for l in range(layout.l_max + 1):
        y = y_ch[l]
        res = y.copy()
        chosen: list[int] = []
        coef = np.zeros(0, dtype=complex)
        norms = [float(np.linalg.norm(res))]
        for _ in range(ce.i_bar):
            corr = Psi.conj().T @ res
            if counter is not None:
                counter.add(K * K)
            obj = np.where(live, np.abs(corr) ** 2 / np.where(live, norms2, 1.0), 0.0)
            if obj.max() <= 0:
                break
            j = _pick(obj, cands)
            if j in chosen:
                break
            A = Psi[:, chosen + [j]]
            gram = A.conj().T @ A
            rhs = A.conj().T @ y
            try:
                sol = np.linalg.solve(gram, rhs)
            except np.linalg.LinAlgError:
                break
            n = len(chosen) + 1
            if counter is not None:
                counter.add(n * n * K + n * K + n ** 3 + n * K)
            chosen.append(j)
            coef = sol
            res = y - A @ coef
            norms.append(float(np.linalg.norm(res)))
        if trace is not None:
            trace.append(norms)
        keep = tuple((complex(h), int(cands[j])) for h, j in zip(coef, chosen)
                     if abs(h) >= ce.threshold_ic and h != 0)
        if keep:
            bins[l] = keep
    return EstimatedChannel(bins, spread=True)


def reconstruct_effective(est: EstimatedChannel, cfg: SystemConfig,
                          n_hat: int | None = None, m_hat: int | None = None) -> EffectiveChannel:
    """Effective channel from estimates (no-ECU model; ``m_hat`` unused).

    Paths go through the Doppler spreading kernel of ``cfg``; plain taps are
    placed as unspread delta responses.
    """
    ch = est.to_realization()
    if est.spread:
        return build_effective_channel(ch, cfg, n_hat=n_hat, variant="corollary1")
    flat = cfg.with_(cp_reg_samples=0, cp_long_samples=0)
    H = build_effective_channel(ch, flat, variant="corollary2")
    return EffectiveChannel(H.matrix, cfg.N, cfg.M, "taps")


def channel_nmse(estimate: EffectiveChannel, truth: EffectiveChannel) -> float:
    """``||H_est - H||_F^2 / ||H||_F^2``."""
    diff = (estimate.matrix - truth.matrix)
    num = float(np.sum(np.abs(diff.data) ** 2)) if diff.nnz else 0.0
    den = float(np.sum(np.abs(truth.matrix.data) ** 2))
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return num / den
