"""Closed-form delay-Doppler input-output relations.

The received DD grid of CP-OTFS over OFDM (unequal CPs, edge carrier
unloading) is

    Y[k,l] = sum_i c_i sum_q G(q,k_i) sum_ell F(ell,l,l_i,k_i)
             * X[(k - k_i + q) mod N, (l - R_i + ell) mod M]

with ``c_i = h_i exp(-j2pi l_i k_i / (M' N))`` and ``R_i = round(l_i M / M')``.
``G`` is the Doppler spreading caused by the CP-accumulated phase, ``F``
the delay spreading caused by edge carrier unloading. Without ECU (M = M')
``F`` collapses to a phase times a delta and the relation becomes

    Y[k,l] = sum_i h_i exp(j2pi (l - l_i) k_i / (N M)) sum_q G(q,k_i)
             * X[(k - k_i + q) mod N, (l - l_i) mod M].

The ``*_direct`` functions evaluate the defining finite sums and serve as
oracles for the closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .config import ChannelRealization, ConfigError, SystemConfig, check_grid, round_half_up

# |z - 1| below this is treated as a vanishing geometric-ratio denominator
SINGULAR_EPS = 1e-9

VARIANTS = ("theorem1", "corollary1", "corollary2", "approx")


def _geom(x, count: int) -> np.ndarray:
    """``sum_{n=0}^{count-1} exp(-j2pi n x)`` via the ratio form.

    Where ``exp(-j2pi x)`` is within ``SINGULAR_EPS`` of 1 the limit
    ``count`` is substituted.
    """
    x = np.asarray(x, dtype=float)
    den = np.exp(-2j * np.pi * x) - 1.0
    sing = np.abs(den) < SINGULAR_EPS
    num = np.exp(-2j * np.pi * count * x) - 1.0
    out = num / np.where(sing, 1.0, den)
    return np.where(sing, complex(count), out)


def _dirichlet(x, M: int) -> np.ndarray:
    """``sum_{m=-M/2}^{M/2-1} exp(-j2pi m x / M)``."""
    x = np.asarray(x, dtype=float)
    return _geom(x / M, M // 2) * (1.0 + np.exp(1j * np.pi * x))


def _wrap(v, n: int):
    """Map integers to the centred range ``[-n/2, n/2)``."""
    return (np.asarray(v) + n // 2) % n - n // 2


def _window(size: int) -> tuple[int, int]:
    """Inclusive index range of a truncation window with ``size`` terms."""
    lo = -(size // 2)
    return lo, lo + size - 1


# ---------------------------------------------------------------------------
# Doppler spreading
# ---------------------------------------------------------------------------

def g_direct(k: int, kbar: int, k_i: int, cfg: SystemConfig) -> complex:
    """Literal N-term sum for the Doppler kernel between bins ``k`` and ``kbar``."""
    n = np.arange(cfg.N)
    acc = np.asarray(cfg.cp_accumulated, dtype=float) / cfg.M_prime
    phase = n * (k - kbar - k_i) - k_i * acc
    return complex(np.exp(-2j * np.pi * phase / cfg.N).mean())


def g_closed(q, k_i: int, cfg: SystemConfig) -> np.ndarray:
    """Closed-form Doppler spreading ``G(q, k_i)`` (unequal CPs).

    The sum over OFDM symbols splits into ``omega_f`` full time windows minus
    the symbols missing from the last one. The last window holds
    ``N - (omega_f - 1) S`` symbols; this equals ``omega_m`` unless ``S``
    divides ``N``, in which case nothing is removed.
    """
    q = np.asarray(q)
    N, S = cfg.N, cfg.S
    if k_i == 0:
        return (q % N == 0).astype(complex)
    a = -q - k_i * float(cfg.psi_reg)
    b = -q - k_i * float(cfg.psi_reg + cfg.psi_ext / S)
    wf, r = cfg.omega_f, cfg.last_window_len
    t1 = _geom(S * b / N, wf) * _geom(a / N, S) / N
    t2 = (np.exp(-2j * np.pi * S * (wf - 1) * b / N)
          * np.exp(-2j * np.pi * r * a / N) * _geom(a / N, S - r) / N)
    return t1 - t2


def g_sc_closed(q, k_i: int, cfg: SystemConfig) -> np.ndarray:
    """Doppler spreading when all CPs equal the regular CP."""
    q = np.asarray(q)
    if k_i == 0:
        return (q % cfg.N == 0).astype(complex)
    a = -q - k_i * float(cfg.psi_reg)
    return _geom(a / cfg.N, cfg.N) / cfg.N


# ---------------------------------------------------------------------------
# Delay spreading
# ---------------------------------------------------------------------------

def delay_shift(l_i: int, cfg: SystemConfig) -> tuple[int, Fraction]:
    """Integer DD delay shift ``round(l_i / mu)`` and the fractional remainder."""
    ratio = Fraction(l_i) / cfg.mu
    R = round_half_up(ratio)
    return R, ratio - R


def _phi(m, mb, s, l_i, cfg: SystemConfig):
    """Four-case phase of the loaded-carrier index wrap (broadcasting)."""
    M, Mp = cfg.M, cfg.M_prime
    hi_m = m >= M // 2
    hi_mb = mb >= M // 2
    d = Mp - M
    out = np.ones(np.broadcast(m, mb, s).shape, dtype=complex)
    out = np.where(~hi_m & hi_mb, np.exp(-2j * np.pi * d * (-s + l_i) / Mp), out)
    out = np.where(hi_m & ~hi_mb, np.exp(-2j * np.pi * d * s / Mp), out)
    out = np.where(hi_m & hi_mb, np.exp(-2j * np.pi * d * l_i / Mp), out)
    return out


def f_direct(l, lbar, l_i: int, k_i: int, cfg: SystemConfig) -> np.ndarray:
    """Literal triple sum over ``s``, ``m``, ``mbar`` for the delay kernel
    between output delay ``l`` and input delay ``lbar``.

    The inner ``(s, m, mbar)`` tensor does not depend on ``(l, lbar)``, so it
    is summed over ``s`` first and then contracted with the two DFT kernels.
    """
    M, Mp, N = cfg.M, cfg.M_prime, cfg.N
    s = np.arange(Mp)[:, None, None]
    m = np.arange(M)[None, :, None]
    mb = np.arange(M)[None, None, :]
    core = np.exp(-2j * np.pi / Mp * ((m - mb - k_i / N) * s + l_i * mb))
    A = (core * _phi(m, mb, s, l_i, cfg)).sum(axis=0)
    l = np.asarray(l)
    lbar = np.asarray(lbar)
    mm = np.arange(M)
    e1 = np.exp(2j * np.pi * np.multiply.outer(l, mm) / M)        # (..., m)
    e2 = np.exp(-2j * np.pi * np.multiply.outer(lbar, mm) / M)    # (..., mbar)
    val = np.einsum("...m,mn,...n->...", e1, A, e2)
    return val / (M * Mp)


def f_closed(ell, l, l_i: int, k_i: int, cfg: SystemConfig) -> np.ndarray:
    """Closed-form delay spreading ``F(ell, l, l_i, k_i)``.

    Three cases: no spreading (``k_i = 0`` and ``l_i`` a multiple of ``mu``),
    a single Dirichlet kernel (``k_i = 0``), and an ``M'``-term sum of kernel
    products (``k_i != 0``).
    """
    ell = np.asarray(ell)
    l = np.asarray(l)
    M, Mp, N = cfg.M, cfg.M_prime, cfg.N
    _, frac = delay_shift(l_i, cfg)
    ell_b, l_b = np.broadcast_arrays(ell, l)
    if k_i == 0 and frac == 0:
        return (ell_b % M == 0).astype(complex)
    if k_i == 0:
        return _dirichlet(ell_b + float(frac), M) / M
    s = np.arange(Mp).reshape((Mp,) + (1,) * l_b.ndim)
    inv_mu = float(1 / cfg.mu)
    terms = (np.exp(2j * np.pi * s * k_i / (N * Mp))
             * _dirichlet(s * inv_mu - l_b, M)
             * _dirichlet(l_b + ell_b + float(frac) - s * inv_mu, M))
    return terms.sum(axis=0) / (M * Mp)


# ---------------------------------------------------------------------------
# Per-path kernel matrices (memoized, read-only)
# ---------------------------------------------------------------------------

def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@lru_cache(maxsize=4096)
def _doppler_matrix(cfg: SystemConfig, k_i: int, n_hat: int, equal_cp: bool) -> np.ndarray:
    """``Gm[k, kbar] = G(q)`` with ``q = wrap(kbar - k + k_i)``, zero outside the window."""
    N = cfg.N
    k = np.arange(N)
    q = _wrap(k[None, :] - k[:, None] + k_i, N)
    fn = g_sc_closed if equal_cp else g_closed
    vals = fn(q, k_i, cfg)
    lo, hi = _window(n_hat)
    return _frozen(np.where((q >= lo) & (q <= hi), vals, 0.0))


@lru_cache(maxsize=4096)
def _delay_matrix_ecu(cfg: SystemConfig, l_i: int, k_i: int, m_hat: int) -> np.ndarray:
    """``Fm[l, lbar] = F(ell, l)`` with ``ell = wrap(lbar - l + R)``."""
    M = cfg.M
    R, _ = delay_shift(l_i, cfg)
    l = np.arange(M)
    ell = _wrap(l[None, :] - l[:, None] + R, M)
    vals = f_closed(ell, l[:, None], l_i, k_i, cfg)
    lo, hi = _window(m_hat)
    return _frozen(np.where((ell >= lo) & (ell <= hi), vals, 0.0))


@lru_cache(maxsize=4096)
def _delay_matrix_plain(cfg: SystemConfig, l_i: int, k_i: int) -> np.ndarray:
    M = cfg.M
    l = np.arange(M)
    out = np.zeros((M, M), dtype=complex)
    out[l, (l - l_i) % M] = np.exp(2j * np.pi * (l - l_i) * k_i / (cfg.N * M))
    return _frozen(out)


def _resolve(variant: str, cfg: SystemConfig, n_hat, m_hat) -> tuple[str, int, int]:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown IOR variant {variant!r}")
    if variant == "approx":
        if n_hat is None or m_hat is None:
            raise ConfigError("approx variant needs n_hat and m_hat")
        variant = "theorem1"
    n_hat = cfg.N if n_hat is None else int(n_hat)
    m_hat = cfg.M if m_hat is None else int(m_hat)
    if not 0 < n_hat <= cfg.N:
        raise ConfigError(f"n_hat must lie in 1..N, got {n_hat}")
    if not 0 < m_hat <= cfg.M:
        raise ConfigError(f"m_hat must lie in 1..M, got {m_hat}")
    if variant in ("corollary1", "corollary2") and cfg.has_ecu:
        raise ConfigError(f"{variant} requires M == M_prime")
    if variant == "corollary2" and not cfg.equal_cp:
        raise ConfigError("corollary2 requires equal CP lengths")
    return variant, n_hat, m_hat


def path_kernels(ch: ChannelRealization, cfg: SystemConfig, variant: str = "theorem1",
                 n_hat: int | None = None, m_hat: int | None = None):
    """Yield ``(coefficient, Gm, Fm)`` per path so that
    ``Y = sum coefficient * Gm @ X @ Fm.T``."""
    variant, n_hat, m_hat = _resolve(variant, cfg, n_hat, m_hat)
    for p in ch.paths:
        k_i, l_i = p.doppler_index, p.delay_index
        if variant == "theorem1":
            coef = p.gain * np.exp(-2j * np.pi * l_i * k_i / (cfg.M_prime * cfg.N))
            Gm = _doppler_matrix(cfg, k_i, n_hat, False)
            Fm = _delay_matrix_ecu(cfg, l_i, k_i, m_hat)
        else:
            coef = p.gain
            Gm = _doppler_matrix(cfg, k_i, n_hat, variant == "corollary2")
            Fm = _delay_matrix_plain(cfg, l_i, k_i)
        yield coef, Gm, Fm


def _ior(x, ch, cfg, variant, n_hat=None, m_hat=None) -> np.ndarray:
    x = check_grid(x, (cfg.N, cfg.M), "DD grid").astype(complex)
    y = np.zeros_like(x)
    for coef, Gm, Fm in path_kernels(ch, cfg, variant, n_hat, m_hat):
        y += coef * (Gm @ x @ Fm.T)
    return y


def ior_theorem1(x, ch: ChannelRealization, cfg: SystemConfig) -> np.ndarray:
    """Noiseless DD output of CP-OTFS with unequal CPs and ECU."""
    return _ior(x, ch, cfg, "theorem1")


def ior_corollary1(x, ch: ChannelRealization, cfg: SystemConfig) -> np.ndarray:
    """Noiseless DD output without ECU (requires ``M == M_prime``)."""
    return _ior(x, ch, cfg, "corollary1")


def ior_corollary2(x, ch: ChannelRealization, cfg: SystemConfig) -> np.ndarray:
    """Noiseless DD output without ECU and with equal CPs."""
    return _ior(x, ch, cfg, "corollary2")


def ior_approx(x, ch: ChannelRealization, cfg: SystemConfig, n_hat: int, m_hat: int,
               form: str = "theorem1") -> np.ndarray:
    """Truncated IOR keeping ``n_hat`` Doppler and ``m_hat`` delay kernel terms.

    ``m_hat`` has no effect on the corollary forms.
    """
    return _ior(x, ch, cfg, form, n_hat, m_hat)


# ---------------------------------------------------------------------------
# Effective channel operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EffectiveChannel:
    """Sparse DD-to-DD operator; row/column index ``k * M + l``."""

    matrix: sp.csr_matrix
    N: int
    M: int
    variant: str = "theorem1"
    n_hat: int | None = None
    m_hat: int | None = None

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = check_grid(x, (self.N, self.M), "DD grid")
        return (self.matrix @ x.reshape(-1)).reshape(self.N, self.M)

    def nnz_per_row(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def build_effective_channel(ch: ChannelRealization, cfg: SystemConfig,
                            n_hat: int | None = None, m_hat: int | None = None,
                            variant: str = "theorem1", tol: float = 1e-13) -> EffectiveChannel:
    """Assemble the operator of :func:`ior_theorem1` (or a corollary/truncation).

    Entries with magnitude ``<= tol`` are dropped. The default removes the
    rounding residue of kernels that are exact deltas (e.g. the delay kernel
    without ECU), which would otherwise make the operator dense.
    """
    NM = cfg.N * cfg.M
    H = sp.csr_matrix((NM, NM), dtype=complex)
    for coef, Gm, Fm in path_kernels(ch, cfg, variant, n_hat, m_hat):
        H = H + coef * sp.kron(sp.csr_matrix(Gm), sp.csr_matrix(Fm), format="csr")
    H = H.tocsr()
    if tol > 0:
        H.data[np.abs(H.data) <= tol] = 0
    H.eliminate_zeros()
    return EffectiveChannel(H, cfg.N, cfg.M, variant, n_hat, m_hat)


def complexity_reduction(cfg: SystemConfig | tuple[int, int], n_hat: int, m_hat: int) -> Fraction:
    """Fraction of detector work saved by truncation: ``(NM - n_hat m_hat) / NM``."""
    N, M = (cfg.N, cfg.M) if isinstance(cfg, SystemConfig) else cfg
    if not (0 < n_hat <= N and 0 < m_hat <= M):
        raise ConfigError("truncation sizes out of range")
    return Fraction(N * M - n_hat * m_hat, N * M)


def nrmse(reference: np.ndarray, estimate: np.ndarray) -> float:
    """``||ref - est|| / ||ref||``; 0/0 is defined as 0."""
    num = np.linalg.norm(np.asarray(reference) - np.asarray(estimate))
    den = np.linalg.norm(reference)
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return float(num / den)
