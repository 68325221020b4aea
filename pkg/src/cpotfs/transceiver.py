"""Discrete CP-OTFS transmit and receive chains over an OFDM modem.

Transmit: ISFFT -> edge-carrier unloading -> per-symbol M'-point IDFT ->
CP insertion (long CP at the start of each time window) -> concatenation.
Receive runs the same steps backwards. All transforms are unitary.
"""

from __future__ import annotations

import numpy as np

from .config import SystemConfig, TimeSignal, check_grid


def isfft(x: np.ndarray) -> np.ndarray:
    """DD grid ``[k, l]`` to TF grid ``[n, m]``.

    ``X_TF[n,m] = 1/sqrt(NM) sum_{k,l} X_DD[k,l] exp(j2pi(nk/N - ml/M))``
    """
    x = np.asarray(x, dtype=complex)
    if x.ndim != 2:
        raise ValueError("expected a 2-D grid")
    return np.fft.ifft(np.fft.fft(x, axis=1, norm="ortho"), axis=0, norm="ortho")


def sfft(y: np.ndarray) -> np.ndarray:
    """Inverse of :func:`isfft`."""
    y = np.asarray(y, dtype=complex)
    if y.ndim != 2:
        raise ValueError("expected a 2-D grid")
    return np.fft.fft(np.fft.ifft(y, axis=1, norm="ortho"), axis=0, norm="ortho")


def ecu_map(x_tf: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Place the M loaded carriers inside the M'-wide extended grid.

    TF column ``m < M/2`` goes to subcarrier ``m``; column ``m >= M/2`` goes
    to subcarrier ``m - M``. Edge subcarriers stay zero. The result is
    stored with column offset ``M'/2``.
    """
    x_tf = check_grid(x_tf, (cfg.N, cfg.M), "TF grid")
    M, Mp = cfg.M, cfg.M_prime
    out = np.zeros((cfg.N, Mp), dtype=complex)
    out[:, Mp // 2: Mp // 2 + M // 2] = x_tf[:, : M // 2]
    out[:, Mp // 2 - M // 2: Mp // 2] = x_tf[:, M // 2:]
    return out


def ecu_demap(y_ext: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """Drop unloaded edge carriers; inverse index map of :func:`ecu_map`."""
    y_ext = check_grid(y_ext, (cfg.N, cfg.M_prime), "extended TF grid")
    M, Mp = cfg.M, cfg.M_prime
    out = np.empty((cfg.N, M), dtype=complex)
    out[:, : M // 2] = y_ext[:, Mp // 2: Mp // 2 + M // 2]
    out[:, M // 2:] = y_ext[:, Mp // 2 - M // 2: Mp // 2]
    return out


def ofdm_modulate(x_ext: np.ndarray, cfg: SystemConfig) -> TimeSignal:
    x_ext = check_grid(x_ext, (cfg.N, cfg.M_prime), "extended TF grid")
    # centred columns -> FFT bin order, then unitary IDFT per symbol
    payload = np.fft.ifft(np.fft.ifftshift(x_ext, axes=1), axis=1, norm="ortho")
    cps, starts = TimeSignal.layout(cfg)
    parts = []
    for n, cp in enumerate(cps):
        if cp:
            parts.append(payload[n, cfg.M_prime - cp:])
        parts.append(payload[n])
    return TimeSignal(np.concatenate(parts), cps, starts, cfg.M_prime, cfg.sample_rate)


def receive_front_end(y: TimeSignal, cfg: SystemConfig) -> np.ndarray:
    """Remove CPs and apply the per-symbol M'-point DFT."""
    cps, starts = TimeSignal.layout(cfg)
    if tuple(y.cp_lengths) != cps or len(y.samples) != cfg.frame_samples:
        raise ValueError("time signal layout does not match config")
    idx = np.asarray(starts)[:, None] + np.arange(cfg.M_prime)[None, :]
    blocks = np.asarray(y.samples)[idx]
    return np.fft.fftshift(np.fft.fft(blocks, axis=1, norm="ortho"), axes=1)


def modulate_frame(x_dd: np.ndarray, cfg: SystemConfig) -> TimeSignal:
    x_dd = check_grid(x_dd, (cfg.N, cfg.M), "DD grid")
    return ofdm_modulate(ecu_map(isfft(x_dd), cfg), cfg)


def demodulate_frame(y: TimeSignal, cfg: SystemConfig) -> np.ndarray:
    return sfft(ecu_demap(receive_front_end(y, cfg), cfg))


def papr(sig: TimeSignal | np.ndarray) -> float:
    """Peak-to-average power ratio (linear)."""
    s = np.asarray(sig.samples if isinstance(sig, TimeSignal) else sig)
    p = np.abs(s) ** 2
    mean = p.mean() if p.size else 0.0
    if mean == 0:
        raise ValueError("PAPR undefined for an all-zero signal")
    return float(p.max() / mean)
