"""On-grid doubly-selective channels: EVA sampling and time-domain application."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT

from .config import (ChannelPath, ChannelRealization, ConfigError, SystemConfig,
                     TimeSignal)

_PROFILE_KEYS = {"tap_delays_ns", "tap_powers_db", "ue_speed_mps", "carrier_hz"}


@dataclass(frozen=True)
class EvaProfile:
    tap_delays_ns: tuple[float, ...]
    tap_powers_db: tuple[float, ...]
    ue_speed_mps: float
    carrier_hz: float

    def __post_init__(self):
        d = tuple(float(v) for v in self.tap_delays_ns)
        p = tuple(float(v) for v in self.tap_powers_db)
        object.__setattr__(self, "tap_delays_ns", d)
        object.__setattr__(self, "tap_powers_db", p)
        if len(d) != len(p) or not d:
            raise ConfigError("tap delay and power lists must be non-empty and equal length")
        if d[0] != 0.0 or any(b < a for a, b in zip(d, d[1:])):
            raise ConfigError("tap delays must start at 0 and be non-decreasing")
        if self.ue_speed_mps < 0 or self.carrier_hz <= 0:
            raise ConfigError("speed must be >= 0 and carrier > 0")

    @classmethod
    def from_mapping(cls, data) -> "EvaProfile":
        unknown = set(data) - _PROFILE_KEYS
        if unknown:
            raise ConfigError(f"unknown channel keys: {sorted(unknown)}")
        base = default_eva()
        merged = {k: getattr(base, k) for k in _PROFILE_KEYS}
        merged.update(data)
        return cls(**merged)

    @property
    def nu_max(self) -> float:
        return self.ue_speed_mps * self.carrier_hz / SPEED_OF_LIGHT

    @property
    def tau_max(self) -> float:
        return self.tap_delays_ns[-1] * 1e-9

    def max_indices(self, cfg: SystemConfig) -> tuple[int, int]:
        """Largest on-grid ``(|k|, l)`` a quantized draw can produce."""
        k_max = int(round(self.nu_max * cfg.N * cfg.T))
        l_max = int(round(self.tau_max * cfg.M_prime * cfg.delta_f))
        return k_max, l_max


def default_eva() -> EvaProfile:
    from .config import tomllib
    raw = resources.files("cpotfs").joinpath("data/eva.toml").read_bytes()
    data = tomllib.loads(raw.decode())["channel"]
    return EvaProfile(**data)


def sample_channel(profile: EvaProfile, cfg: SystemConfig,
                   rng: np.random.Generator) -> ChannelRealization:
    """Draw one EVA realization quantized to the DD grid.

    Tap gains are circular Gaussian with the profile's (normalized) powers;
    each tap gets a Jakes Doppler ``nu_max * cos(theta)``.
    """
    if profile.tau_max > cfg.cp_reg_samples * cfg.T / cfg.M_prime + 1e-15:
        raise ConfigError(
            f"tau_max={profile.tau_max:.3e}s exceeds the regular CP "
            f"({cfg.cp_reg_samples} samples)")
    powers = 10.0 ** (np.asarray(profile.tap_powers_db) / 10.0)
    powers /= powers.sum()
    n = len(powers)
    gains = np.sqrt(powers / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    theta = rng.uniform(-np.pi, np.pi, n)
    nu = profile.nu_max * np.cos(theta)
    k = np.rint(nu * cfg.N * cfg.T).astype(int)
    l = np.rint(np.asarray(profile.tap_delays_ns) * 1e-9 * cfg.M_prime * cfg.delta_f).astype(int)
    l = np.minimum(l, cfg.cp_reg_samples)
    return ChannelRealization.from_arrays(gains, k, l)


def random_channel(cfg: SystemConfig, rng: np.random.Generator, n_paths: int = 4,
                   k_max: int = 2, l_max: int | None = None,
                   distinct: bool = True) -> ChannelRealization:
    """Uniform random on-grid channel with unit average total power."""
    if l_max is None:
        l_max = cfg.cp_reg_samples
    l_max = min(l_max, cfg.cp_reg_samples)
    pairs = [(k, l) for k in range(-k_max, k_max + 1) for l in range(l_max + 1)]
    if distinct:
        if n_paths > len(pairs):
            raise ConfigError("more paths requested than distinct grid positions")
        pick = rng.choice(len(pairs), size=n_paths, replace=False)
    else:
        pick = rng.integers(0, len(pairs), size=n_paths)
    gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) / np.sqrt(2 * n_paths)
    return ChannelRealization.from_arrays(
        gains, [pairs[i][0] for i in pick], [pairs[i][1] for i in pick])


def apply_channel(x: TimeSignal, ch: ChannelRealization, cfg: SystemConfig,
                  rng: np.random.Generator | None = None) -> TimeSignal:
    """``y[t] = sum_i h_i exp(j2pi k_i (t - l_i)/(N M')) x[t - l_i] + w[t]``.

    ``t`` is measured in samples from ``x.origin`` (time zero at the first
    payload sample), so the Doppler phase tracks the CP-accumulated time.
    """
    s = np.asarray(x.samples, dtype=complex)
    L = len(s)
    t = np.arange(L) - x.origin
    y = np.zeros(L, dtype=complex)
    for p in ch.paths:
        d = p.delay_index
        shifted = np.zeros(L, dtype=complex)
        shifted[d:] = s[: L - d] if d else s
        phase = np.exp(2j * np.pi * p.doppler_index * (t - d) / (cfg.N * cfg.M_prime))
        y += p.gain * phase * shifted
    if ch.noise_variance > 0:
        if rng is None:
            raise ValueError("a random generator is required for noisy channels")
        y += complex_noise(rng, L, ch.noise_variance)
    return x.with_samples(y)


def complex_noise(rng: np.random.Generator, size, variance: float) -> np.ndarray:
    return np.sqrt(variance / 2) * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


__all__ = ["EvaProfile", "default_eva", "sample_channel", "random_channel",
           "apply_channel", "complex_noise", "ChannelPath", "ChannelRealization",
           "SPEED_OF_LIGHT"]
