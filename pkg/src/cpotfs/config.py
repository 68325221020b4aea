"""System configuration and shared domain types.

Signal representations along the chain are plain numpy arrays:

* DD grid      ``(N, M)`` complex, indexed ``[k, l]`` (Doppler, delay).
* TF grid      ``(N, M)`` complex, indexed ``[n, m]`` (time, frequency).
* extended TF  ``(N, M')`` complex; column ``j`` holds subcarrier
  ``m = j - M'/2`` so that ``m`` runs over ``-M'/2 .. M'/2-1``
  (see :func:`ext_column`).
* time signal  :class:`TimeSignal`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised for invalid system / experiment configurations."""


def round_half_up(x: Fraction) -> int:
    """Round a rational to the nearest integer, halves away from -inf."""
    return math.floor(x + Fraction(1, 2))


@dataclass(frozen=True)
class SystemConfig:
    """Frame and numerology parameters of CP-OTFS over OFDM.

    CP lengths are integer sample counts at rate ``M_prime / T``.
    Construction validates; derived values are computed from the fields on
    access and never stored independently.
    """

    N: int
    M: int
    M_prime: int
    S: int
    delta_f: float = 15e3
    cp_reg_samples: int = 0
    cp_long_samples: int = 0

    def __post_init__(self):
        _check(self)

    # -- derived constants -------------------------------------------------
    @property
    def T(self) -> float:
        return 1.0 / self.delta_f

    @property
    def sample_rate(self) -> float:
        return self.M_prime * self.delta_f

    @property
    def mu(self) -> Fraction:
        return Fraction(self.M_prime, self.M)

    @property
    def psi_reg(self) -> Fraction:
        return Fraction(self.cp_reg_samples, self.M_prime)

    @property
    def psi_ext(self) -> Fraction:
        return Fraction(self.cp_long_samples - self.cp_reg_samples, self.M_prime)

    @property
    def omega_f(self) -> int:
        return -(-self.N // self.S)

    @property
    def omega_m(self) -> int:
        return self.N % self.S

    @property
    def last_window_len(self) -> int:
        """Number of OFDM symbols in the final (possibly partial) time window."""
        return self.N - (self.omega_f - 1) * self.S

    @property
    def equal_cp(self) -> bool:
        return self.cp_long_samples == self.cp_reg_samples

    @property
    def has_ecu(self) -> bool:
        return self.M != self.M_prime

    @cached_property
    def cp_lengths(self) -> tuple[int, ...]:
        return tuple(cp_samples(self, n) for n in range(self.N))

    @cached_property
    def cp_accumulated(self) -> tuple[int, ...]:
        """CP samples inserted between the start of symbol 0's payload and
        the start of symbol ``n``'s payload (symbol 0's own CP excluded)."""
        acc = np.concatenate([[0], np.cumsum(self.cp_lengths[1:])])
        return tuple(int(a) for a in acc)

    @property
    def total_cp_samples(self) -> int:
        return sum(self.cp_lengths)

    @property
    def frame_samples(self) -> int:
        return self.N * self.M_prime + self.total_cp_samples

    def with_(self, **changes) -> "SystemConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check(cfg: SystemConfig) -> None:
    for name in ("N", "M", "M_prime", "S"):
        v = getattr(cfg, name)
        if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
            raise ConfigError(f"{name} must be a positive integer, got {v!r}")
    for name in ("cp_reg_samples", "cp_long_samples"):
        v = getattr(cfg, name)
        if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 0:
            raise ConfigError(f"{name} must be a non-negative integer, got {v!r}")
    if cfg.M % 2:
        raise ConfigError(f"M must be even, got {cfg.M}")
    if cfg.M_prime % 2:
        raise ConfigError(f"M_prime must be even, got {cfg.M_prime}")
    if cfg.M > cfg.M_prime:
        raise ConfigError(f"M={cfg.M} exceeds M_prime={cfg.M_prime}")
    if cfg.cp_long_samples < cfg.cp_reg_samples:
        raise ConfigError("cp_long_samples must be >= cp_reg_samples")
    if cfg.cp_long_samples > cfg.M_prime:
        raise ConfigError("a cyclic prefix cannot be longer than the OFDM symbol")
    if not cfg.delta_f > 0:
        raise ConfigError("delta_f must be positive")


def validate(cfg: SystemConfig) -> SystemConfig:
    """Re-check all invariants; returns ``cfg`` unchanged (idempotent)."""
    _check(cfg)
    return cfg


def cp_samples(cfg: SystemConfig, n: int) -> int:
    """CP length of OFDM symbol ``n``: long at the start of each time window."""
    if not 0 <= n < cfg.N:
        raise IndexError(f"symbol index {n} outside 0..{cfg.N - 1}")
    return cfg.cp_long_samples if n % cfg.S == 0 else cfg.cp_reg_samples


# 5G NR normal-CP numerologies: (delta_f [Hz], S, T_reg [s], T_long [s])
NUMEROLOGIES = {
    0: (15e3, 7, 4.69e-6, 5.2e-6),
    1: (30e3, 14, 2.34e-6, 2.86e-6),
    2: (60e3, 28, 1.17e-6, 1.69e-6),
    3: (120e3, 56, 0.59e-6, 1.11e-6),
    4: (240e3, 112, 0.29e-6, 0.81e-6),
}


def seconds_to_samples(duration: float, M_prime: int, delta_f: float) -> int:
    return int(round(duration * M_prime * delta_f))


def numerology_preset(xi: int, N: int, M: int, M_prime: int) -> SystemConfig:
    """Config for NR numerology ``xi`` with CP durations rounded to samples."""
    try:
        df, S, t_reg, t_long = NUMEROLOGIES[xi]
    except KeyError:
        raise ConfigError(f"unknown numerology {xi}") from None
    return SystemConfig(
        N=N, M=M, M_prime=M_prime, S=S, delta_f=df,
        cp_reg_samples=seconds_to_samples(t_reg, M_prime, df),
        cp_long_samples=seconds_to_samples(t_long, M_prime, df),
    )


FULL_SCALE = dict(N=128, M=76, M_prime=128)


def full_scale_config() -> SystemConfig:
    return numerology_preset(0, **FULL_SCALE)


def system_from_mapping(data: Mapping[str, Any]) -> SystemConfig:
    known = {f.name for f in fields(SystemConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown system keys: {sorted(unknown)}")
    missing = {"N", "M", "M_prime", "S"} - set(data)
    if missing:
        raise ConfigError(f"missing system keys: {sorted(missing)}")
    return SystemConfig(**dict(data))


def load_toml(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def ext_column(m: int | np.ndarray, M_prime: int):
    """Storage column of subcarrier ``m`` in an extended TF grid."""
    return np.asarray(m) + M_prime // 2


def check_grid(x: np.ndarray, shape: tuple[int, int], what: str = "grid") -> np.ndarray:
    x = np.asarray(x)
    if x.shape != shape:
        raise ValueError(f"{what} has shape {x.shape}, expected {shape}")
    return x


# ---------------------------------------------------------------------------
# Channel types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelPath:
    gain: complex
    doppler_index: int
    delay_index: int


@dataclass(frozen=True)
class ChannelRealization:
    """Sparse on-grid doubly-selective channel.

    Paths sharing a ``(doppler_index, delay_index)`` pair are merged on
    construction by summing their gains.
    """

    paths: tuple[ChannelPath, ...] = ()
    noise_variance: float = 0.0

    def __post_init__(self):
        if self.noise_variance < 0:
            raise ConfigError("noise_variance must be non-negative")
        merged: dict[tuple[int, int], complex] = {}
        for p in self.paths:
            key = (int(p.doppler_index), int(p.delay_index))
            merged[key] = merged.get(key, 0j) + complex(p.gain)
        object.__setattr__(
            self, "paths",
            tuple(ChannelPath(g, k, l) for (k, l), g in merged.items()),
        )

    @classmethod
    def from_arrays(cls, gains: Iterable[complex], dopplers: Iterable[int],
                    delays: Iterable[int], noise_variance: float = 0.0):
        paths = tuple(ChannelPath(complex(g), int(k), int(l))
                      for g, k, l in zip(gains, dopplers, delays))
        return cls(paths, noise_variance)

    @property
    def gains(self) -> np.ndarray:
        return np.array([p.gain for p in self.paths], dtype=complex)

    @property
    def dopplers(self) -> np.ndarray:
        return np.array([p.doppler_index for p in self.paths], dtype=int)

    @property
    def delays(self) -> np.ndarray:
        return np.array([p.delay_index for p in self.paths], dtype=int)

    def check(self, cfg: SystemConfig) -> "ChannelRealization":
        """Verify the ISI-free and Doppler-range conditions for ``cfg``."""
        for p in self.paths:
            if not 0 <= p.delay_index <= cfg.cp_reg_samples:
                raise ConfigError(
                    f"delay index {p.delay_index} violates 0 <= l <= cp_reg "
                    f"({cfg.cp_reg_samples})")
            if abs(p.doppler_index) > cfg.N // 2:
                raise ConfigError(f"|doppler index| {p.doppler_index} > N/2")
        return self


@dataclass(frozen=True)
class TimeSignal:
    """Discrete baseband frame sampled at ``M_prime / T``.

    ``origin`` is the sample index of time zero, i.e. the first payload
    sample of symbol 0 (its CP lies at negative time).
    """

    samples: np.ndarray
    cp_lengths: tuple[int, ...]
    payload_starts: tuple[int, ...]
    M_prime: int
    sample_rate: float = field(default=float("nan"))

    def __post_init__(self):
        if len(self.cp_lengths) != len(self.payload_starts):
            raise ValueError("layout length mismatch")
        expected = sum(self.cp_lengths) + len(self.cp_lengths) * self.M_prime
        if len(self.samples) != expected:
            raise ValueError(
                f"signal has {len(self.samples)} samples, layout needs {expected}")

    @property
    def origin(self) -> int:
        return self.payload_starts[0]

    def with_samples(self, samples: np.ndarray) -> "TimeSignal":
        return replace(self, samples=np.asarray(samples, dtype=complex))

    @staticmethod
    def layout(cfg: SystemConfig) -> tuple[tuple[int, ...], tuple[int, ...]]:
        starts, pos = [], 0
        for cp in cfg.cp_lengths:
            pos += cp
            starts.append(pos)
            pos += cfg.M_prime
        return cfg.cp_lengths, tuple(starts)
