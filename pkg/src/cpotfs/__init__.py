"""CP-OTFS over standards-shaped OFDM: chain simulation, closed-form
delay-Doppler input-output relations, embedded-pilot channel estimation
and an experiment harness."""

from .config import (ChannelPath, ChannelRealization, ConfigError, SystemConfig,
                     TimeSignal, cp_samples, load_toml, numerology_preset,
                     full_scale_config, validate)

__version__ = "0.1.0"

__all__ = [
    "ChannelPath", "ChannelRealization", "ConfigError", "SystemConfig",
    "TimeSignal", "cp_samples", "load_toml", "numerology_preset",
    "full_scale_config", "validate", "__version__",
]
