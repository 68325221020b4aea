"""Config-driven Monte-Carlo experiments with CSV/JSON output.

Every experiment is a per-trial function returning ``(key, value)``
measurements; trials are aggregated into :class:`MetricRow` records
(mean and 95% normal-approximation half width across trials). Trial ``t``
of system ``s`` draws from ``SeedSequence([seed, s, t])``, so results do not
depend on worker count or scheduling.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .chanest import (CeConfig, MulCounter, PilotLayout, channel_nmse, embed_pilot,
                      extract_window, ic_ce, reconstruct_effective, threshold_ce)
from .channel import (EvaProfile, apply_channel, complex_noise, default_eva,
                      random_channel, sample_channel)
from .config import (ChannelRealization, ConfigError, SystemConfig, numerology_preset,
                     full_scale_config, system_from_mapping)
from .detection import Constellation, DetectorConfig, bit_errors, mp_detect
from .ior import (build_effective_channel, complexity_reduction, ior_approx,
                  ior_corollary1, ior_corollary2, ior_theorem1, nrmse)
from .transceiver import demodulate_frame, modulate_frame, papr

KINDS = ("nrmse", "approx", "ber", "ce", "papr", "complexity")

HEADER = ["experiment", "label", "N", "M", "M_prime", "S", "cp_reg", "cp_long",
          "n_hat", "m_hat", "snr_db", "metric", "value", "trials", "ci95"]

# noise variance handed to the detector when the channel is noiseless
NOISE_FLOOR = 1e-9


@dataclass(frozen=True)
class ChannelSpec:
    model: str = "random"
    n_paths: int = 4
    k_max: int = 2
    l_max: int | None = None
    profile: EvaProfile | None = None

    def __post_init__(self):
        if self.model not in ("random", "eva"):
            raise ConfigError(f"unknown channel model {self.model!r}")
        if self.n_paths < 0 or self.k_max < 0:
            raise ConfigError("n_paths and k_max must be non-negative")

    @property
    def eva(self) -> EvaProfile:
        return self.profile if self.profile is not None else default_eva()

    def draw(self, cfg: SystemConfig, rng: np.random.Generator) -> ChannelRealization:
        if self.model == "eva":
            return sample_channel(self.eva, cfg, rng)
        if self.n_paths == 0:
            return ChannelRealization()
        return random_channel(cfg, rng, self.n_paths, self.k_max, self.l_max)

    def max_indices(self, cfg: SystemConfig) -> tuple[int, int]:
        if self.model == "eva":
            return self.eva.max_indices(cfg)
        l_max = cfg.cp_reg_samples if self.l_max is None else min(self.l_max, cfg.cp_reg_samples)
        return self.k_max, l_max


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    systems: tuple[SystemConfig, ...]
    trials: int = 10
    seed: int = 0
    snr_db: tuple[float, ...] = (15.0,)
    snr_p_db: tuple[float, ...] = (40.0,)
    n_hat: tuple[int, ...] = ()
    m_hat: tuple[int, ...] = ()
    variants: tuple[str, ...] = ("full",)
    pilot_db: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    ce_i_bar: int = 5
    ce_n_hat: int = 1
    qam_order: int = 4
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment {self.kind!r}")
        if not self.systems:
            raise ConfigError("at least one system is required")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        bad = set(self.variants) - {"full", "approx", "mismatch"}
        if bad:
            raise ConfigError(f"unknown BER variants {sorted(bad)}")
        if self.kind in ("ber", "ce") and not self.snr_db:
            raise ConfigError("snr_db sweep is empty")
        if self.kind == "approx" and not (self.n_hat and self.m_hat):
            raise ConfigError("approx needs n_hat and m_hat sweeps")
        if self.kind == "ce" and not self.snr_p_db:
            raise ConfigError("snr_p_db sweep is empty")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["systems"] = [s.to_dict() for s in self.systems]
        d["channel"]["profile"] = asdict(self.channel.eva) if self.channel.model == "eva" else None
        return d


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    label: str
    N: int
    M: int
    M_prime: int
    S: int
    cp_reg: int
    cp_long: int
    n_hat: int | None
    m_hat: int | None
    snr_db: float | None
    metric: str
    value: float
    trials: int
    ci95: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and math.isfinite(self.ci95)):
            raise ValueError(f"non-finite metric value in {self}")

    def sort_key(self):
        def k(v):
            return (0, 0) if v is None else (1, v)
        return tuple(k(getattr(self, h)) for h in HEADER[:12])

    def cells(self) -> list[str]:
        out = []
        for name in HEADER:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out


# ---------------------------------------------------------------------------
# Spec construction
# ---------------------------------------------------------------------------

def _sys(N, M, Mp, S=7, cp_reg=3, cp_long=5) -> SystemConfig:
    return SystemConfig(N=N, M=M, M_prime=Mp, S=S, cp_reg_samples=cp_reg, cp_long_samples=cp_long)


def default_spec(kind: str, full_scale: bool = False) -> ExperimentSpec:
    """Desk-scale defaults; ``full_scale`` swaps in the full-size system."""
    if kind == "nrmse":
        systems = (_sys(16, 12, 16), _sys(16, 16, 16), _sys(32, 24, 32), _sys(32, 32, 32),
                   _sys(16, 16, 16, cp_long=3), _sys(32, 32, 32, cp_long=3))
        spec = ExperimentSpec(kind, systems, trials=5,
                              channel=ChannelSpec("random", n_paths=9, k_max=4))
    elif kind == "approx":
        spec = ExperimentSpec(kind, (_sys(32, 24, 32),), trials=5, n_hat=(2, 4, 8, 16, 32),
                              m_hat=(2, 4, 8, 16, 24),
                              channel=ChannelSpec("random", n_paths=6, k_max=3))
    elif kind == "ber":
        spec = ExperimentSpec(kind, (_sys(16, 16, 16, cp_reg=5, cp_long=9),
                                     _sys(16, 16, 16, cp_reg=10, cp_long=11)),
                              trials=100, snr_db=(15.0,), variants=("full", "mismatch"),
                              channel=ChannelSpec("eva"))
    elif kind == "ce":
        spec = ExperimentSpec(kind, (_sys(16, 16, 16, cp_reg=2, cp_long=3),), trials=100,
                              snr_db=(15.0,), snr_p_db=(40.0,), channel=ChannelSpec("eva"))
    elif kind == "papr":
        spec = ExperimentSpec(kind, (_sys(16, 16, 16, cp_reg=2, cp_long=3),), trials=50,
                              channel=ChannelSpec("eva"))
    elif kind == "complexity":
        spec = ExperimentSpec(kind, (_sys(16, 16, 16, cp_reg=2, cp_long=3), full_scale_config()),
                              trials=20, n_hat=(4, 8, 16, 30), m_hat=(4, 8, 16, 30),
                              channel=ChannelSpec("eva"))
    else:
        raise ConfigError(f"unknown experiment {kind!r}")
    if full_scale:
        spec = to_full_scale(spec)
    return spec


def to_full_scale(spec: ExperimentSpec) -> ExperimentSpec:
    if spec.kind == "ce":
        systems = (numerology_preset(0, 128, 128, 128),)
    else:
        systems = (full_scale_config(),)
    n_hat = (30,) if spec.n_hat else ()
    m_hat = (30,) if spec.m_hat else ()
    return replace(spec, systems=systems, n_hat=n_hat or spec.n_hat, m_hat=m_hat or spec.m_hat,
                   channel=ChannelSpec("eva"))


_TOP = {"experiment", "seed", "trials", "workers", "system", "sweep", "channel",
        "detector", "ce", "qam_order"}
_SWEEP = {"snr_db", "snr_p_db", "n_hat", "m_hat", "variants", "pilot_db"}
_CHANNEL = {"model", "n_paths", "k_max", "l_max", "profile"}
_CE = {"i_bar", "n_hat"}


def _only(section: Mapping, allowed: set, where: str) -> Mapping:
    if not isinstance(section, Mapping):
        raise ConfigError(f"[{where}] must be a table")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return section


def spec_from_mapping(data: Mapping[str, Any], kind: str | None = None,
                      full_scale: bool = False) -> ExperimentSpec:
    """Overlay a parsed config file on the defaults for ``kind``."""
    _only(data, _TOP, "top level")
    file_kind = data.get("experiment")
    if kind is None:
        kind = file_kind
    elif file_kind is not None and file_kind != kind:
        raise ConfigError(f"config is for {file_kind!r}, not {kind!r}")
    if kind is None:
        raise ConfigError("experiment kind not given")
    spec = default_spec(kind)
    changes: dict[str, Any] = {}
    for key in ("seed", "trials", "workers", "qam_order"):
        if key in data:
            changes[key] = int(data[key])
    if "system" in data:
        systems = data["system"]
        if isinstance(systems, Mapping):
            systems = [systems]
        changes["systems"] = tuple(system_from_mapping(s) for s in systems)
    sweep = _only(data.get("sweep", {}), _SWEEP, "sweep")
    for key in ("snr_db", "snr_p_db", "pilot_db"):
        if key in sweep:
            changes[key] = tuple(float(v) for v in sweep[key])
    for key in ("n_hat", "m_hat"):
        if key in sweep:
            changes[key] = tuple(int(v) for v in sweep[key])
    if "variants" in sweep:
        changes["variants"] = tuple(str(v) for v in sweep["variants"])
    if "channel" in data:
        ch = dict(_only(data["channel"], _CHANNEL, "channel"))
        prof = ch.pop("profile", None)
        base = asdict(spec.channel)
        base.pop("profile")
        base.update(ch)
        changes["channel"] = ChannelSpec(
            **base, profile=None if prof is None else EvaProfile.from_mapping(prof))
    if "detector" in data:
        det = data["detector"]
        try:
            changes["detector"] = DetectorConfig(**det)
        except TypeError as exc:
            raise ConfigError(f"[detector]: {exc}") from None
    if "ce" in data:
        ce = _only(data["ce"], _CE, "ce")
        if "i_bar" in ce:
            changes["ce_i_bar"] = int(ce["i_bar"])
        if "n_hat" in ce:
            changes["ce_n_hat"] = int(ce["n_hat"])
    spec = replace(spec, **changes)
    if full_scale:
        spec = to_full_scale(spec)
    return spec


# ---------------------------------------------------------------------------
# Per-trial experiment bodies
# ---------------------------------------------------------------------------

Key = tuple  # (label, n_hat, m_hat, snr_db, metric)


def _chain(x, ch, cfg, rng=None):
    return demodulate_frame(apply_channel(modulate_frame(x, cfg), ch, cfg, rng), cfg)


def _random_frame(const, cfg, rng):
    idx = const.random_indices(rng, (cfg.N, cfg.M))
    return idx, const.points[idx]


def _trial_nrmse(spec, cfg, rng):
    const = Constellation.qam(spec.qam_order)
    ch = spec.channel.draw(cfg, rng)
    _, x = _random_frame(const, cfg, rng)
    y = _chain(x, ch, cfg)
    forms = [("theorem1", ior_theorem1)]
    if not cfg.has_ecu:
        forms.append(("corollary1", ior_corollary1))
        if cfg.equal_cp:
            forms.append(("corollary2", ior_corollary2))
    out = []
    for name, fn in forms:
        e = nrmse(y, fn(x, ch, cfg))
        out += [((name, None, None, None, "nrmse"), e), ((name, None, None, None, "nrmse_max"), e)]
    return out


def _trial_approx(spec, cfg, rng):
    const = Constellation.qam(spec.qam_order)
    ch = spec.channel.draw(cfg, rng)
    _, x = _random_frame(const, cfg, rng)
    ref = ior_theorem1(x, ch, cfg)
    out = []
    for nh in spec.n_hat:
        for mh in spec.m_hat:
            if nh > cfg.N or mh > cfg.M:
                continue
            out.append((("theorem1", nh, mh, None, "nrmse"), nrmse(ref, ior_approx(x, ch, cfg, nh, mh))))
    return out


def _ber_operators(spec, ch, cfg):
    ops = []
    if "full" in spec.variants:
        ops.append(("full", None, None, build_effective_channel(ch, cfg)))
    if "approx" in spec.variants:
        for nh in spec.n_hat:
            for mh in spec.m_hat:
                if nh <= cfg.N and mh <= cfg.M:
                    ops.append(("approx", nh, mh, build_effective_channel(
                        ch, cfg, nh, mh, variant="approx")))
    if "mismatch" in spec.variants:
        blind = cfg.with_(cp_long_samples=cfg.cp_reg_samples)
        ops.append(("mismatch", None, None, build_effective_channel(ch, blind)))
    return ops


def _trial_ber(spec, cfg, rng):
    const = Constellation.qam(spec.qam_order)
    ch = spec.channel.draw(cfg, rng)
    idx, x = _random_frame(const, cfg, rng)
    clean = apply_channel(modulate_frame(x, cfg), ch, cfg)
    ops = _ber_operators(spec, ch, cfg)
    nbits = idx.size * const.bits_per_symbol
    out = []
    for snr in spec.snr_db:
        s2 = 10.0 ** (-snr / 10.0)
        noisy = clean.samples + complex_noise(rng, clean.samples.shape, s2)
        y = demodulate_frame(clean.with_samples(noisy), cfg)
        for label, nh, mh, H in ops:
            det = mp_detect(y, H, max(s2, NOISE_FLOOR), const, spec.detector)
            out.append(((label, nh, mh, snr, "ber"), bit_errors(idx, det.indices, const) / nbits))
    return out


def pilot_layout(spec: ExperimentSpec, cfg: SystemConfig, x_p: complex = 1.0) -> PilotLayout:
    k_max, l_max = spec.channel.max_indices(cfg)
    return PilotLayout.centred(cfg, x_p, k_max, l_max, spec.ce_n_hat)


def _trial_ce(spec, cfg, rng):
    if cfg.has_ecu:
        raise ConfigError("channel estimation experiments need M == M_prime")
    const = Constellation.qam(spec.qam_order)
    ch = spec.channel.draw(cfg, rng)
    idx, x = _random_frame(const, cfg, rng)
    H_true = build_effective_channel(ch, cfg, variant="corollary1")
    base = pilot_layout(spec, cfg)
    data = base.data_mask(cfg)
    nbits = int(data.sum()) * const.bits_per_symbol
    out = []
    for snr in spec.snr_db:
        s2 = 10.0 ** (-snr / 10.0)
        nv = max(s2, NOISE_FLOOR)
        for snr_p in spec.snr_p_db:
            snr_p_lin = 10.0 ** (snr_p / 10.0)
            layout = replace(base, x_p=math.sqrt(snr_p_lin * s2))
            frame = embed_pilot(x, layout, cfg)
            y = _chain(frame, ChannelRealization(ch.paths, s2), cfg, rng)
            window = extract_window(y, layout, cfg)
            ce = CeConfig.for_snr(snr_p_lin, i_bar=spec.ce_i_bar)
            tag = f"snr_p={snr_p:g}"
            cands = [("perfect", H_true),
                     ("threshold", reconstruct_effective(threshold_ce(window, layout, cfg, ce), cfg)),
                     ("ic", reconstruct_effective(ic_ce(window, layout, cfg, ce), cfg))]
            for name, H in cands:
                det = mp_detect(y, H, nv, const, spec.detector, known_mask=~data,
                                known_values=frame)
                errs = bit_errors(idx[data], det.indices[data], const)
                out.append(((f"{name}|{tag}", None, None, snr, "ber"), errs / nbits))
                if name != "perfect":
                    out.append(((f"{name}|{tag}", None, None, snr, "nmse"), channel_nmse(H, H_true)))
    return out


def _trial_papr(spec, cfg, rng):
    const = Constellation.qam(spec.qam_order)
    _, x = _random_frame(const, cfg, rng)
    out = []
    for p_db in spec.pilot_db:
        layout = pilot_layout(spec, cfg, math.sqrt(10.0 ** (p_db / 10.0)))
        frame = embed_pilot(x, layout, cfg)
        label = f"pilot_db={p_db:g}"
        try:
            value = 10.0 * math.log10(papr(modulate_frame(frame, cfg)))
        except ValueError:
            # all-zero frame: PAPR undefined, counted instead of averaged
            out.append(((label, None, None, None, "papr_undefined"), 1.0))
            continue
        out.append(((label, None, None, None, "papr_db"), value))
    return out


def _trial_complexity(spec, cfg, rng):
    if cfg.has_ecu:
        return []
    ch = spec.channel.draw(cfg, rng)
    s2 = 10.0 ** (-spec.snr_db[0] / 10.0)
    snr_p_lin = 10.0 ** (spec.snr_p_db[0] / 10.0)
    layout = pilot_layout(spec, cfg, math.sqrt(snr_p_lin * s2))
    frame = embed_pilot(np.zeros((cfg.N, cfg.M)), layout, cfg)
    y = _chain(frame, ChannelRealization(ch.paths, s2), cfg, rng)
    window = extract_window(y, layout, cfg)
    ce = CeConfig.for_snr(snr_p_lin, i_bar=spec.ce_i_bar)
    c_thr, c_ic = MulCounter(), MulCounter()
    threshold_ce(window, layout, cfg, ce, c_thr)
    ic_ce(window, layout, cfg, ce, c_ic)
    return [(("threshold", None, None, None, "mults"), float(c_thr.count)),
            (("ic", None, None, None, "mults"), float(c_ic.count))]


TRIALS: dict[str, Callable] = {
    "nrmse": _trial_nrmse, "approx": _trial_approx, "ber": _trial_ber,
    "ce": _trial_ce, "papr": _trial_papr, "complexity": _trial_complexity,
}


def trial_rng(seed: int, system_index: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, system_index, trial]))


def _run_one(spec: ExperimentSpec, job: tuple[int, int]):
    s, t = job
    return TRIALS[spec.kind](spec, spec.systems[s], trial_rng(spec.seed, s, t))


def _aggregate(spec, cfg, measurements: list[list[tuple[Key, float]]]) -> list[MetricRow]:
    groups: dict[Key, list[float]] = {}
    for trial in measurements:
        for key, value in trial:
            groups.setdefault(key, []).append(float(value))
    rows = []
    for (label, nh, mh, snr, metric), vals in groups.items():
        v = np.asarray(vals)
        if metric.endswith("_max"):
            value, ci = float(v.max()), 0.0
        else:
            value = float(v.mean())
            ci = float(1.96 * v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        rows.append(_row(spec.kind, label, cfg, nh, mh, snr, metric, value, len(v), ci))
    return rows


def _row(kind, label, cfg, nh, mh, snr, metric, value, trials, ci) -> MetricRow:
    return MetricRow(kind, label, cfg.N, cfg.M, cfg.M_prime, cfg.S, cfg.cp_reg_samples,
                     cfg.cp_long_samples, nh, mh, snr, metric, value, trials, ci)


def _analytic_rows(spec: ExperimentSpec, cfg: SystemConfig) -> list[MetricRow]:
    rows = []
    if spec.kind in ("approx", "complexity"):
        for nh in spec.n_hat:
            for mh in spec.m_hat:
                if nh <= cfg.N and mh <= cfg.M:
                    chi = float(complexity_reduction(cfg, nh, mh))
                    rows.append(_row(spec.kind, "chi", cfg, nh, mh, None, "chi", chi, 1, 0.0))
    if spec.kind == "complexity" and not cfg.has_ecu:
        layout = pilot_layout(spec, cfg)
        kh, lm, ib = layout.k_hat_max, layout.l_max, spec.ce_i_bar
        rows.append(_row(spec.kind, "threshold", cfg, None, None, None, "mults_order",
                         float(kh * lm), 1, 0.0))
        rows.append(_row(spec.kind, "ic", cfg, None, None, None, "mults_order",
                         float(ib ** 2 * kh ** 2 * lm + ib ** 3 * kh * lm), 1, 0.0))
    return rows


def run(spec: ExperimentSpec) -> list[MetricRow]:
    """Run all trials of ``spec`` and return rows sorted by parameter tuple."""
    jobs = [(s, t) for s in range(len(spec.systems)) for t in range(spec.trials)]
    fn = partial(_run_one, spec)
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            results = list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * spec.workers))))
    else:
        results = [fn(j) for j in jobs]
    rows = []
    for s, cfg in enumerate(spec.systems):
        mine = [r for (si, _), r in zip(jobs, results) if si == s]
        rows += _aggregate(spec, cfg, mine)
        rows += _analytic_rows(spec, cfg)
    return sorted(rows, key=MetricRow.sort_key)


def run_nrmse(spec): return run(replace(spec, kind="nrmse"))
def run_approx(spec): return run(replace(spec, kind="approx"))
def run_ber(spec): return run(replace(spec, kind="ber"))
def run_ce(spec): return run(replace(spec, kind="ce"))
def run_papr(spec): return run(replace(spec, kind="papr"))
def run_complexity(spec): return run(replace(spec, kind="complexity"))


def rows_to_csv(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def write_outputs(rows: list[MetricRow], spec: ExperimentSpec, out: str | Path) -> tuple[Path, Path]:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rows_to_csv(rows))
    side = out.with_suffix(".json")
    side.write_text(json.dumps({"spec": spec.to_dict(), "header": HEADER}, indent=2,
                               sort_keys=True) + "\n")
    return out, side


def find_rows(rows, **match) -> list[MetricRow]:
    return [r for r in rows if all(getattr(r, k) == v for k, v in match.items())]
