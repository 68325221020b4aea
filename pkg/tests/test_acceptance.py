"""Acceptance criteria, each at its stated tolerance.

Every test records one verdict line (shown in the terminal summary) and then
asserts it.
"""

import time
from dataclasses import replace

import numpy as np

from cpotfs.chanest import (CeConfig, PilotLayout, channel_nmse, embed_pilot, extract_window,
                            ic_ce, reconstruct_effective, threshold_ce)
from cpotfs.channel import apply_channel, complex_noise, default_eva, random_channel, sample_channel
from cpotfs.cli import main
from cpotfs.config import ChannelRealization, SystemConfig
from cpotfs.detection import Constellation, bit_errors, ml_detect, mp_detect
from cpotfs.harness import (NOISE_FLOOR, _trial_approx, default_spec, find_rows, run,
                            trial_rng)
from cpotfs.ior import (SINGULAR_EPS, _wrap, build_effective_channel, complexity_reduction,
                        delay_shift, f_closed, f_direct, g_closed, g_direct)
from cpotfs.transceiver import demodulate_frame, modulate_frame

QPSK = Constellation.qam(4)
BER_TRIALS = 1000


def cfg_of(N, M, Mp, S, reg, long):
    return SystemConfig(N=N, M=M, M_prime=Mp, S=S, cp_reg_samples=reg, cp_long_samples=long)


def test_criterion_1_chain_vs_closed_form(verdict):
    t0 = time.perf_counter()
    rows = run(default_spec("nrmse"))
    elapsed = time.perf_counter() - t0
    worst = find_rows(rows, metric="nrmse_max")
    sizes = {(r.N, r.M, r.M_prime) for r in worst}
    forms = {(r.N, r.M, r.M_prime, r.cp_reg == r.cp_long, r.label) for r in worst}
    expected_forms = {(16, 16, 16, True, "corollary2"), (32, 32, 32, True, "corollary2"),
                      (16, 16, 16, False, "corollary1"), (32, 32, 32, False, "corollary1")}
    peak = max(r.value for r in worst)
    ok = (sizes == {(16, 12, 16), (16, 16, 16), (32, 24, 32), (32, 32, 32)}
          and expected_forms <= forms and peak <= 1e-9 and elapsed < 60)
    assert verdict(1, ok, f"max NRMSE {peak:.2e} over {len(worst)} (system, form) pairs, "
                          f"{elapsed:.1f} s")


def _g_case(cfg):
    N = cfg.N
    worst, limits = 0.0, 0
    psi_reg = cfg.cp_reg_samples / cfg.M_prime
    psi_ext = (cfg.cp_long_samples - cfg.cp_reg_samples) / cfg.M_prime
    q = np.arange(-N // 2, N // 2)
    for ki in range(-N // 2, N // 2):
        a = -q - ki * psi_reg
        b = -q - ki * (psi_reg + psi_ext / cfg.S)
        for x in (a / N, cfg.S * b / N):
            limits += int(np.count_nonzero(np.abs(np.exp(-2j * np.pi * x) - 1) < SINGULAR_EPS))
        direct = np.array([g_direct(0, (qq - ki) % N, ki, cfg) for qq in q])
        worst = max(worst, float(np.abs(g_closed(q, ki, cfg) - direct).max()))
    return worst, limits


def _f_case(cfg, N=8):
    l = np.arange(cfg.M)
    worst = 0.0
    for li in range(cfg.M_prime):
        R, _ = delay_shift(li, cfg)
        for ki in range(-N // 2, N // 2):
            direct = f_direct(l[:, None], l[None, :], li, ki, cfg)
            closed = f_closed(_wrap(l[None, :] - l[:, None] + R, cfg.M), l[:, None], li, ki, cfg)
            worst = max(worst, float(np.abs(direct - closed).max()))
    return worst


def test_criterion_2_closed_forms_match_direct_sums(verdict):
    t0 = time.perf_counter()
    g_worst, limits, zero_tail = 0.0, 0, 0
    for N in (8, 14, 16):
        for S in (3, 7):
            # psi_reg = 1/4 and 0 put zero denominators on the grid
            for reg, long in ((2, 4), (0, 3), (1, 2), (3, 3)):
                cfg = cfg_of(N, 8, 8, S, reg, long)
                gap, hits = _g_case(cfg)
                g_worst, limits = max(g_worst, gap), limits + hits
                zero_tail += N % S == 0
    f_worst = max(_f_case(cfg_of(8, M, 8, 3, 1, 2)) for M in (4, 6, 8))
    elapsed = time.perf_counter() - t0
    ok = g_worst <= 1e-10 and f_worst <= 1e-10 and limits > 0 and zero_tail > 0 and elapsed < 60
    assert verdict(2, ok, f"G gap {g_worst:.1e} ({limits} limit points), F gap {f_worst:.1e}, "
                          f"{elapsed:.1f} s")


def test_criterion_3_operator_collapse(verdict):
    rng = np.random.default_rng(0)
    gap_t1, gap_c2 = 0.0, 0.0
    for N, M in ((16, 16), (32, 32)):
        for _ in range(3):
            unequal = cfg_of(N, M, M, 7, 3, 5)
            ch = random_channel(unequal, rng, n_paths=9, k_max=4)
            a = build_effective_channel(ch, unequal, variant="theorem1", tol=0).matrix
            b = build_effective_channel(ch, unequal, variant="corollary1", tol=0).matrix
            gap_t1 = max(gap_t1, abs(a - b).max())
            equal = cfg_of(N, M, M, 7, 3, 3)
            c = build_effective_channel(ch, equal, variant="corollary1", tol=0).matrix
            d = build_effective_channel(ch, equal, variant="corollary2", tol=0).matrix
            gap_c2 = max(gap_c2, abs(c - d).max())
    ok = gap_t1 <= 1e-12 and gap_c2 <= 1e-12
    assert verdict(3, ok, f"theorem1 vs corollary1 {gap_t1:.1e}, corollary1 vs corollary2 {gap_c2:.1e}")


def test_criterion_4_approximation_monotone(verdict):
    spec = replace(default_spec("approx"), trials=1)
    cfg = spec.systems[0]
    values = {(k[1], k[2]): v for k, v in _trial_approx(spec, cfg, trial_rng(0, 0, 0))}
    E = np.array([[values[(n, m)] for m in spec.m_hat] for n in spec.n_hat])
    up_n = float(np.diff(E, axis=0).max())
    up_m = float(np.diff(E, axis=1).max())
    full = values[(cfg.N, cfg.M)]
    ok = (cfg.N, cfg.M, cfg.M_prime) == (32, 24, 32) and up_n <= 0 and up_m <= 0 and full == 0
    assert verdict(4, ok, f"largest step along N_hat {up_n:.2e}, along M_hat {up_m:.2e}, "
                          f"full window {full}")


def test_criterion_5_complexity_number(verdict):
    chi = float(complexity_reduction((128, 76), 30, 30))
    assert verdict(5, abs(chi - 0.9075) <= 1e-4, f"chi = {chi:.6f}")


def test_criterion_6_ic_exact_recovery(verdict):
    cfg = cfg_of(16, 16, 16, 7, 2, 3)
    layout = PilotLayout.centred(cfg, 1.0, k_max=1, l_max=2, n_hat=2)
    ce = CeConfig(threshold_ic=1e-6)
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    good = 0
    for _ in range(100):
        paths = []
        for l in range(layout.l_max + 1):
            for k in rng.choice(np.arange(-1, 2), rng.integers(0, 3), replace=False):
                paths.append((complex_noise(rng, (), 1.0), int(k), l))
        ch = ChannelRealization.from_arrays(*zip(*paths)) if paths else ChannelRealization()
        y = demodulate_frame(apply_channel(modulate_frame(
            embed_pilot(np.zeros((16, 16)), layout, cfg), cfg), ch, cfg), cfg)
        est = {(k, l): h for h, k, l in ic_ce(extract_window(y, layout, cfg), layout, cfg, ce).paths()}
        truth = {(p.doppler_index, p.delay_index): p.gain for p in ch.paths}
        good += (est.keys() == truth.keys()
                 and all(abs(est[key] - h) <= 1e-6 * abs(h) for key, h in truth.items()))
    elapsed = time.perf_counter() - t0
    assert verdict(6, good == 100 and elapsed < 30, f"{good}/100 exact, {elapsed:.1f} s")


def _ci(v):
    v = np.asarray(v)
    return v.mean(), 1.96 * v.std(ddof=1) / np.sqrt(len(v))


def test_criterion_7_ic_beats_threshold(verdict):
    cfg = cfg_of(16, 16, 16, 7, 2, 3)
    profile = default_eva()
    k_max, l_max = profile.max_indices(cfg)
    s2 = 10.0 ** (-15 / 10)
    snr_p = 10.0 ** (40 / 10)
    layout = PilotLayout.centred(cfg, np.sqrt(snr_p * s2), k_max, l_max, n_hat=1)
    ce = CeConfig.for_snr(snr_p)
    rng = np.random.default_rng(0)
    ic, thr = [], []
    for _ in range(200):
        ch = sample_channel(profile, cfg, rng)
        x = embed_pilot(QPSK.points[QPSK.random_indices(rng, (16, 16))], layout, cfg)
        y = demodulate_frame(apply_channel(modulate_frame(x, cfg),
                                           ChannelRealization(ch.paths, s2), cfg, rng), cfg)
        w = extract_window(y, layout, cfg)
        truth = build_effective_channel(ch, cfg, variant="corollary1")
        ic.append(channel_nmse(reconstruct_effective(ic_ce(w, layout, cfg, ce), cfg), truth))
        thr.append(channel_nmse(reconstruct_effective(threshold_ce(w, layout, cfg, ce), cfg), truth))
    (mi, ci), (mt, ct) = _ci(ic), _ci(thr)
    assert verdict(7, mi + ci < mt - ct, f"NMSE ic {mi:.2e} +- {ci:.1e}, threshold {mt:.2e} "
                                         f"+- {ct:.1e} over 200 trials")


def test_criterion_8_unequal_cp_mismatch(verdict):
    spec = replace(default_spec("ber"), trials=BER_TRIALS)
    rows = run(spec)
    result = {}
    for cp_reg, cp_long in ((5, 9), (10, 11)):
        (full,) = find_rows(rows, label="full", cp_reg=cp_reg, cp_long=cp_long)
        (blind,) = find_rows(rows, label="mismatch", cp_reg=cp_reg, cp_long=cp_long)
        result[cp_long / cp_reg] = (full, blind)
    f18, b18 = result[1.8]
    f11, b11 = result[1.1]
    separated = b18.value - b18.ci95 > f18.value + f18.ci95
    overlapping = abs(b11.value - f11.value) <= b11.ci95 + f11.ci95
    ok = separated and overlapping and all(r.S == 7 and r.snr_db == 15 for r in rows)
    assert verdict(8, ok, f"ratio 1.8: {f18.value:.2e}+-{f18.ci95:.1e} vs {b18.value:.2e}+-{b18.ci95:.1e}; "
                          f"ratio 1.1: {f11.value:.2e}+-{f11.ci95:.1e} vs {b11.value:.2e}+-{b11.ci95:.1e} "
                          f"({BER_TRIALS} trials)")


def _sparse_iid(rng):
    H = np.zeros((4, 4), dtype=complex)
    mask = rng.random((4, 4)) < 0.5
    np.fill_diagonal(mask, True)
    H[mask] = complex_noise(rng, int(mask.sum()), 1.0)
    return H


def test_criterion_9_detector_sanity(verdict):
    rng = np.random.default_rng(0)
    s2 = 1e-3
    agree = 0
    for _ in range(1000):
        H = _sparse_iid(rng)
        x = QPSK.points[QPSK.random_indices(rng, (2, 2))]
        y = (H @ x.reshape(-1)).reshape(2, 2) + complex_noise(rng, (2, 2), s2)
        agree += np.array_equal(mp_detect(y, H, s2, QPSK).indices, ml_detect(y, H, QPSK).indices)
    cfg = cfg_of(16, 12, 16, 7, 3, 5)
    ch = random_channel(cfg, rng, n_paths=6, k_max=3)
    idx = QPSK.random_indices(rng, (16, 12))
    y = demodulate_frame(apply_channel(modulate_frame(QPSK.points[idx], cfg), ch, cfg), cfg)
    det = mp_detect(y, build_effective_channel(ch, cfg), NOISE_FLOOR, QPSK)
    errors = bit_errors(idx, det.indices, QPSK)
    ok = agree >= 990 and errors == 0
    assert verdict(9, ok, f"MP = ML on {agree}/1000 2x2 frames at 30 dB; "
                          f"noiseless 16x12 bit errors {errors}")


def test_criterion_10_determinism(verdict, tmp_path):
    same = []
    for kind in ("nrmse", "approx", "ber", "ce", "papr", "complexity"):
        outs = [tmp_path / f"{kind}_{i}.csv" for i in range(2)]
        for out in outs:
            assert main([kind, "--trials", "2", "--seed", "7", "--out", str(out)]) == 0
        same.append(outs[0].read_bytes() == outs[1].read_bytes()
                    and outs[0].with_suffix(".json").read_bytes()
                    == outs[1].with_suffix(".json").read_bytes())
    assert verdict(10, all(same), f"{sum(same)}/{len(same)} experiments byte-identical on rerun")
