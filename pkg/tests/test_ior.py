"""Closed-form spreading kernels and input-output relations."""

import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpotfs.channel import apply_channel, random_channel
from cpotfs.config import ChannelRealization, ConfigError, SystemConfig
from cpotfs.ior import (_wrap, build_effective_channel, complexity_reduction, delay_shift,
                        f_closed, f_direct, g_closed, g_direct, g_sc_closed, ior_approx,
                        ior_corollary1, ior_corollary2, ior_theorem1, nrmse)
from cpotfs.transceiver import demodulate_frame, modulate_frame


def cfg_of(N, M, Mp, S, reg, long):
    return SystemConfig(N=N, M=M, M_prime=Mp, S=S, cp_reg_samples=reg, cp_long_samples=long)


def g_gap(cfg):
    N = cfg.N
    worst = 0.0
    for ki in range(-N // 2, N // 2):
        q = np.arange(-N // 2, N // 2)
        closed = g_closed(q, ki, cfg)
        assert np.all(np.isfinite(closed))
        direct = np.array([g_direct(0, (qq - ki) % N, ki, cfg) for qq in q])
        worst = max(worst, np.abs(closed - direct).max())
    return worst


def test_g_direct_trivial_cases():
    cfg = cfg_of(16, 8, 8, 7, 2, 3)
    assert abs(g_direct(3, 3, 0, cfg) - 1) < 1e-15
    assert abs(g_direct(3, 5, 0, cfg)) < 1e-14


def test_g_closed_matches_direct_documented_example():
    cfg = cfg_of(16, 16, 16, 7, 2, 3)
    q = np.arange(-8, 8)
    direct = np.array([g_direct(0, (qq - 1) % 16, 1, cfg) for qq in q])
    assert np.abs(g_closed(q, 1, cfg) - direct).max() <= 1e-10


@pytest.mark.parametrize("N,S,Mp,reg,long", [
    (14, 7, 8, 2, 3),    # S divides N: empty correction term
    (14, 7, 16, 0, 4),
    (8, 3, 8, 2, 4),     # k_i * psi integer for k_i in 4Z: vanishing denominators
    (16, 3, 4, 1, 2),
    (16, 7, 16, 4, 4),
])
def test_g_closed_ratio_limits(N, S, Mp, reg, long):
    assert g_gap(cfg_of(N, Mp, Mp, S, reg, long)) <= 1e-10


def test_g_zero_doppler_is_delta_and_equal_cp_matches_sc():
    cfg = cfg_of(16, 8, 8, 7, 3, 3)
    q = np.arange(-8, 8)
    np.testing.assert_array_equal(g_closed(q, 0, cfg), (q == 0).astype(complex))
    np.testing.assert_array_equal(g_sc_closed(q, 0, cfg), (q == 0).astype(complex))
    for ki in range(-8, 8):
        np.testing.assert_allclose(g_closed(q, ki, cfg), g_sc_closed(q, ki, cfg), atol=1e-12)


def test_g_sc_matches_direct_small():
    cfg = cfg_of(8, 8, 8, 8, 1, 1)  # psi_reg = 1/8
    q = np.arange(-4, 4)
    direct = np.array([g_direct(0, (qq - 2) % 8, 2, cfg) for qq in q])
    np.testing.assert_allclose(g_sc_closed(q, 2, cfg), direct, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 32), st.integers(1, 12), st.sampled_from([4, 8, 16]),
       st.integers(0, 16), st.integers(0, 16))
def test_g_closed_equivalence_property(N, S, Mp, a, b):
    reg, long = sorted((min(a, Mp), min(b, Mp)))
    assert g_gap(cfg_of(N, Mp, Mp, S, reg, long)) <= 1e-10


def test_doppler_mass_is_one():
    cfg = cfg_of(16, 16, 16, 7, 3, 6)
    q = np.arange(-8, 8)
    for ki in range(-8, 8):
        assert abs(np.sum(np.abs(g_closed(q, ki, cfg)) ** 2) - 1) < 1e-12


def f_gap(cfg, N=8):
    M = cfg.M
    l = np.arange(M)
    worst = 0.0
    for li in range(cfg.M_prime):
        R, _ = delay_shift(li, cfg)
        for ki in range(-N // 2, N // 2):
            direct = f_direct(l[:, None], l[None, :], li, ki, cfg)
            ell = _wrap(l[None, :] - l[:, None] + R, M)
            closed = f_closed(ell, l[:, None], li, ki, cfg)
            assert np.all(np.isfinite(closed))
            worst = max(worst, np.abs(direct - closed).max())
    return worst


@pytest.mark.parametrize("M,Mp", [(4, 8), (6, 8), (8, 8), (2, 6), (10, 16)])
def test_f_closed_matches_direct(M, Mp):
    assert f_gap(cfg_of(8, M, Mp, 3, 1, 2)) <= 1e-10


def test_f_direct_fully_loaded_collapses_to_delta():
    cfg = cfg_of(8, 8, 8, 3, 1, 2)
    l = np.arange(8)
    for li in range(4):
        for ki in (-2, 0, 3):
            F = f_direct(l[:, None], l[None, :], li, ki, cfg)
            phase = np.exp(2j * np.pi * ki * l / (8 * 8))
            expect = np.zeros((8, 8), dtype=complex)
            expect[l, (l - li) % 8] = phase
            np.testing.assert_allclose(F, expect, atol=1e-12)


def test_f_special_cases():
    cfg = cfg_of(8, 4, 8, 3, 1, 2)
    assert abs(f_direct(2, 2, 0, 0, cfg) - 1) < 1e-12
    ell = np.arange(-2, 2)
    np.testing.assert_array_equal(f_closed(ell, 1, 2, 0, cfg), (ell == 0).astype(complex))
    # fractional delay spreads even without Doppler
    vals = f_closed(ell, 1, 1, 0, cfg)
    assert np.count_nonzero(np.abs(vals) > 1e-3) > 1


def test_delay_shift_exact_rational():
    cfg = cfg_of(8, 76, 128, 7, 9, 10)
    assert delay_shift(10, cfg) == (6, Fraction(760, 128) - 6)
    assert delay_shift(0, cfg) == (0, 0)


def chain(x, ch, cfg):
    return demodulate_frame(apply_channel(modulate_frame(x, cfg), ch, cfg), cfg)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.mark.parametrize("N,M,Mp,reg,long", [
    (16, 12, 16, 3, 5), (16, 16, 16, 3, 5), (16, 6, 10, 4, 6), (12, 10, 16, 5, 9),
])
def test_theorem1_matches_chain(N, M, Mp, reg, long):
    rng = np.random.default_rng(N * M)
    cfg = cfg_of(N, M, Mp, 7, reg, long)
    for _ in range(3):
        ch = random_channel(cfg, rng, n_paths=7, k_max=4)
        x = crandn(rng, N, M)
        assert nrmse(chain(x, ch, cfg), ior_theorem1(x, ch, cfg)) <= 1e-9


def test_identity_path():
    cfg = cfg_of(8, 6, 8, 3, 2, 3)
    x = crandn(np.random.default_rng(0), 8, 6)
    ch = ChannelRealization.from_arrays([1], [0], [0])
    np.testing.assert_allclose(ior_theorem1(x, ch, cfg), x, atol=1e-14)
    H = build_effective_channel(ch, cfg)
    assert abs(H.matrix - np.eye(48)).max() < 1e-14
    cfg2 = cfg.with_(M=8)
    x2 = crandn(np.random.default_rng(1), 8, 8)
    np.testing.assert_allclose(ior_corollary1(x2, ch, cfg2), x2, atol=1e-14)
    np.testing.assert_allclose(ior_corollary2(x2, ch, cfg2.with_(cp_long_samples=2)), x2, atol=1e-14)


def test_corollary_preconditions():
    cfg = cfg_of(8, 6, 8, 3, 2, 3)
    ch = ChannelRealization.from_arrays([1], [1], [1])
    with pytest.raises(ConfigError):
        ior_corollary1(np.zeros((8, 6)), ch, cfg)
    with pytest.raises(ConfigError):
        ior_corollary2(np.zeros((8, 8)), ch, cfg.with_(M=8))
    with pytest.raises(ConfigError):
        build_effective_channel(ch, cfg, variant="bogus")
    with pytest.raises(ConfigError):
        build_effective_channel(ch, cfg, variant="approx")
    with pytest.raises(ConfigError):
        ior_approx(np.zeros((8, 6)), ch, cfg, 9, 6)
    with pytest.raises(ConfigError):
        ior_approx(np.zeros((8, 6)), ch, cfg, 4, 0)


def test_corollaries_match_chain_and_each_other():
    rng = np.random.default_rng(11)
    cfg = cfg_of(16, 16, 16, 7, 3, 3)
    ch = random_channel(cfg, rng, n_paths=6, k_max=5)
    x = crandn(rng, 16, 16)
    y = chain(x, ch, cfg)
    assert nrmse(y, ior_corollary1(x, ch, cfg)) <= 1e-9
    np.testing.assert_allclose(ior_corollary1(x, ch, cfg), ior_corollary2(x, ch, cfg), atol=1e-12)
    np.testing.assert_allclose(ior_theorem1(x, ch, cfg), ior_corollary1(x, ch, cfg), atol=1e-12)


def test_operator_agrees_with_ior_functions():
    rng = np.random.default_rng(12)
    cfg = cfg_of(12, 8, 12, 5, 4, 6)
    ch = random_channel(cfg, rng, n_paths=5, k_max=3)
    x = crandn(rng, 12, 8)
    np.testing.assert_allclose(build_effective_channel(ch, cfg).apply(x), ior_theorem1(x, ch, cfg),
                               atol=1e-12)
    H = build_effective_channel(ch, cfg, 4, 4, variant="approx")
    np.testing.assert_allclose(H.apply(x), ior_approx(x, ch, cfg, 4, 4), atol=1e-12)
    cfg1 = cfg.with_(M=12)
    x1 = crandn(rng, 12, 12)
    H1 = build_effective_channel(ch, cfg1, 5, variant="corollary1")
    np.testing.assert_allclose(H1.apply(x1), ior_approx(x1, ch, cfg1, 5, 1, form="corollary1"),
                               atol=1e-12)


def test_truncation_sparsity():
    cfg = cfg_of(16, 12, 16, 7, 3, 5)
    rng = np.random.default_rng(13)
    one = random_channel(cfg, rng, n_paths=1, k_max=3)
    assert build_effective_channel(one, cfg, 4, 4, variant="approx").nnz_per_row().max() <= 16
    many = random_channel(cfg, rng, n_paths=5, k_max=3)
    H = build_effective_channel(many, cfg, 3, 2, variant="approx")
    assert H.nnz_per_row().max() <= 5 * 3 * 2


def test_approx_full_window_is_exact():
    rng = np.random.default_rng(14)
    cfg = cfg_of(16, 12, 16, 7, 3, 5)
    ch = random_channel(cfg, rng, n_paths=5, k_max=3)
    x = crandn(rng, 16, 12)
    np.testing.assert_array_equal(ior_approx(x, ch, cfg, 16, 12), ior_theorem1(x, ch, cfg))


def test_complexity_reduction():
    assert complexity_reduction((128, 76), 30, 30) == Fraction(128 * 76 - 900, 128 * 76)
    assert round(float(complexity_reduction((128, 76), 30, 30)), 4) == 0.9075
    assert complexity_reduction((16, 12), 16, 12) == 0
    assert complexity_reduction((16, 12), 1, 1) == 1 - Fraction(1, 192)
    with pytest.raises(ConfigError):
        complexity_reduction((16, 12), 17, 1)


def test_nrmse_convention():
    z = np.zeros((2, 2))
    assert nrmse(z, z) == 0.0
    assert nrmse(z, np.ones((2, 2))) == float("inf")
    assert nrmse(np.ones(4), np.zeros(4)) == 1.0


def test_cached_kernels_are_read_only():
    from cpotfs.ior import path_kernels
    cfg = cfg_of(8, 6, 8, 3, 2, 3)
    ch = ChannelRealization.from_arrays([1], [1], [1])
    _, Gm, Fm = next(path_kernels(ch, cfg))
    with pytest.raises(ValueError):
        Gm[0, 0] = 0
    with pytest.raises(ValueError):
        Fm[0, 0] = 0


def test_index_map_across_all_tuples_small():
    # every (k, kbar) pair of the direct sum maps onto one kernel sample
    cfg = cfg_of(8, 8, 8, 3, 2, 4)
    for k, kb, ki in itertools.product(range(8), range(8), range(-4, 4)):
        q = _wrap(kb - k + ki, 8)
        assert abs(g_direct(k, kb, ki, cfg) - g_closed(q, ki, cfg)) < 1e-12
