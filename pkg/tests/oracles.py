"""Independent recomputation oracles used by the test suite.

The delay formulas are re-evaluated with 50-digit arbitrary-precision
arithmetic, entirely separately from the implementation under test.
"""

import mpmath

mpmath.mp.dps = 50


def mp_total(alpha, rate, beta, speed):
    return mpmath.mpf(alpha) / mpmath.mpf(rate) + mpmath.mpf(beta) / mpmath.mpf(speed)


def mp_sdp_overhead(p):
    total = mpmath.mpf(0)
    for i in range(4):
        total += p.hop_counts[i] * mp_total(p.alpha_bits[i], p.rate_bps, p.beta_m[i], p.speed_mps)
    return total


def mp_lte_delay(p):
    return mp_total(p.alpha_bits[4], p.rate_bps, p.beta_m[4], p.speed_mps) + mp_total(
        p.alpha_bits[5], p.rate_bps, p.beta_m[5], p.speed_mps
    )


def mp_init_delay(p):
    return mp_sdp_overhead(p) + mp_lte_delay(p)


def mp_e2e_delay(p):
    return (
        mp_init_delay(p)
        + mp_total(p.alpha_bits[6], p.rate_bps, p.beta_m[6], p.speed_mps)
        + mp_total(p.alpha_bits[7], p.rate_bps, p.beta_m[7], p.speed_mps)
    )


def rel_err(value, reference):
    reference = mpmath.mpf(reference)
    if reference == 0:
        return abs(mpmath.mpf(value))
    return abs((mpmath.mpf(value) - reference) / reference)
