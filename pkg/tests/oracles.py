"""Arbitrary-precision reference implementations, written from the closed forms
and sharing no code with the package."""
from __future__ import annotations

import mpmath as mp

mp.mp.dps = 50


def h(x):
    x = mp.mpf(x)
    if x == 0 or x == 1:
        return mp.mpf(0)
    return -x * mp.log(x, 2) - (1 - x) * mp.log(1 - x, 2)


def H4(x):
    x = mp.mpf(x)
    out = mp.mpf(0)
    if x > 0:
        out -= x * mp.log(x / 3, 2)
    if x < 1:
        out -= (1 - x) * mp.log(1 - x, 2)
    return out


def delta(total, eps):
    return mp.sqrt(mp.mpf(total) / 2 * mp.log(1 / mp.mpf(eps)))


def corrected(count, total, k, p, eps, sign):
    val = mp.exp(mp.mpf(k)) / mp.mpf(p) * (mp.mpf(count) + sign * delta(total, eps))
    return max(mp.mpf(0), val) if sign < 0 else val


def tau(n, mus, ps):
    return mp.fsum(mp.mpf(p) * mp.exp(-mp.mpf(k)) * mp.mpf(k) ** n / mp.factorial(n) for k, p in zip(mus, ps))


def vacuum_upper(m_k, m_tot, n_tot, k, p_k, mus, ps, eps1, eps2, d):
    t0 = tau(0, mus, ps)
    bracket = t0 * mp.exp(mp.mpf(k)) / mp.mpf(p_k) * (mp.mpf(m_k) + delta(m_tot, eps2)) + delta(n_tot, eps1)
    return mp.mpf(d) / (d - 1) * bracket


def vacuum_lower(n1, n2, mu1, mu2, p1, p2, eps1):
    tot = mp.mpf(n1) + n2
    n1_hi = corrected(n1, tot, mu1, p1, eps1, +1)
    n2_lo = corrected(n2, tot, mu2, p2, eps1, -1)
    t0 = tau(0, (mu1, mu2), (p1, p2))
    val = t0 * (mp.mpf(mu1) * n2_lo - mp.mpf(mu2) * n1_hi) / (mp.mpf(mu1) - mu2)
    return max(mp.mpf(0), val)


def single_photon_lower(n1, n2, mu1, mu2, p1, p2, eps1, d0_upper):
    mu1, mu2 = mp.mpf(mu1), mp.mpf(mu2)
    tot = mp.mpf(n1) + n2
    n1_hi = corrected(n1, tot, mu1, p1, eps1, +1)
    n2_lo = corrected(n2, tot, mu2, p2, eps1, -1)
    t0 = tau(0, (mu1, mu2), (p1, p2))
    t1 = tau(1, (mu1, mu2), (p1, p2))
    val = t1 * mu1 / (mu2 * (mu1 - mu2)) * (n2_lo - mu2**2 / mu1**2 * n1_hi
                                            - (mu1**2 - mu2**2) / mu1**2 * mp.mpf(d0_upper) / t0)
    return max(mp.mpf(0), val)


def gamma(a, b, c, d_, const=21):
    a, b, c, d_ = map(mp.mpf, (a, b, c, d_))
    if b == 0 or b == 1:
        return mp.mpf(0)
    arg = (c + d_) / (c * d_ * (1 - b) * b) * (mp.mpf(const) / a) ** 2
    return mp.sqrt((c + d_) * (1 - b) * b / (c * d_ * mp.log(2)) * mp.log(arg, 2))


def lambda_ec(n_z, qber, d, f):
    ent = h(qber) if d == 2 else H4(qber)
    return mp.mpf(n_z) * mp.mpf(f) * ent
