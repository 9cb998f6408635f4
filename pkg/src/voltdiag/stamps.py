"""Vectorized constant-power device stamps in Cartesian coordinates.

For a device with complex power ``p + jq`` at bus voltage ``a + jb`` the
current is ``conj(S / V)``::

    i_r = (p a + q b) / m,   i_i = (p b - q a) / m,   m = a^2 + b^2

Loads draw this current, PV generators inject it. All functions accept
equal-length 1-d arrays and return arrays of the same length.
"""

import numpy as np


def currents(p, q, a, b):
    m = a * a + b * b
    return (p * a + q * b) / m, (p * b - q * a) / m


def current_partials(p, q, a, b):
    """First derivatives ``(dir/da, dir/db, dii/da, dii/db, dir/dq, dii/dq)``."""
    m = a * a + b * b
    ir = (p * a + q * b) / m
    ii = (p * b - q * a) / m
    return (
        (p - 2.0 * a * ir) / m,
        (q - 2.0 * b * ir) / m,
        (-q - 2.0 * a * ii) / m,
        (p - 2.0 * b * ii) / m,
        b / m,
        -a / m,
    )


def _second(alpha, beta, a, b, m, num):
    # Hessian of (alpha*a + beta*b) / m with respect to (a, b)
    m2 = m * m
    m3 = m2 * m
    haa = (-4.0 * a * alpha - 2.0 * num) / m2 + 8.0 * a * a * num / m3
    hab = (-2.0 * b * alpha - 2.0 * a * beta) / m2 + 8.0 * a * b * num / m3
    hbb = (-4.0 * b * beta - 2.0 * num) / m2 + 8.0 * b * b * num / m3
    return haa, hab, hbb


def weighted_hessian(p, q, a, b, w_r, w_i):
    """Second derivatives of ``w_r*i_r + w_i*i_i``.

    Returns ``(h_aa, h_ab, h_bb, h_qa, h_qb)``; the ``q`` rows apply only when
    ``q`` is a decision variable (PV devices). ``h_qq`` is identically zero.
    """
    m = a * a + b * b
    num_r = p * a + q * b
    num_i = p * b - q * a
    raa, rab, rbb = _second(p, q, a, b, m, num_r)
    iaa, iab, ibb = _second(-q, p, a, b, m, num_i)
    m2 = m * m
    # d/dq of i_r is b/m, of i_i is -a/m
    qa = w_r * (-2.0 * a * b / m2) + w_i * (-1.0 / m + 2.0 * a * a / m2)
    qb = w_r * (1.0 / m - 2.0 * b * b / m2) + w_i * (2.0 * a * b / m2)
    return (
        w_r * raa + w_i * iaa,
        w_r * rab + w_i * iab,
        w_r * rbb + w_i * ibb,
        qa,
        qb,
    )


def scatter_add(index, values, size):
    """Sum ``values`` into ``size`` slots; the sparse-assembly inner loop."""
    return np.bincount(index, weights=values, minlength=size)
