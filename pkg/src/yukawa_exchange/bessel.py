"""Modified Bessel functions K0, K1 and the Yukawa kernels built on them.

Three regimes are used:

* ``z < 2``: power series around the origin,
* ``2 <= z <= 20``: Chebyshev interpolants of ``sqrt(z) e^z K_nu(z)``, whose
  samples come from the integral ``e^z K_nu(z) = int_0^inf exp(-z (cosh t - 1)) cosh(nu t) dt``
  evaluated with the (double-exponentially convergent) trapezoidal rule,
* ``z > 20``: Hankel's asymptotic expansion of the scaled function.
"""
from dataclasses import dataclass

import numpy as np

EULER_GAMMA = 0.57721566490153286061
SERIES_MAX = 2.0
ASYMPTOTIC_MIN = 20.0

_CHEB_PIECES = ((2.0, 4.0), (4.0, 8.0), (8.0, 20.0))
_CHEB_DEGREE = 40
_N_SERIES = 24
_N_ASYMPTOTIC = 30


class DomainError(ValueError):
    pass


class SingularityError(ValueError):
    pass


@dataclass(frozen=True)
class KernelEval:
    value: float
    scaled_value: float
    regime: str


def regime_of(z):
    if z < SERIES_MAX:
        return "series"
    if z <= ASYMPTOTIC_MIN:
        return "intermediate"
    return "asymptotic"


def _check(z):
    z = np.asarray(z, dtype=float)
    if np.any(~(z > 0)):
        raise DomainError("modified Bessel K requires z > 0")
    return z


# -- small argument ---------------------------------------------------------

def _series(z):
    """K0 and K1 from the ascending series (valid and accurate for z < 2)."""
    q = 0.25 * z * z
    lg = np.log(0.5 * z)
    i0 = np.zeros_like(z)
    i1 = np.zeros_like(z)
    s0 = np.zeros_like(z)
    s1 = np.zeros_like(z)
    t0 = np.ones_like(z)      # q^k / (k!)^2
    t1 = np.ones_like(z)      # q^k / (k! (k+1)!)
    harm = 0.0
    for k in range(_N_SERIES):
        if k > 0:
            t0 = t0 * q / (k * k)
            t1 = t1 * q / (k * (k + 1))
            harm += 1.0 / k
        i0 += t0
        i1 += t1
        s0 += harm * t0
        s1 += (2.0 * harm + 1.0 / (k + 1)) * t1
    i1 = 0.5 * z * i1
    k0 = -(lg + EULER_GAMMA) * i0 + s0
    # psi(k+1) + psi(k+2) = 2 H_k + 1/(k+1) - 2 gamma_E
    k1 = 1.0 / z + lg * i1 - 0.25 * z * (s1 - 2.0 * EULER_GAMMA * (i1 / (0.5 * z)))
    return k0, k1


# -- intermediate argument ----------------------------------------------------

def scaled_k_quadrature(z, nu, h=0.04, tmax=5.0):
    """e^z K_nu(z) by the trapezoidal rule on the cosh integral.

    Accurate to roughly machine precision for z >= 1; used to build the
    Chebyshev tables and as an independent cross-check.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    t = np.arange(0.0, tmax + h / 2, h)
    w = np.full(t.shape, h)
    w[0] = h / 2
    e = np.exp(-np.outer(z, np.cosh(t) - 1.0))
    return e @ (w * np.cosh(nu * t))


def _cheb_tables():
    tables = []
    k = np.arange(_CHEB_DEGREE + 1)
    x = np.cos(np.pi * (k + 0.5) / (_CHEB_DEGREE + 1))
    for lo, hi in _CHEB_PIECES:
        z = 0.5 * (hi + lo) + 0.5 * (hi - lo) * x
        coefs = []
        for nu in (0, 1):
            f = np.sqrt(z) * scaled_k_quadrature(z, nu)
            coefs.append(np.polynomial.chebyshev.chebfit(x, f, _CHEB_DEGREE))
        tables.append((lo, hi, coefs[0], coefs[1]))
    return tables


_TABLES = _cheb_tables()


def _intermediate(z):
    k0e = np.empty_like(z)
    k1e = np.empty_like(z)
    for i, (lo, hi, c0, c1) in enumerate(_TABLES):
        if i == len(_TABLES) - 1:
            sel = z >= lo
        else:
            sel = (z >= lo) & (z < hi)
        if not np.any(sel):
            continue
        zz = z[sel]
        x = (2.0 * zz - (hi + lo)) / (hi - lo)
        rs = 1.0 / np.sqrt(zz)
        k0e[sel] = np.polynomial.chebyshev.chebval(x, c0) * rs
        k1e[sel] = np.polynomial.chebyshev.chebval(x, c1) * rs
    return k0e, k1e


# -- large argument -----------------------------------------------------------

def _asymptotic(z):
    out = []
    for nu in (0, 1):
        mu = 4.0 * nu * nu
        term = np.ones_like(z)
        total = np.ones_like(z)
        for k in range(1, _N_ASYMPTOTIC + 1):
            term = term * (mu - (2 * k - 1) ** 2) / (8.0 * k * z)
            total += term
        out.append(np.sqrt(np.pi / (2.0 * z)) * total)
    return out[0], out[1]


# -- public evaluators ----------------------------------------------------------

def k0k1e(z):
    """Exponentially scaled pair (e^z K0(z), e^z K1(z)) for array z > 0."""
    z = _check(z)
    shape = z.shape
    z = z.ravel()
    k0e = np.empty_like(z)
    k1e = np.empty_like(z)
    lo = z < SERIES_MAX
    hi = z > ASYMPTOTIC_MIN
    mid = ~(lo | hi)
    if np.any(lo):
        a, b = _series(z[lo])
        ez = np.exp(z[lo])
        k0e[lo] = a * ez
        k1e[lo] = b * ez
    if np.any(mid):
        k0e[mid], k1e[mid] = _intermediate(z[mid])
    if np.any(hi):
        k0e[hi], k1e[hi] = _asymptotic(z[hi])
    return k0e.reshape(shape), k1e.reshape(shape)


def k0k1(z):
    """Unscaled pair (K0(z), K1(z)); underflows to 0 for z beyond ~700."""
    z = _check(z)
    shape = z.shape
    z = z.ravel()
    k0 = np.empty_like(z)
    k1 = np.empty_like(z)
    lo = z < SERIES_MAX
    if np.any(lo):
        k0[lo], k1[lo] = _series(z[lo])
    if np.any(~lo):
        a, b = k0k1e(z[~lo])
        ez = np.exp(-z[~lo])
        k0[~lo] = a * ez
        k1[~lo] = b * ez
    return k0.reshape(shape), k1.reshape(shape)


def bessel_k0(z):
    return _unwrap(z, k0k1(z)[0])


def bessel_k1(z):
    return _unwrap(z, k0k1(z)[1])


def bessel_k0e(z):
    return _unwrap(z, k0k1e(z)[0])


def bessel_k1e(z):
    return _unwrap(z, k0k1e(z)[1])


def _unwrap(z, out):
    return float(out) if np.ndim(z) == 0 else out


def k0_eval(z):
    z = float(z)
    v, _ = k0k1(z)
    e, _ = k0k1e(z)
    return KernelEval(float(v), float(e), regime_of(z))


def k1_eval(z):
    z = float(z)
    _, v = k0k1(z)
    _, e = k0k1e(z)
    return KernelEval(float(v), float(e), regime_of(z))


# -- kernels ----------------------------------------------------------------------

def greens(r, gamma):
    """G(r) = K0(r/gamma) / (2 pi), vectorized over r > 0."""
    return k0k1(np.asarray(r, dtype=float) / gamma)[0] / (2 * np.pi)


def fundamental_solution(x, gamma):
    r = float(np.hypot(*np.asarray(x, dtype=float)))
    if r == 0.0:
        raise SingularityError("fundamental solution is singular at the origin")
    return float(greens(r, gamma))


def np_kernel(x, n_x, y, gamma):
    """K(x, y) = 2 d/dn_x G(x - y) for x != y."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r = float(np.hypot(*d))
    if r == 0.0:
        raise SingularityError("kernel is singular at x = y; use the panel quadrature")
    k1 = float(k0k1(r / gamma)[1])
    return float(-k1 * np.dot(d, n_x) / (np.pi * gamma * r))


def np_kernel_grad_y(x, n_x, y, gamma):
    """Gradient of np_kernel with respect to y."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    n_x = np.asarray(n_x, dtype=float)
    r = float(np.hypot(*d))
    if r == 0.0:
        raise SingularityError("kernel is singular at x = y")
    z = r / gamma
    k0, k1 = (float(v) for v in k0k1(z))
    dn = float(np.dot(d, n_x))
    # K = -(1/(pi gamma)) * g(r) * dn with g(r) = K1(r/gamma) / r
    # g'(r) = -(K0(z) + 2 K1(z)/z) / (gamma r)   [K1' = -K0 - K1/z]
    g = k1 / r
    gp = -(k0 + 2.0 * k1 / z) / (gamma * r)
    grad_x = -(gp * dn * d / r + g * n_x) / (np.pi * gamma)
    return -grad_x
