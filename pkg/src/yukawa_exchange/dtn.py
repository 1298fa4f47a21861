"""Discrete Dirichlet-to-Neumann maps, Steklov spectra and gamma-weighted norms."""
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sl
from scipy.optimize import brentq

from .boundary_ops import BoundaryOperator, assemble_adjoint_double_layer, assemble_single_layer
from .geometry import build_mesh, circle, gradient_ratio
from .oracles import disc_dtn_eig, riccati_log_derivative

SYM_TOL = 1e-6          # residual above which steklov_eigs flags a diagnostic failure
RESOLVED_LAMBDA = 2.0   # modes with lambda <= this form the "resolved" block for the residual
X_SLACK = 0.99
MEMBER_SLACK = 0.01


class ConditioningError(ArithmeticError):
    pass


class SpectralDiagnostic(UserWarning):
    pass


class MembershipError(ValueError):
    pass


SIDES = {"interior": "omega1", "omega1": "omega1", 1: "omega1",
         "exterior": "omega0", "omega0": "omega0", 0: "omega0"}


@dataclass(frozen=True, eq=False)
class DtnOperator:
    matrix: BoundaryOperator
    side: str
    gamma: float

    @property
    def mesh(self):
        return self.matrix.row_mesh

    @property
    def array(self):
        return self.matrix.matrix

    def __matmul__(self, h):
        return self.matrix.matrix @ h


def _factor(V):
    lu, piv = sl.lu_factor(V, check_finite=True)
    anorm = np.abs(V).sum(0).max()
    rcond, _ = sl.lapack.dgecon(lu, anorm, norm="1")
    if rcond < 1e-14:
        raise ConditioningError(f"single-layer matrix is numerically singular (cond ~ {1 / max(rcond, 1e-300):.2e})")
    return lu, piv


@lru_cache(maxsize=16)
def _dtn_cached(mesh, side, gamma, truncate):
    V = assemble_single_layer(mesh, gamma, truncate=truncate).matrix
    K = assemble_adjoint_double_layer(mesh, side, gamma, truncate=truncate).matrix
    lu, piv = _factor(V)
    # T = gamma (1/2 I + K') V^{-1}, i.e. V^T T^T = gamma (1/2 I + K')^T
    B = 0.5 * np.eye(mesh.n) + K
    T = gamma * sl.lu_solve((lu, piv), B.T, trans=1).T
    T.setflags(write=False)
    return T


def dtn_matrix(mesh, side, gamma, truncate=True):
    """T = gamma (1/2 I + K'_side) V^{-1}, with K' using the outward normal of `side`."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if side not in SIDES:
        raise ValueError(f"unknown side {side!r}")
    side = SIDES[side]
    T = _dtn_cached(mesh, side, float(gamma), bool(truncate))
    name = "T1" if side == "omega1" else "T0"
    op = BoundaryOperator(T, mesh, mesh, "values-to-values", float(gamma), name)
    return DtnOperator(op, "interior" if side == "omega1" else "exterior", float(gamma))


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Mass-orthonormal Steklov basis.

    `modes` are the eigenvectors of T orthonormalized in the mass pairing in
    ascending eigenvalue order, so the first k columns span the invariant
    subspace of the k lowest eigenvalues.  `residual` is the relative
    off-diagonal part of modes^T W T modes on the resolved block.
    """
    lambdas: np.ndarray
    modes: np.ndarray
    gamma: float
    mesh: object
    residual: float = 0.0
    resolved: int = 0
    max_imag: float = 0.0
    ok: bool = True
    info: dict = field(default_factory=dict)

    @property
    def weights(self):
        return self.mesh.weights

    def coeffs(self, h):
        return self.modes.T @ (self.weights * np.asarray(h))

    def synthesize(self, a):
        return self.modes @ a

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("j,lambda\n")
            for j, lam in enumerate(self.lambdas):
                f.write(f"{j},{float(lam)!r}\n")

    def save_modes(self, path):
        np.save(path, self.modes)


def _real_eigvecs(ev, X):
    """Real basis of the eigenvectors; complex pairs contribute real and imaginary parts."""
    Xr = np.real(X).copy()
    i = 0
    while i < len(ev):
        if ev[i].imag != 0 and i + 1 < len(ev):
            Xr[:, i], Xr[:, i + 1] = X[:, i].real, X[:, i].imag
            i += 2
        else:
            i += 1
    return Xr


@lru_cache(maxsize=16)
def _eigs_cached(dtn):
    T = dtn.array
    w = dtn.mesh.weights
    ev, X = sl.eig(T)
    order = np.lexsort((np.arange(len(ev)), ev.real))
    ev, X = ev[order], X[:, order]
    sw = np.sqrt(w)
    Q, _ = np.linalg.qr(sw[:, None] * _real_eigvecs(ev, X))
    H = Q / sw[:, None]
    lam = ev.real.copy()
    k = max(1, int(np.sum(lam <= RESOLVED_LAMBDA)))
    B = H[:, :k].T @ (w[:, None] * (T @ H[:, :k]))
    off = B - np.diag(np.diag(B))
    residual = float(np.abs(off).max() / max(abs(lam[k - 1]), 1e-300)) if k > 1 else 0.0
    max_imag = float(np.abs(ev.imag[:k]).max())
    for a in (lam, H):
        a.setflags(write=False)
    return lam, H, residual, k, max_imag


def steklov_eigs(T, mass=None, strict=False):
    """Ascending Steklov eigenpairs with mass-orthonormal modes.

    The Nystrom T is not exactly mass-symmetric (quadrature, and much more so
    near corners), so T itself is diagonalized and its eigenvectors are
    orthonormalized in ascending order.  A residual above SYM_TOL on the
    resolved block is reported as a diagnostic (an error when `strict`).
    """
    lam, H, residual, k, max_imag = _eigs_cached(T)
    if mass is not None:
        m = mass.matrix if hasattr(mass, "matrix") else np.asarray(mass)
        if not np.allclose(np.diag(m), T.mesh.weights, rtol=1e-14, atol=0):
            raise ValueError("mass matrix does not belong to the operator's mesh")
    if lam[0] <= 0:
        raise ArithmeticError(f"non-positive Steklov eigenvalue {lam[0]:.3e}")
    ok = residual <= SYM_TOL
    if not ok:
        msg = f"symmetrization residual {residual:.2e} exceeds {SYM_TOL:.0e} on the lowest {k} modes"
        if strict:
            raise ArithmeticError(msg)
        warnings.warn(msg, SpectralDiagnostic, stacklevel=2)
    return SpectralBasis(lam, H, T.gamma, T.mesh, residual, k, max_imag, ok)


def spectral_basis(mesh, gamma, side="interior", strict=False):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SpectralDiagnostic)
        return steklov_eigs(dtn_matrix(mesh, side, gamma), strict=strict)


# -- norms ----------------------------------------------------------------------

def sobolev_norm(h, s, basis):
    """(gamma^{-2s} sum_j lambda_j^{2s} |a_j|^2)^{1/2}, a_j the mass-pairing coefficients."""
    if not -0.5 <= s <= 0.5:
        raise ValueError("s must lie in [-1/2, 1/2]")
    a = basis.coeffs(h)
    return float(np.sqrt(basis.gamma ** (-2 * s) * np.sum(basis.lambdas ** (2 * s) * np.abs(a) ** 2)))


def rayleigh_quotient(h, basis):
    a2 = np.abs(basis.coeffs(h)) ** 2
    tot = np.sum(a2)
    if tot == 0:
        raise ValueError("Rayleigh quotient of the zero function")
    return float(np.sum(basis.lambdas * a2) / tot)


def l2_norm(h, mesh):
    return float(np.sqrt(np.sum(mesh.weights * np.abs(h) ** 2)))


# -- X_gamma(M) -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class XSubspace:
    basis: np.ndarray          # mass-orthonormal columns
    M: float
    gamma: float
    mesh: object
    frequencies: np.ndarray

    @property
    def dim(self):
        return self.basis.shape[1]

    def sample(self, rng, count=1):
        """Random members: Gaussian coefficients, L2-normalized."""
        c = rng.standard_normal((self.dim, count))
        c /= np.linalg.norm(c, axis=0, keepdims=True)
        return (self.basis @ c).T


def is_member(h, mesh, M):
    return gradient_ratio(mesh, h) <= M * (1 + MEMBER_SLACK)


def build_x_subspace(mesh, gamma, M, slack=X_SLACK):
    """Arc-length Fourier modes with frequency <= slack * M, mass-orthonormalized."""
    if M > 1.0 / gamma:
        raise ValueError("X_gamma(M) needs M <= 1/gamma")
    L = mesh.length
    kmax = int(np.floor(slack * M * L / (2 * np.pi)))
    s = mesh.arclength
    cols, freqs = [np.ones(mesh.n)], [0.0]
    for k in range(1, kmax + 1):
        om = 2 * np.pi * k / L
        cols += [np.cos(om * s), np.sin(om * s)]
        freqs += [om, om]
    F = np.stack(cols, 1)
    sw = np.sqrt(mesh.weights)
    Q, R = np.linalg.qr(sw[:, None] * F)
    Q = Q * np.sign(np.diag(R))[None]
    B = Q / sw[:, None]
    keep = [j for j in range(B.shape[1]) if is_member(B[:, j], mesh, M)]
    if not keep:
        raise ValueError("X_gamma(M) is empty on this mesh")
    return XSubspace(B[:, keep], float(M), float(gamma), mesh, np.array(freqs)[keep])


# -- property checks -----------------------------------------------------------------

def _require_member(h, mesh, M, override):
    if M is not None and not override and not is_member(h, mesh, M):
        raise MembershipError(f"function is not in X_gamma(M) for M = {M} "
                              f"(gradient ratio {gradient_ratio(mesh, h):.3g})")


def dtn_defect(h, T, basis, M=None, override=False):
    """||(T - I) h||_{-1/2} / ||h||_{-1/2}."""
    _require_member(h, basis.mesh, M, override)
    r = T @ h - h
    return sobolev_norm(r, -0.5, basis) / sobolev_norm(h, -0.5, basis)


@dataclass(frozen=True)
class ConcentrationReport:
    sup_ratio: float
    sup_bound: float
    disc_ratio: float
    disc_bound: float
    radius: float

    @property
    def passed(self):
        return self.sup_ratio <= self.sup_bound and self.disc_ratio <= self.disc_bound


def vertex_concentration_check(h, mesh, gamma, a, M, C=4.0):
    """sup|h| / ||h|| against C(1 + M^{1/2}) and the largest vertex-disc mass
    fraction against min(C (1 + M) gamma^a, 1)."""
    if len(mesh.vertices) == 0:
        raise ValueError("mesh has no vertices")
    h = np.asarray(h)
    n2 = np.sum(mesh.weights * np.abs(h) ** 2)
    sup = float(np.abs(h).max() / np.sqrt(n2))
    rad = gamma ** a
    frac = 0.0
    for v in mesh.vertices:
        inside = np.hypot(*(mesh.nodes - v).T) < rad
        frac = max(frac, float(np.sum(mesh.weights[inside] * np.abs(h[inside]) ** 2) / n2))
    return ConcentrationReport(sup, C * (1 + np.sqrt(M)), frac, min(C * (1 + M) * rad, 1.0), rad)


@dataclass(frozen=True)
class LowerBoundReport:
    ratio: float
    bound: float = 0.5

    @property
    def passed(self):
        return self.ratio >= self.bound


def hminus_lower_bound_check(h, basis, gamma, M=None, override=False):
    """||h||_{-1/2} / (gamma^{1/2} ||h||_{L2}), asserted >= 1/2."""
    _require_member(h, basis.mesh, M, override)
    ratio = sobolev_norm(h, -0.5, basis) / (np.sqrt(gamma) * l2_norm(h, basis.mesh))
    return LowerBoundReport(float(ratio))


@dataclass(frozen=True)
class RobinReport:
    n: np.ndarray
    lambdas: np.ndarray
    residuals: np.ndarray
    kappa_roots: np.ndarray
    discrete: np.ndarray = None

    @property
    def max_residual(self):
        return float(np.max(self.residuals))


def robin_steklov_check_disc(gamma, n_max, R=1.0, lambdas=None):
    """Robin/Steklov correspondence on the disc.

    For each angular order n the DtN eigenvalue lambda (closed form unless
    `lambdas` is given) must make w = lambda/gamma a Robin parameter for
    which -gamma^{-2} is an eigenvalue of -Lap: the regular radial solution
    with kappa = 1/gamma satisfies u'(R) = w u(R).  The residual is
    |gamma u'(R)/u(R) - lambda| / lambda from a numerical ODE solve, and the
    root kappa of u'(R)/u(R) = w is located with Brent's method.
    """
    ns = np.arange(n_max + 1)
    lam = np.array([disc_dtn_eig(n, R, gamma) for n in ns]) if lambdas is None else np.asarray(lambdas)
    res, roots = [], []
    for n, l in zip(ns, lam):
        q = riccati_log_derivative(n, 1.0 / gamma, R)
        res.append(abs(gamma * q - l) / l)
        w = l / gamma
        f = lambda k: riccati_log_derivative(n, k, R, rtol=1e-10) - w
        roots.append(brentq(f, 0.5 / gamma, 2.0 / gamma, xtol=1e-13 / gamma))
    return RobinReport(ns, lam, np.array(res), np.array(roots))


def disc_mode_eigenvalues(mesh, T, n_max):
    """Rayleigh quotients of cos(n theta) on a circle mesh (exact eigenvalues up to discretization)."""
    th = np.arctan2(mesh.nodes[:, 1], mesh.nodes[:, 0])
    out = []
    for n in range(n_max + 1):
        f = np.cos(n * th)
        Tf = T @ f
        out.append(float(np.sum(mesh.weights * f * Tf) / np.sum(mesh.weights * f * f)))
    return np.array(out)


def disc_dtn_errors(gamma, n_nodes=1024, n_max=16, R=1.0, side="interior"):
    mesh = build_mesh(circle(R), n_nodes)
    lam = spectral_basis(mesh, gamma, side).lambdas
    # sorted spectrum: n = 0 once, then each n > 0 twice (cos and sin)
    got = np.array([lam[0]] + [0.5 * (lam[2 * n - 1] + lam[2 * n]) for n in range(1, n_max + 1)])
    ref = np.array([disc_dtn_eig(n, R, gamma, side) for n in range(n_max + 1)])
    return got, ref, np.abs(got - ref) / np.abs(ref)
