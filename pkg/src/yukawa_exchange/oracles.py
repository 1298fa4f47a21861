"""Reference solutions that do not go through the boundary integral code.

* separation of variables on the disc (scipy's Bessel I_n, K_n of general order),
* the radial Riccati equation for u'/u, integrated numerically,
* a P1 finite element Steklov solve on a truncated sector.
"""
import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import eigsh
from scipy.special import ive, kve


def _i_ratio(n, z):
    # I_n'(z) / I_n(z) via I_n' = I_{n+1} + (n/z) I_n
    return ive(n + 1, z) / ive(n, z) + n / z


def _k_ratio(n, z):
    # K_n'(z) / K_n(z) via K_n' = -K_{n+1} + (n/z) K_n
    return -kve(n + 1, z) / kve(n, z) + n / z


def disc_single_layer_eig(n, R, gamma):
    z = R / gamma
    return R * ive(n, z) * kve(n, z)


def disc_double_layer_eig(n, R, gamma):
    """Eigenvalue of 1/2 I + K' (interior normal) on the mode e^{in theta}."""
    z = R / gamma
    n = abs(n)
    dI = ive(n + 1, z) + n / z * ive(n, z)
    return z * dI * kve(n, z)


def disc_dtn_eig(n, R, gamma, side="interior"):
    z = R / gamma
    n = abs(n)
    if side == "interior":
        return _i_ratio(n, z)
    return -_k_ratio(n, z)


def riccati_log_derivative(n, kappa, R, rtol=1e-12):
    """u'(R)/u(R) for the solution of u'' + u'/r - (n^2/r^2 + kappa^2) u = 0 regular at 0.

    v = u'/u satisfies v' = -v^2 - v/r + n^2/r^2 + kappa^2; the start value
    comes from the ascending series at a small radius.
    """
    n = abs(int(n))
    r0 = min(1e-2 / kappa, 1e-2 * R)
    x = kappa * r0
    # log-derivative of sum_k (x^2/4)^k / (k! (n+1)_k) times (x/2)^n
    s, ds, term = 1.0, 0.0, 1.0
    for k in range(1, 8):
        term *= (x * x / 4.0) / (k * (n + k))
        s += term
        ds += term * 2 * k / r0
    v0 = n / r0 + ds / s

    def rhs(r, v):
        return -v * v - v / r + n * n / (r * r) + kappa * kappa

    sol = solve_ivp(rhs, (r0, R), [v0], method="LSODA", rtol=rtol, atol=1e-13)
    return float(sol.y[0, -1])


def sector_steklov(angle=np.pi / 2, radius=20.0, nr=240, nt=48, grade=2.0):
    """Lowest Steklov eigenvalue of (-Lap + 1) u = 0 on a truncated sector.

    Steklov condition du/dn = lambda u on both straight sides, u = 0 on the arc.
    P1 elements on a polar mesh, radially graded toward the vertex.
    """
    r = radius * np.linspace(0.0, 1.0, nr + 1) ** grade
    th = np.linspace(0.0, angle, nt + 1)
    # node 0 is the vertex; node (i, j) for i >= 1 is 1 + (i-1)(nt+1) + j
    idx = lambda i, j: 1 + (i - 1) * (nt + 1) + j
    pts = [(0.0, 0.0)]
    for i in range(1, nr + 1):
        for j in range(nt + 1):
            pts.append((r[i] * np.cos(th[j]), r[i] * np.sin(th[j])))
    pts = np.array(pts)
    tris = []
    for j in range(nt):
        tris.append((0, idx(1, j), idx(1, j + 1)))
    for i in range(1, nr):
        for j in range(nt):
            a, b, c, d = idx(i, j), idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1)
            tris += [(a, c, d), (a, d, b)]
    tris = np.array(tris)
    N = len(pts)

    P = pts[tris]                                     # (T, 3, 2)
    e1, e2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    # gradients of barycentric functions
    G = np.empty((len(tris), 3, 2))
    for k in range(3):
        a, b = P[:, (k + 1) % 3], P[:, (k + 2) % 3]
        edge = b - a
        G[:, k] = np.stack([edge[:, 1], -edge[:, 0]], -1)
        sgn = np.sign(np.sum(G[:, k] * (P[:, k] - a), axis=1))
        G[:, k] *= sgn[:, None] / (2 * area[:, None])
    stiff = np.einsum("tkd,tld->tkl", G, G) * area[:, None, None]
    mass = (np.ones((3, 3)) + np.eye(3))[None] * (area / 12.0)[:, None, None]
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, 3).ravel()
    K = sp.coo_matrix(((stiff + mass).ravel(), (rows, cols)), shape=(N, N)).tocsr()

    # boundary mass on the two straight sides
    brow, bcol, bval = [], [], []
    for j in (0, nt):
        chain = [0] + [idx(i, j) for i in range(1, nr + 1)]
        for a, b in zip(chain[:-1], chain[1:]):
            h = np.hypot(*(pts[b] - pts[a]))
            for (p, q), v in zip(((a, a), (a, b), (b, a), (b, b)), (h / 3, h / 6, h / 6, h / 3)):
                brow.append(p)
                bcol.append(q)
                bval.append(v)
    B = sp.coo_matrix((bval, (brow, bcol)), shape=(N, N)).tocsr()

    free = np.array([k for k in range(N) if not (k >= idx(nr, 0))])
    K = K[free][:, free]
    B = B[free][:, free]
    mu = eigsh(B, k=1, M=K, which="LA", return_eigenvectors=False)
    return float(1.0 / mu[0])
