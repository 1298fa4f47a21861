"""Nystrom discretization of the Yukawa single-layer and adjoint double-layer operators.

Densities are nodal values on panel Gauss-Legendre nodes.  For a target far
from a source panel the plain panel rule is used.  For a target on or near a
panel, the panel contribution is computed by product integration: the
kernel is integrated against the Lagrange basis of the panel with a fine
composite rule graded geometrically toward the singular (or closest) point
and subdivided so that every piece is at most ~2 gamma long.  This handles
the logarithmic singularity of K0, the near-singular corner interactions and
the O(gamma) variation of the kernel with one mechanism.
"""
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .bessel import k0k1
from .geometry import MATCH_TOL, lagrange_matrix

TRUNCATION = 40.0      # entries with |x - y| > 40 gamma are dropped
NEAR = 1.0             # product integration when dist(x, panel) < NEAR * panel length
SUBLEN = 2.0           # fine subintervals at most SUBLEN * gamma long
FINE_ORDER = 12
CANCEL = 1e-5          # radius below which the smooth-curve double-layer limit is used
GRADE_FLOOR = 1e-10    # innermost graded interval around a singular point (reference units)

_FX, _FW = np.polynomial.legendre.leggauss(FINE_ORDER)


@dataclass(frozen=True, eq=False)
class BoundaryOperator:
    matrix: np.ndarray
    row_mesh: object
    col_mesh: object
    convention: str           # "density-to-values" or "values-to-values"
    gamma: float
    name: str = ""

    def __matmul__(self, x):
        return self.matrix @ x

    @property
    def shape(self):
        return self.matrix.shape


def _kernels(x, nx, y, gamma, curv=None):
    """Single-layer and adjoint double-layer kernels for broadcastable point arrays.

    When `curv` (target curvature) is given, the points lie on the target's own
    smooth piece; below CANCEL the double-layer kernel is replaced by its limit
    -curv / (4 pi), since (x - y) . n_x loses all digits to cancellation there.
    """
    d = x - y
    # points of the innermost graded interval can round onto the target
    r = np.maximum(np.hypot(d[..., 0], d[..., 1]), 1e-300)
    k0, k1 = k0k1(r / gamma)
    g = k0 / (2 * np.pi)
    dn = (d[..., 0] * nx[..., 0] + d[..., 1] * nx[..., 1]) / r
    kp = -k1 * dn / (2 * np.pi * gamma)
    if curv is not None:
        kp = np.where(r < CANCEL, -curv / (4 * np.pi), kp)
    return g, kp


def _rule(breaks):
    breaks = np.unique(np.clip(breaks, -1.0, 1.0))
    breaks = breaks[np.concatenate([[True], np.diff(breaks) > 1e-16])]
    a, b = breaks[:-1], breaks[1:]
    h = 0.5 * (b - a)
    tau = (0.5 * (a + b))[:, None] + h[:, None] * _FX[None]
    w = h[:, None] * _FW[None]
    return tau.ravel(), w.ravel()


def _graded(center, floor):
    """Breakpoints at center +- (distance to the ends) * 2^-j down to `floor`."""
    out = [center]
    for end in (-1.0, 1.0):
        span = abs(end - center)
        s = span
        while s > floor:
            out.append(center + np.sign(end - center) * s)
            s *= 0.5
        out.append(center + np.sign(end - center) * s)
    return np.array(out)


@lru_cache(maxsize=None)
def _self_template(order, k, m):
    xk = np.polynomial.legendre.leggauss(order)[0]
    br = np.concatenate([_graded(xk[k], GRADE_FLOOR), np.linspace(-1, 1, m + 1)])
    tau, w = _rule(br)
    return tau, w, lagrange_matrix(xk, tau)


def _near_rule(order, center, floor, m):
    xk = np.polynomial.legendre.leggauss(order)[0]
    br = np.concatenate([_graded(center, floor), np.linspace(-1, 1, m + 1)])
    tau, w = _rule(br)
    return tau, w, lagrange_matrix(xk, tau)


def _eval_panels(mesh, panels, tau):
    """Points and reference-parameter derivatives of several panels at tau."""
    panels = np.asarray(panels)
    X = np.empty((len(panels), len(tau), 2))
    D = np.empty_like(X)
    for piece in np.unique(mesh.panel_piece[panels]):
        sel = mesh.panel_piece[panels] == piece
        a, b = mesh.panel_t[panels[sel]].T
        t = (0.5 * (a + b))[:, None] + (0.5 * (b - a))[:, None] * tau[None]
        x, d1, _ = mesh.pieces[piece].eval(t)
        X[sel] = x
        D[sel] = d1 * (0.5 * (b - a))[:, None, None]
    return X, D


def _closest_on_panel(mesh, p, x, samples=65):
    """Reference parameter and distance of the closest panel point to each target."""
    tau = np.cos(np.pi * np.arange(samples)[::-1] / (samples - 1))
    Y, _ = _eval_panels(mesh, [p], tau)
    d = np.hypot(*(x[:, None] - Y[0][None]).transpose(2, 0, 1))
    j = np.argmin(d, axis=1)
    return tau[j], d[np.arange(len(x)), j], j


def _refine_closest(mesh, p, x, t0):
    """Newton refinement of an interior closest-point parameter."""
    t = t0
    for _ in range(8):
        _, D = _eval_panels(mesh, [p], np.array([t]))
        X2, D2 = _eval_panels(mesh, [p], np.array([t, t + 1e-6]))
        y, dy = X2[0, 0], D2[0, 0]
        ddy = (D2[0, 1] - D2[0, 0]) / 1e-6
        f = np.dot(y - x, dy)
        fp = np.dot(dy, dy) + np.dot(y - x, ddy)
        if fp <= 0:
            break
        step = f / fp
        t = float(np.clip(t - step, -1.0, 1.0))
        if abs(step) < 1e-14:
            break
    X, _ = _eval_panels(mesh, [p], np.array([t]))
    return t, float(np.hypot(*(X[0, 0] - x)))


def match_nodes(targets, mesh, tol=MATCH_TOL):
    """Index of the mesh node coinciding with each target (or -1)."""
    targets = np.asarray(targets, dtype=float)
    d = np.hypot(*(targets[:, None] - mesh.nodes[None]).transpose(2, 0, 1))
    j = np.argmin(d, axis=1)
    scale = max(1.0, float(np.abs(mesh.nodes).max()))
    return np.where(d[np.arange(len(targets)), j] <= tol * scale, j, -1)


def layer_matrices(mesh, gamma, targets=None, tnormals=None, truncate=True, tcurv=None):
    """(V, K') with rows at target points and columns at the nodes of `mesh`.

    V[i, j] approximates the weight of density node j in int G(x_i - y) phi(y) ds(y);
    K' uses the kernel d/dn_x G(x_i - y) with the supplied target normals.
    Targets default to the mesh nodes (with the mesh normals).
    """
    same = targets is None
    if same:
        targets, tnormals, tcurv = mesh.nodes, mesh.normals, mesh.curvature
        self_idx = np.arange(mesh.n)
    else:
        targets = np.asarray(targets, dtype=float)
        tnormals = np.asarray(tnormals, dtype=float)
        self_idx = match_nodes(targets, mesh)
        if tcurv is None:
            # coincident targets share the source curve; flip sign with the normal
            j = np.maximum(self_idx, 0)
            flip = np.sign(np.sum(tnormals * mesh.normals[j], axis=1))
            tcurv = mesh.curvature[j] * flip
    nt, ns, q = len(targets), mesh.n, mesh.order
    V = np.zeros((nt, ns))
    K = np.zeros((nt, ns))

    # plain quadrature on all pairs within the truncation radius
    d = targets[:, None] - mesh.nodes[None]
    r = np.hypot(d[..., 0], d[..., 1])
    keep = r > 0
    if truncate:
        keep &= r <= TRUNCATION * gamma
    ii, jj = np.nonzero(keep)
    g, kp = _kernels(targets[ii], tnormals[ii], mesh.nodes[jj], gamma)
    V[ii, jj] = g * mesh.weights[jj]
    K[ii, jj] = kp * mesh.weights[jj]

    # self interactions: one template per node position k within the panel
    has_self = np.nonzero(self_idx >= 0)[0]
    if len(has_self):
        src = self_idx[has_self]
        panels = mesh.panel_index[src]
        kpos = src - panels * q
        ms = np.maximum(1, np.ceil(mesh.panel_length[panels] / (SUBLEN * gamma))).astype(int)
        for k in range(q):
            for m in np.unique(ms[kpos == k]):
                sel = (kpos == k) & (ms == m)
                rows, pans = has_self[sel], panels[sel]
                tau, w, L = _self_template(q, k, int(m))
                Y, D = _eval_panels(mesh, pans, tau)
                sp = np.hypot(D[..., 0], D[..., 1]) * w[None]
                g, kp = _kernels(targets[rows][:, None], tnormals[rows][:, None], Y, gamma,
                                 tcurv[rows][:, None])
                cols = pans[:, None] * q + np.arange(q)[None]
                V[rows[:, None], cols] = (g * sp) @ L
                K[rows[:, None], cols] = (kp * sp) @ L

    # near (non-self) interactions
    centers = mesh.nodes.reshape(-1, q, 2).mean(1)
    radius = np.hypot(*(mesh.nodes.reshape(-1, q, 2) - centers[:, None]).transpose(2, 0, 1)).max(1)
    for p in range(mesh.n_panels):
        Lp = mesh.panel_length[p]
        dc = np.hypot(*(targets - centers[p]).T)
        cand = np.nonzero(dc < radius[p] + 0.5 * Lp + NEAR * Lp)[0]
        cand = cand[(self_idx[cand] < 0) | (mesh.panel_index[np.maximum(self_idx[cand], 0)] != p)]
        if not len(cand):
            continue
        tstar, dist, jmin = _closest_on_panel(mesh, p, targets[cand])
        near = dist < NEAR * Lp
        cand, tstar, dist, jmin = cand[near], tstar[near], dist[near], jmin[near]
        if not len(cand):
            continue
        m = int(max(1, np.ceil(Lp / (SUBLEN * gamma))))
        dref = 2.0 * dist / Lp
        cols = p * q + np.arange(q)
        groups = []
        for end, idx in ((-1.0, 0), (1.0, 64)):
            sel = jmin == idx
            if np.any(sel):
                groups.append((end, max(dref[sel].min() / 4, GRADE_FLOOR), cand[sel]))
        for i in np.nonzero((jmin != 0) & (jmin != 64))[0]:
            t, dd = _refine_closest(mesh, p, targets[cand[i]], tstar[i])
            groups.append((t, max(2.0 * dd / Lp / 4, GRADE_FLOOR), cand[i:i + 1]))
        for center, floor, rows in groups:
            tau, w, L = _near_rule(q, center, floor, m)
            Y, D = _eval_panels(mesh, [p], tau)
            sp = np.hypot(D[0, :, 0], D[0, :, 1]) * w
            g, kp = _kernels(targets[rows][:, None], tnormals[rows][:, None], Y[0][None], gamma)
            V[rows[:, None], cols] = (g * sp) @ L
            K[rows[:, None], cols] = (kp * sp) @ L
    return V, K


@lru_cache(maxsize=16)
def _layers_cached(mesh, gamma, truncate):
    V, K = layer_matrices(mesh, gamma, truncate=truncate)
    for a in (V, K):
        a.setflags(write=False)
    return V, K


def symmetry_defect(mesh, V):
    """Relative asymmetry of the mass-weighted matrix W V."""
    WV = mesh.weights[:, None] * V
    return float(np.linalg.norm(WV - WV.T) / np.linalg.norm(WV))


def assemble_single_layer(mesh, gamma, truncate=True, symmetrize=False):
    """Single-layer operator V (density-to-values).

    With `symmetrize`, W V is replaced by its symmetric part.  This is off by
    default: the column-wise (transposed) use of the Nystrom rule is much less
    accurate than the row-wise one, so the symmetric part loses digits.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    V = np.array(_layers_cached(mesh, float(gamma), truncate)[0])
    if symmetrize:
        w = mesh.weights
        V = 0.5 * (V + (V.T * w[None]) / w[:, None])
    return BoundaryOperator(V, mesh, mesh, "density-to-values", float(gamma), "V")


def assemble_adjoint_double_layer(mesh, normal_of, gamma, truncate=True):
    """K' for the outward normal of the interior domain ("omega1") or of the exterior ("omega0")."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    K = np.array(_layers_cached(mesh, float(gamma), truncate)[1])
    if normal_of in ("omega0", 0, "exterior"):
        K = -K
    elif normal_of not in ("omega1", 1, "interior"):
        raise ValueError(f"unknown side {normal_of!r}")
    return BoundaryOperator(K, mesh, mesh, "density-to-values", float(gamma), f"K'[{normal_of}]")


def assemble_mass(mesh):
    return BoundaryOperator(np.diag(mesh.weights), mesh, mesh, "values-to-values", None, "mass")


def save_operator(op, path):
    """Write `path`.npy with the matrix and `path`.json with its provenance."""
    path = str(path)
    if path.endswith(".npy"):
        path = path[:-4]
    np.save(path + ".npy", op.matrix)
    meta = {"name": op.name, "gamma": op.gamma, "convention": op.convention,
            "row_mesh": op.row_mesh.digest, "col_mesh": op.col_mesh.digest,
            "shape": list(op.matrix.shape)}
    with open(path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return path + ".npy", path + ".json"


def load_operator_matrix(path):
    path = str(path)
    if path.endswith(".npy"):
        path = path[:-4]
    with open(path + ".json") as f:
        meta = json.load(f)
    return np.load(path + ".npy"), meta
