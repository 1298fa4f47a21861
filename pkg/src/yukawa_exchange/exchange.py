"""Exchange operators, scattering operators and the relaxed fixed-point solver.

Subdomain 0 is always the unbounded one.  Each subdomain boundary is its own
closed mesh; a bounded subdomain uses the mesh normals, the unbounded one the
flipped normals, so every part of a multi-trace is paired with the outward
normal of its own subdomain.
"""
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sl
from scipy.spatial import cKDTree

from .bessel import k0k1
from .boundary_ops import BoundaryOperator, MATCH_TOL, assemble_adjoint_double_layer, layer_matrices
from .dtn import (MembershipError, dtn_matrix, is_member, sobolev_norm, spectral_basis)
from .geometry import GradingPolicy, build_mesh, circle, curve_from_dict, rectangle

# -- multi-traces ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MultiTrace:
    parts: tuple

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(np.asarray(p) for p in self.parts))

    @property
    def sizes(self):
        return [len(p) for p in self.parts]

    def vector(self):
        return np.concatenate(self.parts)

    @classmethod
    def from_vector(cls, v, sizes):
        cuts = np.cumsum(sizes)[:-1]
        return cls(tuple(np.split(np.asarray(v), cuts)))

    def __add__(self, other):
        return MultiTrace(tuple(a + b for a, b in zip(self.parts, other.parts)))

    def __sub__(self, other):
        return MultiTrace(tuple(a - b for a, b in zip(self.parts, other.parts)))

    def __mul__(self, c):
        return MultiTrace(tuple(c * a for a in self.parts))

    __rmul__ = __mul__


def multitrace_norm(phi, s, bases):
    return float(np.sqrt(sum(sobolev_norm(p, s, b) ** 2 for p, b in zip(phi.parts, bases))))


# -- partitions ---------------------------------------------------------------------


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Partition:
    """Subdomain boundaries; `signs[k]` is +1 for bounded subdomains, -1 for the unbounded one."""
    meshes: tuple
    signs: tuple
    names: tuple
    partner: np.ndarray            # global node index -> coincident node on the neighbouring boundary
    description: dict = field(default_factory=dict)

    @property
    def sizes(self):
        return [m.n for m in self.meshes]

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def n_total(self):
        return int(sum(self.sizes))

    def normals(self, k):
        return self.signs[k] * self.meshes[k].normals

    def side(self, k):
        return "interior" if self.signs[k] > 0 else "exterior"

    def interfaces(self):
        """Set of (k, l) pairs of subdomains sharing boundary nodes."""
        off = self.offsets
        owner = np.searchsorted(off, np.arange(self.n_total), side="right") - 1
        return sorted({tuple(sorted((int(owner[i]), int(owner[j])))) for i, j in enumerate(self.partner)})


def match_partition(meshes, tol=MATCH_TOL):
    """Pair every node with the coincident node of another subdomain boundary."""
    pts = np.concatenate([m.nodes for m in meshes])
    owner = np.concatenate([np.full(m.n, k) for k, m in enumerate(meshes)])
    scale = max(1.0, float(np.abs(pts).max()))
    tree = cKDTree(pts)
    pairs = tree.query_ball_point(pts, r=tol * scale)
    partner = np.empty(len(pts), dtype=int)
    for i, cand in enumerate(pairs):
        other = [j for j in cand if owner[j] != owner[i]]
        if len(other) != 1:
            k = owner[i]
            raise PartitionError(f"node {i} of boundary {k} at {pts[i]} matches {len(other)} nodes "
                                 "on other boundaries; interface meshes must coincide")
        partner[i] = other[0]
    if np.any(partner[partner] != np.arange(len(pts))):
        raise PartitionError("interface node matching is not symmetric")
    return partner


def make_partition(meshes, signs, names=None, description=None):
    if sum(1 for s in signs if s < 0) != 1 or signs[0] > 0:
        raise PartitionError("subdomain 0 must be the single unbounded subdomain")
    names = tuple(names or [f"omega{k}" for k in range(len(meshes))])
    partner = match_partition(meshes)
    return Partition(tuple(meshes), tuple(int(s) for s in signs), names, partner, description or {})


def _grading(d):
    g = d.get("grading", "uniform")
    if g == "uniform":
        return GradingPolicy(panel_length=d.get("panel_length"))
    return GradingPolicy("dyadic", d.get("gamma"), d.get("cutoff"), d.get("panel_length"))


def partition_from_dict(d):
    """JSON schema: {"mesh": {"n", "panel_length", "grading", "gamma", "cutoff"},
    "subdomains": [{"name", "curve": <curve>, "unbounded": bool}, ...],
    "interfaces": [[k, l], ...] (optional, verified against node matching)}."""
    md = d.get("mesh", {})
    n = md.get("n", 256)
    grading = _grading(md)
    subs = d["subdomains"]
    order = sorted(range(len(subs)), key=lambda k: not subs[k].get("unbounded", False))
    meshes, signs, names = [], [], []
    for k in order:
        s = subs[k]
        meshes.append(build_mesh(curve_from_dict(s["curve"]), n, grading))
        signs.append(-1 if s.get("unbounded", False) else 1)
        names.append(s.get("name", f"omega{k}"))
    part = make_partition(meshes, signs, names, d)
    if "interfaces" in d:
        idx = {name: i for i, name in enumerate(names)}
        want = sorted(tuple(sorted((idx[a] if isinstance(a, str) else order.index(a),
                                    idx[b] if isinstance(b, str) else order.index(b))))
                      for a, b in d["interfaces"])
        if want != part.interfaces():
            raise PartitionError(f"declared interfaces {want} do not match the meshes {part.interfaces()}")
    return part


def load_partition(path):
    with open(path) as f:
        return partition_from_dict(json.load(f))


def disc_partition(R=1.0, n=256):
    """Disc and its exterior, separated by one circle."""
    d = {"mesh": {"n": n},
         "subdomains": [{"name": "exterior", "curve": circle(R).to_dict(), "unbounded": True},
                        {"name": "disc", "curve": circle(R).to_dict()}]}
    return partition_from_dict(d)


def cross_partition(gamma, panel_length=0.25, half=1.0, cutoff=None):
    """Square [-half, half]^2 cut along x = 0, plus the exterior: cross-points at (0, +-half).

    Grading goes to gamma/16 by default (deeper than for single curves) since
    the trace error of the solver is dominated by the corner panels.
    """
    a = half
    cps = [(0.0, -a), (0.0, a)]
    cutoff = gamma / 16 if cutoff is None else cutoff
    d = {"mesh": {"grading": "dyadic", "cutoff": cutoff, "panel_length": panel_length},
         "subdomains": [
             {"name": "exterior", "curve": rectangle(-a, -a, a, a, cps).to_dict(), "unbounded": True},
             {"name": "left", "curve": rectangle(-a, -a, 0.0, a).to_dict()},
             {"name": "right", "curve": rectangle(0.0, -a, a, a).to_dict()}]}
    return partition_from_dict(d)


def two_domain_partition(mesh):
    """Exterior and interior of one closed mesh (both parts on the same nodes)."""
    return Partition((mesh, mesh), (-1, 1), ("exterior", "interior"),
                     np.concatenate([np.arange(mesh.n) + mesh.n, np.arange(mesh.n)]))


# -- exchange operators ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExchangeOperator:
    matrix: np.ndarray
    partition: Partition
    gamma: float
    kind: str                  # "local" or "nonlocal"

    @property
    def sizes(self):
        return self.partition.sizes

    def block(self, k, l):
        o = self.partition.offsets
        return self.matrix[o[k]:o[k + 1], o[l]:o[l + 1]]

    def apply(self, phi):
        return MultiTrace.from_vector(self.matrix @ phi.vector(), self.sizes)

    def __matmul__(self, phi):
        return self.apply(phi)


def _check_sizes(phi, partition):
    if phi.sizes != partition.sizes:
        raise PartitionError(f"multi-trace sizes {phi.sizes} do not match the partition {partition.sizes}")


def apply_pi0(phi, partition=None):
    """Swap Neumann data across each interface with a sign change."""
    if partition is None:
        if len(phi.parts) != 2 or phi.parts[0].shape != phi.parts[1].shape:
            raise PartitionError("two-domain exchange needs two parts on the same mesh")
        return MultiTrace((-phi.parts[1], -phi.parts[0]))
    _check_sizes(phi, partition)
    v = phi.vector()
    return MultiTrace.from_vector(-v[partition.partner], partition.sizes)


def pi0_matrix(partition):
    N = partition.n_total
    P = np.zeros((N, N))
    P[np.arange(N), partition.partner] = -1.0
    return ExchangeOperator(P, partition, 0.0, "local")


def assemble_A(mesh, gamma):
    """A = 2 K' with the normal of the unbounded side."""
    K0 = assemble_adjoint_double_layer(mesh, "omega0", gamma).matrix
    return BoundaryOperator(2.0 * K0, mesh, mesh, "density-to-values", float(gamma), "A")


def two_domain_pi(mesh, gamma):
    """Pi = Pi0 + [[-A, -A], [A, A]] on (phi0, phi1)."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    A = assemble_A(mesh, gamma).matrix
    n = mesh.n
    I = np.eye(n)
    M = np.block([[-A, -I - A], [-I + A, A]])
    return ExchangeOperator(M, two_domain_partition(mesh), float(gamma), "nonlocal")


def multi_domain_pi(partition, gamma):
    """Pi = Id - 2 tau_N Psi = -P - 2 K'_full.

    Block (j, k) of K'_full has targets on boundary j (with the outward normal
    of subdomain j) and sources on boundary k; coincident nodes are treated
    with the singular panel rules of the source mesh.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    o = partition.offsets
    N = partition.n_total
    M = np.zeros((N, N))
    M[np.arange(N), partition.partner] = -1.0
    for j, mj in enumerate(partition.meshes):
        for k, mk in enumerate(partition.meshes):
            if mj is mk:
                # same nodes: K' for the mesh normals, flipped to the normal of subdomain j
                K = layer_matrices(mk, gamma)[1] * partition.signs[j]
            else:
                K = layer_matrices(mk, gamma, targets=mj.nodes, tnormals=partition.normals(j))[1]
            M[o[j]:o[j + 1], o[k]:o[k + 1]] -= 2.0 * K
    return ExchangeOperator(M, partition, float(gamma), "nonlocal")


def apply_pi_gamma(phi, gamma, mesh=None, partition=None):
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if partition is not None:
        _check_sizes(phi, partition)
        return multi_domain_pi(partition, gamma).apply(phi)
    return two_domain_pi(mesh, gamma).apply(phi)


def partition_bases(partition, gamma):
    return [spectral_basis(m, gamma, partition.side(k)) for k, m in enumerate(partition.meshes)]


def exchange_defect(phi, s, Pi, bases, M=None, override=False):
    """||(Pi - Pi0) phi||_s / ||phi||_s in the product norm."""
    if not -0.5 <= s <= 0:
        raise ValueError("s must lie in [-1/2, 0]")
    part = Pi.partition
    if M is not None and not override:
        for k, p in enumerate(phi.parts):
            if not is_member(p, part.meshes[k], M):
                raise MembershipError(f"part {k} is not in X_gamma(M) for M = {M}")
    d = Pi.apply(phi) - apply_pi0(phi, part)
    return multitrace_norm(d, s, bases) / multitrace_norm(phi, s, bases)


def involution_defect(Pi, phis, bases, s=-0.5):
    out = 0.0
    for phi in phis:
        r = Pi.apply(Pi.apply(phi)) - phi
        out = max(out, multitrace_norm(r, s, bases) / multitrace_norm(phi, s, bases))
    return out


def isometry_defect(Pi, phis, bases, s=-0.5):
    out = 0.0
    for phi in phis:
        a = multitrace_norm(Pi.apply(phi), s, bases)
        b = multitrace_norm(phi, s, bases)
        out = max(out, abs(a - b) / b)
    return out


def smooth_random_trace(mesh, rng, kmax=12, decay=2.0):
    """Random arc-length Fourier series with coefficients ~ (1 + k)^-decay."""
    s = 2 * np.pi * mesh.arclength / mesh.length
    f = rng.standard_normal() * np.ones(mesh.n)
    for k in range(1, kmax + 1):
        a, b = rng.standard_normal(2) / (1.0 + k) ** decay
        f += a * np.cos(k * s) + b * np.sin(k * s)
    return f


# -- corner counterexample ----------------------------------------------------------


def strip_indicator(mesh, vertex, side_dir, width):
    """Indicator of the boundary points on the side leaving `vertex` along
    `side_dir` within distance `width` of the vertex."""
    d = mesh.nodes - np.asarray(vertex)
    u = np.asarray(side_dir, dtype=float)
    u = u / np.hypot(*u)
    t = d @ u
    off = np.abs(d @ np.array([-u[1], u[0]]))
    return ((t > 0) & (t < width) & (off < 1e-12)).astype(float)


def strip_bump(mesh, vertex, side_dir, width, center=None):
    """Smooth (C^inf, compactly supported) bump on the same side, supported on
    an interval of length `width` centred at distance `center` from the vertex."""
    d = mesh.nodes - np.asarray(vertex)
    u = np.asarray(side_dir, dtype=float)
    u = u / np.hypot(*u)
    t = d @ u
    off = np.abs(d @ np.array([-u[1], u[0]]))
    c = width if center is None else center
    x = 2.0 * (t - c) / width
    out = np.zeros(mesh.n)
    sel = (np.abs(x) < 1) & (off < 1e-12)
    out[sel] = np.exp(1.0 - 1.0 / (1.0 - x[sel] ** 2))
    return out


# -- scattering ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScatterContext:
    dtn: object
    omega: float
    mu: float = 1.0

    def __post_init__(self):
        if self.omega <= 0:
            raise ValueError("impedance omega must be positive")


def robin_traces(tau_d, tau_n, ctx, kind="nonlocal"):
    """(tau_plus, tau_minus) = mu tau_N +- i omega / gamma Z tau_D with Z = T or Id."""
    g = ctx.dtn.gamma
    Z = ctx.dtn @ tau_d if kind == "nonlocal" else np.asarray(tau_d)
    if kind not in ("local", "nonlocal"):
        raise ValueError(f"unknown scattering kind {kind!r}")
    a = ctx.mu * np.asarray(tau_n)
    b = 1j * ctx.omega / g * Z
    return a + b, a - b


def apply_scattering(u_traces, ctx, kind="nonlocal"):
    """Outgoing Robin trace of a solution with traces (tau_D, tau_N)."""
    tau_d, tau_n = u_traces
    return robin_traces(tau_d, tau_n, ctx, kind)[0]


def two_domain_context(dtn):
    """Two-domain normalization mu = 1, omega = gamma."""
    return ScatterContext(dtn, dtn.gamma, 1.0)


# -- model problem: point sources -----------------------------------------------------


def source_traces(points, charges, mesh, normals, gamma):
    """Dirichlet and Neumann traces of sum_s q_s G(x - x_s)."""
    tau_d = np.zeros(mesh.n)
    tau_n = np.zeros(mesh.n)
    for x, q in zip(np.atleast_2d(points), charges):
        d = mesh.nodes - np.asarray(x)
        r = np.hypot(d[:, 0], d[:, 1])
        k0, k1 = k0k1(r / gamma)
        tau_d += q * k0 / (2 * np.pi)
        # grad G = -K1(r/gamma) / (2 pi gamma) (x - x_s) / r
        tau_n += q * (-k1 / (2 * np.pi * gamma)) * np.sum(d * normals, 1) / r
    return tau_d, tau_n


def _inside(mesh, points):
    """Winding-number test against the mesh polygon (fine enough for sources away from the curve)."""
    pts = np.atleast_2d(points)
    x = mesh.nodes
    out = []
    for p in pts:
        a = x - p
        ang = np.arctan2(a[:, 1], a[:, 0])
        turn = np.diff(np.concatenate([ang, ang[:1]]))
        turn = (turn + np.pi) % (2 * np.pi) - np.pi
        out.append(abs(turn.sum()) > np.pi)
    return np.array(out)


def owner_of(partition, points):
    """Subdomain index containing each point."""
    pts = np.atleast_2d(points)
    owner = np.zeros(len(pts), dtype=int)
    for k, m in enumerate(partition.meshes):
        if partition.signs[k] > 0:
            owner[_inside(m, pts)] = k
    return owner


def direct_traces(partition, gamma, points, charges):
    """Traces of the exact solution (the free-space potential of all sources) on every boundary."""
    D, N = [], []
    for k, m in enumerate(partition.meshes):
        d, n = source_traces(points, charges, m, partition.normals(k), gamma)
        D.append(d)
        N.append(n)
    return MultiTrace(D), MultiTrace(N)


@dataclass
class SolveResult:
    dirichlet: MultiTrace
    neumann: MultiTrace
    incoming: MultiTrace
    history: list
    converged: bool
    iterations: int
    isometry_defect: float = float("nan")
    trace_error: float = float("nan")

    def history_csv(self, path):
        with open(path, "w") as f:
            f.write("iter,residual\n")
            for i, r in enumerate(self.history):
                f.write(f"{i},{float(r)!r}\n")


def claeys_solve(partition, gamma, rhs, relax=0.5, tol=1e-10, max_iter=200, omega=1.0, mu=1.0,
                 Pi=None, bases=None):
    """Relaxed fixed point p <- (1 - theta) p + theta (Pi S p + f) for (-Lap + gamma^-2) u = f.

    `rhs` = (points, charges) of point sources.  Unknowns are the incoming
    Robin traces p_k = mu tau_N - i omega/gamma T_k tau_D on every boundary.
    A local solve with incoming data p_k and the sources inside subdomain k
    gives the outgoing trace S_k p_k + (source terms); the exchange operator
    turns outgoing traces into the next incoming ones.
    """
    points, charges = rhs
    points = np.atleast_2d(np.asarray(points, dtype=float)) if len(charges) else np.zeros((0, 2))
    charges = np.asarray(charges, dtype=float)
    Pi = Pi or multi_domain_pi(partition, gamma)
    bases = bases or partition_bases(partition, gamma)
    owner = owner_of(partition, points) if len(charges) else np.zeros(0, dtype=int)
    nsub = len(partition.meshes)
    Ts = [dtn_matrix(m, partition.side(k), gamma) for k, m in enumerate(partition.meshes)]
    lus = [sl.lu_factor(T.array) for T in Ts]

    # particular solutions: sources inside each subdomain
    fp, fm, fd = [], [], []
    for k, m in enumerate(partition.meshes):
        sel = owner == k
        d, n = source_traces(points[sel], charges[sel], m, partition.normals(k), gamma)
        ctx = ScatterContext(Ts[k], omega, mu)
        tp, tm = robin_traces(d, n, ctx)
        fp.append(tp)
        fm.append(tm)
        fd.append(d)
    s = (mu + 1j * omega) / (mu - 1j * omega)   # mu tau_N = (mu/gamma) T tau_D for homogeneous local solutions
    # outgoing q = s (p - tau_minus(u_f)) + tau_plus(u_f)
    src = MultiTrace([fp[k] - s * fm[k] for k in range(nsub)])
    f = Pi.apply(src)
    fnorm = multitrace_norm(f, -0.5, bases)
    p = MultiTrace([np.zeros(m.n, dtype=complex) for m in partition.meshes])
    history = []
    converged = False
    if fnorm == 0:
        history.append(0.0)
        converged = True
    it = 0
    while not converged and it < max_iter:
        r = Pi.apply(s * p) + f - p
        res = multitrace_norm(r, -0.5, bases) / fnorm
        history.append(res)
        if res <= tol:
            converged = True
            break
        p = p + relax * r
        it += 1

    # reconstruct the traces of the local solutions
    D, N, Q = [], [], []
    for k in range(nsub):
        g_k = p.parts[k] - fm[k]
        # homogeneous part: tau_minus = (mu - i omega) / gamma * T tau_D
        b = gamma * g_k / (mu - 1j * omega)
        # real factorization: solve real and imaginary parts separately
        hd = sl.lu_solve(lus[k], b.real) + 1j * sl.lu_solve(lus[k], b.imag)
        D.append(hd + fd[k])
        N.append((Ts[k] @ hd) / gamma + (source_traces(points[owner == k], charges[owner == k],
                                                         partition.meshes[k], partition.normals(k), gamma)[1]))
        Q.append(s * (p.parts[k] - fm[k]) + fp[k])
    q = MultiTrace(Q)
    iso = abs(multitrace_norm(Pi.apply(q), -0.5, bases) - multitrace_norm(q, -0.5, bases)) / \
        max(multitrace_norm(q, -0.5, bases), 1e-300)
    return SolveResult(MultiTrace(D), MultiTrace(N), p, history, converged, it, float(iso))


def trace_error(result, partition, gamma, rhs, s=0.0, bases=None):
    """Relative error of the reconstructed Dirichlet traces against the exact solution."""
    exact, _ = direct_traces(partition, gamma, *rhs)
    if s == 0.0:
        num = sum(np.sum(m.weights * np.abs(a - b) ** 2)
                  for m, a, b in zip(partition.meshes, result.dirichlet.parts, exact.parts))
        den = sum(np.sum(m.weights * np.abs(b) ** 2) for m, b in zip(partition.meshes, exact.parts))
        return float(np.sqrt(num / den))
    bases = bases or partition_bases(partition, gamma)
    return multitrace_norm(result.dirichlet - exact, s, bases) / multitrace_norm(exact, s, bases)
