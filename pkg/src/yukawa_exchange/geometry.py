"""Closed curves, curvilinear polygons and their panel discretizations."""
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

ORDER = 16
MATCH_TOL = 1e-12


class GeometryError(ValueError):
    pass


# -- parameterized pieces -------------------------------------------------------
# Every piece maps a parameter interval [0, tmax] to the plane and provides
# position, first and second derivatives.

class _Circle:
    def __init__(self, R, center=(0.0, 0.0)):
        self.R, self.c = float(R), np.asarray(center, dtype=float)
        self.tmax = 2 * np.pi

    def eval(self, t):
        c, s = np.cos(t), np.sin(t)
        R = self.R
        p = self.c + R * np.stack([c, s], -1)
        return p, R * np.stack([-s, c], -1), R * np.stack([-c, -s], -1)


class _Ellipse:
    def __init__(self, a, b, center=(0.0, 0.0)):
        self.a, self.b, self.c = float(a), float(b), np.asarray(center, dtype=float)
        self.tmax = 2 * np.pi

    def eval(self, t):
        c, s = np.cos(t), np.sin(t)
        a, b = self.a, self.b
        return (self.c + np.stack([a * c, b * s], -1), np.stack([-a * s, b * c], -1),
                np.stack([-a * c, -b * s], -1))


class _Star:
    # r(t) = R (1 + amp cos(k t))
    def __init__(self, R, amplitude, lobes, center=(0.0, 0.0)):
        self.R, self.amp, self.k = float(R), float(amplitude), int(lobes)
        self.c = np.asarray(center, dtype=float)
        self.tmax = 2 * np.pi

    def eval(self, t):
        R, A, k = self.R, self.amp, self.k
        r = R * (1 + A * np.cos(k * t))
        r1 = -R * A * k * np.sin(k * t)
        r2 = -R * A * k * k * np.cos(k * t)
        c, s = np.cos(t), np.sin(t)
        p = self.c + np.stack([r * c, r * s], -1)
        d1 = np.stack([r1 * c - r * s, r1 * s + r * c], -1)
        d2 = np.stack([r2 * c - 2 * r1 * s - r * c, r2 * s + 2 * r1 * c - r * s], -1)
        return p, d1, d2


class _Hermite:
    """Cubic Hermite arc from p0 to p1 with end tangents t0, t1 (u in [0, 1])."""

    def __init__(self, p0, p1, t0=None, t1=None):
        self.p0, self.p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
        chord = self.p1 - self.p0
        self.t0 = chord if t0 is None else np.asarray(t0, dtype=float)
        self.t1 = chord if t1 is None else np.asarray(t1, dtype=float)
        self.tmax = 1.0

    def eval(self, u):
        u = np.asarray(u, dtype=float)[..., None]
        u2, u3 = u * u, u * u * u
        p0, p1, m0, m1 = self.p0, self.p1, self.t0, self.t1
        p = ((2 * u3 - 3 * u2 + 1) * p0 + (u3 - 2 * u2 + u) * m0
             + (-2 * u3 + 3 * u2) * p1 + (u3 - u2) * m1)
        d1 = ((6 * u2 - 6 * u) * p0 + (3 * u2 - 4 * u + 1) * m0
              + (-6 * u2 + 6 * u) * p1 + (3 * u2 - 2 * u) * m1)
        d2 = ((12 * u - 6) * p0 + (6 * u - 4) * m0 + (-12 * u + 6) * p1 + (6 * u - 2) * m1)
        return p, d1, d2


class _Arc:
    """Circular arc from p0 to p1 with signed curvature (positive turns left)."""

    def __init__(self, p0, p1, curvature):
        self.p0, self.p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
        k = float(curvature)
        if k == 0:
            raise GeometryError("arc curvature must be nonzero; use a line side")
        rho = 1 / abs(k)
        chord = self.p1 - self.p0
        c = np.hypot(*chord)
        if c > 2 * rho:
            raise GeometryError("arc chord longer than its diameter")
        left = np.array([-chord[1], chord[0]]) / c
        sgn = np.sign(k)
        self.center = 0.5 * (self.p0 + self.p1) + sgn * np.sqrt(rho * rho - c * c / 4) * left
        self.rho = rho
        self.th0 = np.arctan2(*(self.p0 - self.center)[::-1])
        self.dth = sgn * 2 * np.arcsin(c / (2 * rho))
        self.tmax = 1.0

    def eval(self, u):
        th = self.th0 + self.dth * np.asarray(u, dtype=float)
        c, s = np.cos(th), np.sin(th)
        r, w = self.rho, self.dth
        p = self.center + r * np.stack([c, s], -1)
        return p, r * w * np.stack([-s, c], -1), r * w * w * np.stack([-c, -s], -1)


# -- specifications -------------------------------------------------------------

@dataclass(frozen=True)
class SideSpec:
    kind: str                    # "line", "hermite" or "arc"
    p0: tuple
    p1: tuple
    t0: tuple = None
    t1: tuple = None
    curvature: float = None

    def piece(self):
        if self.kind == "line":
            return _Hermite(self.p0, self.p1)
        if self.kind == "hermite":
            return _Hermite(self.p0, self.p1, self.t0, self.t1)
        if self.kind == "arc":
            return _Arc(self.p0, self.p1, self.curvature)
        raise GeometryError(f"unknown side kind {self.kind!r}")


@dataclass(frozen=True)
class CurveSpec:
    kind: str                    # "circle", "ellipse", "star" or "polygon"
    params: dict = field(default_factory=dict)
    sides: tuple = ()

    def pieces(self):
        p = self.params
        center = p.get("center", (0.0, 0.0))
        if self.kind == "circle":
            return [_Circle(p.get("R", 1.0), center)]
        if self.kind == "ellipse":
            return [_Ellipse(p["a"], p["b"], center)]
        if self.kind in ("star", "smooth-star"):
            return [_Star(p.get("R", 1.0), p["amplitude"], p["lobes"], center)]
        if self.kind == "polygon":
            return [s.piece() for s in self.sides]
        raise GeometryError(f"unknown curve kind {self.kind!r}")

    @property
    def is_polygon(self):
        return self.kind == "polygon"

    def to_dict(self):
        d = {"kind": self.kind}
        d.update({k: _jsonable(v) for k, v in self.params.items()})
        if self.sides:
            d["sides"] = [{k: _jsonable(v) for k, v in s.__dict__.items() if v is not None}
                          for s in self.sides]
        return d


def _jsonable(v):
    if isinstance(v, (tuple, list, np.ndarray)):
        return [_jsonable(x) for x in v]
    return v


def circle(R=1.0, center=(0.0, 0.0)):
    return CurveSpec("circle", {"R": R, "center": tuple(center)})


def ellipse(a, b, center=(0.0, 0.0)):
    return CurveSpec("ellipse", {"a": a, "b": b, "center": tuple(center)})


def star(R, amplitude, lobes, center=(0.0, 0.0)):
    return CurveSpec("star", {"R": R, "amplitude": amplitude, "lobes": lobes,
                              "center": tuple(center)})


def polygon(vertices):
    """Straight-sided polygon through the given vertices (counterclockwise)."""
    v = [tuple(map(float, p)) for p in vertices]
    sides = tuple(SideSpec("line", v[i], v[(i + 1) % len(v)]) for i in range(len(v)))
    return CurveSpec("polygon", {}, sides)


def rectangle(x0, y0, x1, y1, breaks=()):
    """Axis-aligned rectangle; `breaks` adds extra boundary points (e.g. cross-points)."""
    corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    pts = []
    for i, c in enumerate(corners):
        d = corners[(i + 1) % 4]
        pts.append(c)
        on = [b for b in breaks if _on_segment(b, c, d)]
        key = lambda b: np.hypot(b[0] - c[0], b[1] - c[1])
        pts.extend(sorted(on, key=key))
    return polygon(pts)


def _on_segment(b, c, d):
    b, c, d = (np.asarray(x, dtype=float) for x in (b, c, d))
    cd = d - c
    t = np.dot(b - c, cd) / np.dot(cd, cd)
    return 1e-12 < t < 1 - 1e-12 and np.hypot(*(c + t * cd - b)) < 1e-12


def unit_square():
    return polygon([(0, 0), (1, 0), (1, 1), (0, 1)])


def curve_from_dict(d):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "polygon":
        if "vertices" in d:
            return polygon(d["vertices"])
        sides = []
        for s in d["sides"]:
            s = dict(s)
            sides.append(SideSpec(s.pop("kind"), tuple(s.pop("p0")), tuple(s.pop("p1")),
                                  tuple(s["t0"]) if "t0" in s else None,
                                  tuple(s["t1"]) if "t1" in s else None,
                                  s.get("curvature")))
        return CurveSpec("polygon", {}, tuple(sides))
    if "center" in d:
        d["center"] = tuple(d["center"])
    return CurveSpec(kind, d)


def load_curve_spec(path):
    with open(path) as f:
        return curve_from_dict(json.load(f))


# -- grading ----------------------------------------------------------------------

@dataclass(frozen=True)
class GradingPolicy:
    kind: str = "uniform"        # "uniform" or "dyadic"
    gamma: float = None          # sets the default cutoff max(gamma/4, side * 2^-12)
    cutoff: float = None         # explicit cutoff length, overrides gamma
    panel_length: float = None   # explicit base panel length, overrides n

    def cutoff_for(self, side_length):
        if self.cutoff is not None:
            return self.cutoff
        floor = side_length * 2.0 ** -12
        if self.gamma is None:
            return floor
        return max(self.gamma / 4, floor)


def dyadic(gamma=None, cutoff=None, panel_length=None):
    return GradingPolicy("dyadic", gamma, cutoff, panel_length)


# -- mesh -------------------------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(ORDER)


@dataclass(frozen=True, eq=False)
class BoundaryMesh:
    nodes: np.ndarray
    weights: np.ndarray
    normals: np.ndarray          # outward normals of the interior domain
    tangents: np.ndarray
    curvature: np.ndarray
    speed: np.ndarray            # |dx/dt| at nodes
    arclength: np.ndarray        # arc-length coordinate of each node
    vertices: np.ndarray         # (k, 2), possibly empty
    vertex_dist: np.ndarray
    panel_index: np.ndarray
    panel_piece: np.ndarray
    panel_t: np.ndarray          # (P, 2) parameter interval per panel
    panel_length: np.ndarray
    pieces: tuple
    spec: CurveSpec
    order: int = ORDER

    @property
    def n(self):
        return len(self.weights)

    @property
    def n_panels(self):
        return len(self.panel_length)

    @property
    def length(self):
        return float(self.weights.sum())

    @property
    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.nodes).tobytes())
        h.update(np.ascontiguousarray(self.weights).tobytes())
        return h.hexdigest()[:16]

    def panel_eval(self, p, tau):
        """Position, derivative and second derivative at reference points tau of panel p."""
        a, b = self.panel_t[p]
        t = 0.5 * (a + b) + 0.5 * (b - a) * np.asarray(tau)
        x, d1, d2 = self.pieces[self.panel_piece[p]].eval(t)
        s = 0.5 * (b - a)
        return x, d1 * s, d2 * s * s

    def to_csv(self, path):
        data = np.column_stack([self.nodes, self.normals, self.weights, self.vertex_dist])
        np.savetxt(path, data, delimiter=",", header="x,y,nx,ny,w,vertex_dist",
                   comments="", fmt="%.17g")


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def _sample(pieces, m=64):
    pts = []
    for pc in pieces:
        t = np.linspace(0, pc.tmax, m + 1)[:-1]
        pts.append(pc.eval(t)[0])
    return np.concatenate(pts)


def _check_simple(poly):
    """Reject self-intersecting closed polylines (segment-pair test)."""
    a = poly
    b = np.roll(poly, -1, axis=0)
    m = len(a)
    d = b - a

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    ai, di = a[:, None], d[:, None]
    aj, dj = a[None], d[None]
    den = cross(di, dj)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = cross(aj - ai, dj) / den
        t = cross(aj - ai, di) / den
    hit = (np.abs(den) > 1e-300) & (s > 1e-9) & (s < 1 - 1e-9) & (t > 1e-9) & (t < 1 - 1e-9)
    idx = np.arange(m)
    gap = np.abs(idx[:, None] - idx[None])
    hit &= (gap > 1) & (gap < m - 1)
    if np.any(hit):
        raise GeometryError("curve is not simple (self-intersection detected)")


def _validate(spec, pieces):
    if spec.is_polygon:
        if len(pieces) < 2:
            raise GeometryError("polygon needs at least two sides")
        for i, pc in enumerate(pieces):
            end = pc.eval(np.array([1.0]))[0][0]
            start = pieces[(i + 1) % len(pieces)].eval(np.array([0.0]))[0][0]
            scale = max(1.0, np.abs(end).max())
            if np.hypot(*(end - start)) > 1e-12 * scale:
                raise GeometryError(f"polygon is not closed between side {i} and side {i + 1}")
    poly = _sample(pieces)
    area = 0.5 * np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    if area <= 0:
        raise GeometryError("curve must be counterclockwise (positive signed area)")
    _check_simple(poly)


def corner_info(pieces):
    """Junction points of a polygon with their interior angles."""
    out = []
    m = len(pieces)
    for i in range(m):
        pa, pb = pieces[i], pieces[(i + 1) % m]
        _, tin, _ = pa.eval(np.array([pa.tmax]))
        x, tout, _ = pb.eval(np.array([0.0]))
        tin, tout = tin[0], tout[0]
        turn = np.arctan2(tin[0] * tout[1] - tin[1] * tout[0], np.dot(tin, tout))
        out.append((x[0], np.pi - turn))
    return out


def _arc_length(pc, a, b):
    t = 0.5 * (a + b) + 0.5 * (b - a) * _GL_X
    _, d1, _ = pc.eval(t)
    return 0.5 * (b - a) * np.sum(_GL_W * np.hypot(d1[:, 0], d1[:, 1]))


def _piece_length(pc, m=64):
    br = np.linspace(0, pc.tmax, m + 1)
    return sum(_arc_length(pc, br[i], br[i + 1]) for i in range(m))


def _side_panels(pc, k, grade_start, grade_end, cutoff):
    br = list(np.linspace(0, pc.tmax, k + 1))
    if grade_start:
        while _arc_length(pc, br[0], br[1]) > cutoff:
            br.insert(1, 0.5 * (br[0] + br[1]))
    if grade_end:
        while _arc_length(pc, br[-2], br[-1]) > cutoff:
            br.insert(-1, 0.5 * (br[-2] + br[-1]))
    return br


def build_mesh(spec, n=256, grading=None, order=ORDER):
    """Panel Gauss-Legendre discretization of a closed curve.

    `n` is the target node count of the base (uniform) panel layout; dyadic
    grading toward polygon vertices adds panels on top of it.
    """
    if n < 16:
        raise GeometryError("need at least 16 nodes")
    grading = grading or GradingPolicy()
    pieces = spec.pieces()
    _validate(spec, pieces)
    glx, glw = np.polynomial.legendre.leggauss(order)
    lengths = [_piece_length(pc) for pc in pieces]
    total = sum(lengths)
    h0 = grading.panel_length or total * order / n

    vertices = np.zeros((0, 2))
    panels = []                            # (piece, a, b)
    if spec.is_polygon:
        info = corner_info(pieces)
        verts = [x for x, ang in info if abs(ang - np.pi) > 1e-9]
        vertices = np.array(verts) if verts else np.zeros((0, 2))
        for i, (pc, L) in enumerate(zip(pieces, lengths)):
            if grading.kind == "dyadic":
                k = max(2, int(round(L / h0)))
                br = _side_panels(pc, k, True, True, grading.cutoff_for(L))
            else:
                k = max(1, int(round(L / h0)))
                br = list(np.linspace(0, pc.tmax, k + 1))
            panels += [(i, br[j], br[j + 1]) for j in range(len(br) - 1)]
    else:
        pc = pieces[0]
        k = max(1, int(round(total / h0)))
        br = np.linspace(0, pc.tmax, k + 1)
        panels = [(0, br[j], br[j + 1]) for j in range(k)]

    P = len(panels)
    panel_piece = np.array([p[0] for p in panels])
    panel_t = np.array([[p[1], p[2]] for p in panels])
    half = 0.5 * (panel_t[:, 1] - panel_t[:, 0])
    t = (0.5 * (panel_t[:, 0] + panel_t[:, 1]))[:, None] + half[:, None] * glx[None]
    nodes = np.empty((P, order, 2))
    d1 = np.empty((P, order, 2))
    d2 = np.empty((P, order, 2))
    for i, pc in enumerate(pieces):
        sel = panel_piece == i
        nodes[sel], d1[sel], d2[sel] = pc.eval(t[sel])
    nodes, d1, d2 = (a.reshape(-1, 2) for a in (nodes, d1, d2))
    speed = np.hypot(d1[:, 0], d1[:, 1])
    weights = (half[:, None] * glw[None]).ravel() * speed
    tangents = d1 / speed[:, None]
    normals = np.stack([tangents[:, 1], -tangents[:, 0]], -1)
    curvature = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / speed ** 3
    panel_length = (weights.reshape(P, order)).sum(1)

    # arc-length coordinate: panel start offset + partial integral to each node
    start = np.concatenate([[0.0], np.cumsum(panel_length)[:-1]])
    arclength = np.empty((P, order))
    for p in range(P):
        piece = pieces[panel_piece[p]]
        a = panel_t[p, 0]
        arclength[p] = start[p] + [_arc_length(piece, a, tt) for tt in t[p]]
    arclength = arclength.ravel()

    if len(vertices):
        vd = np.min(np.hypot(*(nodes[:, None] - vertices[None]).transpose(2, 0, 1)), axis=1)
    else:
        vd = np.full(len(weights), np.inf)
    panel_index = np.repeat(np.arange(P), order)
    mesh = BoundaryMesh(nodes, weights, normals, tangents, curvature, speed, arclength,
                        vertices, vd, panel_index, panel_piece, panel_t, panel_length,
                        tuple(pieces), spec, order)
    _freeze(nodes, weights, normals, tangents, curvature, speed, arclength, vertices, vd,
            panel_index, panel_piece, panel_t, panel_length)
    return mesh


def dist_to_vertices(mesh, x):
    if len(mesh.vertices) == 0:
        return float("inf")
    d = mesh.vertices - np.asarray(x, dtype=float)
    return float(np.min(np.hypot(d[:, 0], d[:, 1])))


def signed_area(mesh):
    """Signed area enclosed by the mesh via the divergence theorem, (1/2) int x . n."""
    return 0.5 * float(np.sum(mesh.weights * np.sum(mesh.nodes * mesh.normals, axis=1)))


# -- panel-local calculus ----------------------------------------------------------

def _diff_matrix(order):
    x = np.polynomial.legendre.leggauss(order)[0]
    # barycentric differentiation matrix on the Gauss-Legendre nodes
    w = np.array([1.0 / np.prod([x[j] - x[k] for k in range(order) if k != j])
                  for j in range(order)])
    D = np.zeros((order, order))
    for i in range(order):
        for j in range(order):
            if i != j:
                D[i, j] = (w[j] / w[i]) / (x[i] - x[j])
        D[i, i] = -D[i].sum()
    return D


_DIFF = {}


def tangential_derivative(mesh, f):
    """Arc-length derivative of the panelwise polynomial interpolant of f."""
    if mesh.order not in _DIFF:
        _DIFF[mesh.order] = _diff_matrix(mesh.order)
    D = _DIFF[mesh.order]
    P, q = mesh.n_panels, mesh.order
    F = np.asarray(f).reshape(P, q)
    half = 0.5 * (mesh.panel_t[:, 1] - mesh.panel_t[:, 0])
    dF = (F @ D.T) / half[:, None]
    return (dF / mesh.speed.reshape(P, q)).ravel()


def endpoint_values(mesh, f):
    """Values of the panelwise interpolant at the start and end of each panel."""
    q = mesh.order
    x = np.polynomial.legendre.leggauss(q)[0]
    L = lagrange_matrix(x, np.array([-1.0, 1.0]))
    F = np.asarray(f).reshape(mesh.n_panels, q)
    return F @ L.T


def lagrange_matrix(x, y):
    """Matrix evaluating the interpolant through nodes x at points y."""
    n = len(x)
    w = np.array([1.0 / np.prod([x[j] - x[k] for k in range(n) if k != j]) for j in range(n)])
    diff = y[:, None] - x[None]
    exact = np.isclose(diff, 0.0, atol=1e-15, rtol=0)
    diff[exact] = 1.0
    M = w[None] / diff
    M /= M.sum(1, keepdims=True)
    rows = np.any(exact, axis=1)
    M[rows] = exact[rows].astype(float)
    return M


def gradient_energy(mesh, f):
    """Discrete ||d f / ds||^2 on the curve.

    Panelwise derivatives are integrated with the node weights; jumps of the
    interpolant across panel breakpoints add [f]^2 / h with h the local node
    spacing, so discontinuous data has a mesh-dependent (unbounded) energy.
    """
    f = np.asarray(f, dtype=complex if np.iscomplexobj(f) else float)
    df = tangential_derivative(mesh, f)
    e = float(np.sum(mesh.weights * np.abs(df) ** 2))
    ends = endpoint_values(mesh, f)
    nxt = np.roll(np.arange(mesh.n_panels), -1)
    jump = ends[nxt, 0] - ends[:, 1]
    w = mesh.weights.reshape(mesh.n_panels, mesh.order)
    h = 0.5 * (w[:, -1] + w[nxt, 0])
    e += float(np.sum(np.abs(jump) ** 2 / h))
    return e


def gradient_ratio(mesh, f):
    f = np.asarray(f)
    nrm = float(np.sum(mesh.weights * np.abs(f) ** 2))
    if nrm == 0:
        raise ValueError("zero function has no gradient ratio")
    return float(np.sqrt(gradient_energy(mesh, f) / nrm))
