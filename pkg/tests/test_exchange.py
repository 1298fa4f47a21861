import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from yukawa_exchange.dtn import MembershipError, dtn_matrix, is_member, sobolev_norm, spectral_basis
from yukawa_exchange.exchange import (MultiTrace, PartitionError, ScatterContext, apply_pi0, apply_pi_gamma,
                                      apply_scattering, assemble_A, claeys_solve, disc_partition,
                                      exchange_defect, involution_defect, load_partition, make_partition,
                                      multi_domain_pi, multitrace_norm, partition_from_dict, pi0_matrix,
                                      robin_traces, smooth_random_trace, source_traces, strip_bump,
                                      strip_indicator, trace_error, two_domain_context, two_domain_partition,
                                      two_domain_pi)
from yukawa_exchange.geometry import GradingPolicy, build_mesh, circle, dyadic, ellipse, unit_square
from yukawa_exchange.harness import fit_slope
from yukawa_exchange.oracles import disc_double_layer_eig

G = 0.1


@pytest.fixture(scope="module")
def ell():
    m = build_mesh(ellipse(1.0, 0.6), 256)
    Pi = two_domain_pi(m, G)
    bases = [spectral_basis(m, G, "exterior"), spectral_basis(m, G, "interior")]
    T0, T1 = dtn_matrix(m, "exterior", G), dtn_matrix(m, "interior", G)
    return m, Pi, bases, T0, T1


def rel(a, b, bases):
    return multitrace_norm(a - b, -0.5, bases) / multitrace_norm(b, -0.5, bases)


def test_pi0_examples():
    f, g = np.arange(5.0), np.ones(5)
    out = apply_pi0(MultiTrace((f, g)))
    np.testing.assert_array_equal(out.parts[0], -g)
    np.testing.assert_array_equal(out.parts[1], -f)
    back = apply_pi0(out)
    np.testing.assert_array_equal(back.vector(), np.concatenate([f, g]))
    fixed = apply_pi0(MultiTrace((f, -f)))
    np.testing.assert_array_equal(fixed.vector(), np.concatenate([f, -f]))
    with pytest.raises(PartitionError):
        apply_pi0(MultiTrace((f, np.ones(4))))


def test_multitrace_arithmetic():
    a = MultiTrace((np.ones(3), np.zeros(2)))
    b = MultiTrace.from_vector(np.arange(5.0), a.sizes)
    assert b.sizes == [3, 2]
    np.testing.assert_array_equal((a + b).vector(), 1 + np.arange(5.0) - np.r_[0, 0, 0, 1, 1])
    np.testing.assert_array_equal((2 * a - a).vector(), a.vector())


def test_a_block_structure(ell):
    m, Pi, *_ = ell
    A = assemble_A(m, G).matrix
    D = Pi.matrix - pi0_matrix(Pi.partition).matrix
    # exact up to the rounding of (-I - A) + I on the diagonal
    np.testing.assert_allclose(D, np.block([[-A, -A], [A, A]]), rtol=0, atol=2e-16)
    np.testing.assert_array_equal(Pi.block(1, 0), -np.eye(m.n) + A)


def test_multi_domain_reduces_to_two_domain(ell):
    m, Pi, *_ = ell
    M = multi_domain_pi(two_domain_partition(m), G).matrix
    assert np.abs(M - Pi.matrix).max() <= 1e-13
    # separate meshes of the same curve give the same operator
    d = disc_partition(n=128)
    Pd = multi_domain_pi(d, G).matrix
    Pt = two_domain_pi(d.meshes[1], G).matrix
    assert np.abs(Pd - Pt).max() <= 1e-12


def test_a_on_disc_modes():
    m = build_mesh(circle(), 512)
    th = np.arctan2(m.nodes[:, 1], m.nodes[:, 0])
    A = assemble_A(m, G).matrix
    for n in range(9):
        f = np.cos(n * th)
        lam = -2 * (disc_double_layer_eig(n, 1.0, G) - 0.5)
        assert np.abs(A @ f - lam * f).max() <= 1e-6


def test_a_is_order_gamma_on_smooth_data():
    gs, r = [0.2, 0.1, 0.05, 0.025], []
    for g in gs:
        m = build_mesh(ellipse(1.0, 0.5), 256, GradingPolicy(panel_length=min(0.25, 8 * g)))
        f = np.cos(np.pi * m.nodes[:, 0]) + m.nodes[:, 1]
        Af = assemble_A(m, g).matrix @ f
        r.append(np.sqrt(np.sum(m.weights * Af ** 2) / np.sum(m.weights * f ** 2)))
    slope, _ = fit_slope(gs, r, drop=0)
    assert 0.85 <= slope <= 1.15


def test_kernel_vectors(ell):
    m, Pi, bases, T0, T1 = ell
    f = smooth_random_trace(m, np.random.default_rng(0))
    phi = MultiTrace((f, -f))
    assert rel(Pi @ phi, phi, bases) <= 1e-12
    assert exchange_defect(phi, -0.5, Pi, bases) <= 1e-12
    h = smooth_random_trace(m, np.random.default_rng(1))
    psi = MultiTrace((T0 @ h, T1 @ h))
    assert rel(Pi @ psi, -1 * psi, bases) <= 1e-10


def test_sum_difference_identity(ell):
    m, Pi, bases, T0, T1 = ell
    A = assemble_A(m, G).matrix
    h = smooth_random_trace(m, np.random.default_rng(2))
    r = A @ (T0 @ h + T1 @ h) - (T0 @ h - T1 @ h)
    assert sobolev_norm(r, -0.5, bases[1]) / sobolev_norm(h, 0.5, bases[1]) <= 1e-10


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_involution_on_random_traces(ell, seed):
    m, Pi, bases, *_ = ell
    rng = np.random.default_rng(seed)
    phi = MultiTrace((smooth_random_trace(m, rng), smooth_random_trace(m, rng)))
    assert involution_defect(Pi, [phi], bases) <= 1e-10


def test_exchange_defect_arguments(ell):
    m, Pi, bases, *_ = ell
    phi = MultiTrace((np.ones(m.n), np.ones(m.n)))
    with pytest.raises(ValueError):
        exchange_defect(phi, 0.5, Pi, bases)
    rough = MultiTrace((np.cos(60 * np.pi * m.arclength / m.length), np.ones(m.n)))
    with pytest.raises(MembershipError):
        exchange_defect(rough, -0.5, Pi, bases, M=4.0)
    with pytest.raises(ValueError):
        apply_pi_gamma(phi, 0.0, mesh=m)
    np.testing.assert_array_equal(apply_pi_gamma(phi, G, mesh=m).vector(), (Pi @ phi).vector())


def test_scattering_identities(ell):
    m, _, bases, _, T1 = ell
    ctx = two_domain_context(T1)
    assert ctx.omega == G
    tn = smooth_random_trace(m, np.random.default_rng(3))
    z = np.zeros(m.n)
    np.testing.assert_array_equal(apply_scattering((z, tn), ctx, "local"), tn)
    np.testing.assert_array_equal(apply_scattering((z, tn), ctx, "nonlocal"), tn)
    td = smooth_random_trace(m, np.random.default_rng(4))
    diff = apply_scattering((td, tn), ctx, "local") - apply_scattering((td, tn), ctx, "nonlocal")
    np.testing.assert_allclose(diff, 1j * (td - T1 @ td), atol=1e-13)
    with pytest.raises(ValueError):
        robin_traces(td, tn, ctx, "sideways")
    with pytest.raises(ValueError):
        ScatterContext(T1, 0.0)


def test_scattering_non_expansive_on_genuine_solutions(ell):
    m, _, bases, _, T1 = ell
    rng = np.random.default_rng(5)
    # exterior sources: genuine solutions of the Yukawa equation inside the ellipse
    ang = rng.uniform(0, 2 * np.pi, 6)
    pts = np.c_[1.3 * np.cos(ang), 0.9 * np.sin(ang)]
    td, tn = source_traces(pts, rng.standard_normal(6), m, m.normals, G)
    for omega in (G, 1.0):
        ctx = ScatterContext(T1, omega)
        tp, tm = robin_traces(td, tn, ctx)
        n_in = np.hypot(sobolev_norm(tm.real, -0.5, bases[1]), sobolev_norm(tm.imag, -0.5, bases[1]))
        n_out = np.hypot(sobolev_norm(tp.real, -0.5, bases[1]), sobolev_norm(tp.imag, -0.5, bases[1]))
        assert n_out <= (1 + 1e-6) * n_in


def test_solver_zero_data_is_fixed_point():
    part = disc_partition(n=128)
    res = claeys_solve(part, G, (np.zeros((0, 2)), []))
    assert res.converged and res.iterations == 0 and res.history == [0.0]
    assert all(np.all(p == 0) for p in res.incoming.parts)


def test_solver_disc_converges(tmp_path):
    part = disc_partition(n=256)
    rhs = (np.array([[0.2, -0.1], [1.5, 0.3]]), np.array([1.0, -0.5]))
    res = claeys_solve(part, G, rhs)
    assert res.converged
    h = np.array(res.history)
    assert np.all(h[6:] / h[5:-1] <= 0.9)
    assert trace_error(res, part, G, rhs) <= 1e-6
    res.history_csv(tmp_path / "h.csv")
    d = np.loadtxt(tmp_path / "h.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(d[:, 1], h)


def test_partition_validation(tmp_path):
    a, b = build_mesh(circle(), 64), build_mesh(circle(), 128)
    with pytest.raises(PartitionError):
        make_partition([a, b], [-1, 1])
    with pytest.raises(PartitionError):
        make_partition([a, build_mesh(circle(), 64)], [1, 1])
    d = {"mesh": {"n": 64},
         "subdomains": [{"name": "disc", "curve": circle().to_dict()},
                        {"name": "outside", "curve": circle().to_dict(), "unbounded": True}],
         "interfaces": [["disc", "outside"]]}
    p = tmp_path / "part.json"
    p.write_text(json.dumps(d))
    part = load_partition(p)
    assert part.names == ("outside", "disc") and part.signs == (-1, 1)
    assert part.interfaces() == [(0, 1)]
    d2 = dict(d, subdomains=d["subdomains"] + [{"name": "far", "curve": circle(1.0, (5.0, 0.0)).to_dict()}])
    with pytest.raises(PartitionError):
        partition_from_dict(d2)


def test_indicator_is_not_in_x():
    for g in (0.1, 0.05):
        m = build_mesh(unit_square(), 256, dyadic(gamma=g))
        w = 0.25 * g * np.sqrt(2)
        f = strip_indicator(m, (0.0, 0.0), (0.0, 1.0), w)
        assert f.sum() > 0
        assert not is_member(f, m, g ** -0.5)
        b = strip_bump(m, (0.0, 0.0), (0.0, 1.0), 0.2)
        assert b.max() > 0.9 and np.all(b[m.nodes[:, 0] > 1e-12] == 0)
