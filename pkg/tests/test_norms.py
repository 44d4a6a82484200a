import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from nsfem.assembly import apply_constraints, assemble_system, constrain_symmetric
from nsfem.elements import build_space, interpolate
from nsfem.mesh import Mesh, generate_structured_square
from nsfem.norms import (ConstantsReport, DualNormContext, calibrate_c1, divergence_free_basis,
                         equivalence_constant, inf_sup_constant, inf_sup_spectrum, l2_project_Vh, norm,
                         triple_bar)
from nsfem.verification import manufactured_solution


@pytest.fixture(scope="module")
def th2():
    system = assemble_system(build_space(generate_structured_square(2), "taylor-hood"))
    return system, DualNormContext(system)


@pytest.fixture(scope="module")
def th4():
    system = assemble_system(build_space(generate_structured_square(4), "taylor-hood"))
    ctx = DualNormContext(system)
    return system, ctx, divergence_free_basis(system)


def test_norm_basics(th2):
    system, _ = th2
    s = system.space
    assert norm(system, np.zeros(s.n_vel_dofs)) == 0
    assert norm(system, np.ones(s.n_pres_dofs), "L2", "pressure") == pytest.approx(1.0, abs=1e-14)
    u = interpolate(s, lambda x, y, t: (x, 0 * x))
    assert norm(system, u, "H1semi") == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        norm(system, np.zeros(3))
    with pytest.raises(ValueError):
        norm(system, u, "H2")


def test_pressure_h1_seminorm(th2):
    system, _ = th2
    q = interpolate(system.space, lambda x, y, t: 2 * x + y, which="pressure")
    assert norm(system, q, "H1semi", "pressure") == pytest.approx(math.sqrt(5), abs=1e-12)


def test_dual_norms_zero_and_homogeneity(th4):
    _, ctx, _ = th4
    w = np.random.default_rng(0).standard_normal(ctx.space.n_vel_dofs)
    assert ctx.dual_norm_Xh(0 * w) == 0 and ctx.dual_norm_Vh(0 * w) == 0
    assert ctx.dual_norm_Xh(2 * w) == pytest.approx(2 * ctx.dual_norm_Xh(w), rel=1e-13)
    assert ctx.dual_norm_Vh(2 * w) == pytest.approx(2 * ctx.dual_norm_Vh(w), rel=1e-13)


def test_dual_norm_of_riesz_image(th4):
    system, ctx, _ = th4
    z = np.random.default_rng(1).standard_normal(ctx.space.n_vel_dofs)
    z[ctx.space.dirichlet_dofs] = 0
    assert ctx.dual_norm_Xh(system.A_visc @ z) == pytest.approx(norm(system, z, "H1semi"), rel=1e-10)


def test_dual_norm_Xh_dominates_sampled_sup(th4):
    system, ctx, _ = th4
    rng = np.random.default_rng(2)
    s = ctx.space
    w = rng.standard_normal(s.n_vel_dofs)
    w[s.dirichlet_dofs] = 0
    closed = ctx.dual_norm_Xh(w)
    V = rng.standard_normal((s.n_vel_dofs, 1000))
    V[s.dirichlet_dofs] = 0
    ratios = (w @ V) / np.sqrt(np.einsum("ij,ij->j", V, system.A_visc @ V))
    assert np.abs(ratios).max() <= closed * (1 + 1e-12)


def test_Vh_below_Xh(th4):
    _, ctx, _ = th4
    rng = np.random.default_rng(3)
    for _ in range(50):
        w = rng.standard_normal(ctx.space.n_vel_dofs)
        assert ctx.dual_norm_Vh(w) <= ctx.dual_norm_Xh(w) + 1e-12


def test_Vh_dual_norm_brute_force(th2):
    """Against an explicit reduction on a V_h basis: sup over span(Z) of w.Zc / sqrt(c^T Z^T A Z c)."""
    system, ctx = th2
    Z = divergence_free_basis(system)
    AZ = Z.T @ (system.A_visc @ Z)
    rng = np.random.default_rng(4)
    for _ in range(10):
        w = rng.standard_normal(ctx.space.n_vel_dofs)
        w[ctx.space.dirichlet_dofs] = 0
        g = Z.T @ w
        brute = math.sqrt(g @ sla.solve(AZ, g, assume_a="pos"))
        assert ctx.dual_norm_Vh(w) == pytest.approx(brute, abs=1e-9)


def test_triple_bar():
    c, dt, N = 2.5, 0.1, 10
    series = np.full(N + 1, c)
    assert triple_bar(series, dt, np.inf) == c
    assert triple_bar(series, dt, 2) == pytest.approx(c * math.sqrt(N * dt + dt), rel=1e-14)
    one = np.zeros(N + 1)
    one[4] = c
    assert triple_bar(one, dt, 2) == pytest.approx(c * math.sqrt(dt), rel=1e-14)
    assert triple_bar(series, dt, 1) == pytest.approx(c * (N + 1) * dt)
    with pytest.raises(ValueError):
        triple_bar([], dt, 2)
    with pytest.raises(ValueError):
        triple_bar(series, dt, 3)


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=40), st.floats(1e-4, 1.0))
def test_triple_bar_comparison(values, dt):
    t_plus = dt * len(values)
    assert triple_bar(values, dt, np.inf) >= triple_bar(values, dt, 2) / math.sqrt(t_plus) * (1 - 1e-12)


def test_inf_sup_taylor_hood_levels():
    alphas = [inf_sup_constant(assemble_system(build_space(generate_structured_square(n), "taylor-hood")))
              for n in (2, 4, 8)]
    assert min(alphas) > 0.1
    assert max(alphas) / min(alphas) < 1.1


def test_inf_sup_p1p1_declines():
    spectra = [inf_sup_spectrum(assemble_system(build_space(generate_structured_square(n), "p1p1")))
               for n in (4, 8, 16)]
    assert all(sp_.n_spurious > 0 and sp_.alpha == 0 for sp_ in spectra)
    red = [sp_.reduced_alpha for sp_ in spectra]
    assert red[1] / red[0] < 0.9 and red[2] / red[1] < 0.9


def test_inf_sup_stable_spectrum_has_no_spurious_modes():
    system = assemble_system(build_space(generate_structured_square(4), "mini"))
    spec = inf_sup_spectrum(system)
    assert spec.n_spurious == 0
    assert spec.alpha == pytest.approx(spec.reduced_alpha, rel=1e-12)
    assert spec.alpha == pytest.approx(inf_sup_constant(system), rel=1e-10)


def test_inf_sup_certificate(th4):
    """The minimizing pressure attains alpha: sup_v (q, div v)/(|q| |grad v|) via a Riesz solve."""
    system, ctx, _ = th4
    alpha, q = inf_sup_constant(system, ctx, return_mode=True)
    assert abs(system.mean_vec @ q) <= 1e-12 * np.linalg.norm(q)
    g = system.B_div.T @ q
    sup = ctx.dual_norm_Xh(g) / norm(system, q, "L2", "pressure")
    assert sup == pytest.approx(alpha, abs=1e-8)


def test_inf_sup_renumbering_invariance():
    m = generate_structured_square(4)
    perm = np.random.default_rng(5).permutation(m.n_vertices)
    inv = np.argsort(perm)
    m2 = Mesh(m.vertices[perm], inv[m.triangles], inv[m.boundary_edges], m.boundary_markers)
    a1 = inf_sup_constant(assemble_system(build_space(m, "taylor-hood")))
    a2 = inf_sup_constant(assemble_system(build_space(m2, "taylor-hood")))
    assert a1 == pytest.approx(a2, abs=1e-10)


def test_equivalence_constant_properties(th4):
    system, ctx, Z = th4
    c_star = equivalence_constant(system, ctx, Z)
    assert 0 < c_star <= 1 + 1e-12
    rng = np.random.default_rng(6)
    for _ in range(50):
        w = ctx.pairing(Z @ rng.standard_normal(Z.shape[1]))
        x, v = ctx.dual_norm_Xh(w), ctx.dual_norm_Vh(w)
        assert v <= x + 1e-10
        assert c_star * x <= v + 1e-10


def test_equivalence_constant_attained(th4):
    """The minimizer of the reduced pencil attains C_*: an independent dense check."""
    system, ctx, Z = th4
    c_star = equivalence_constant(system, ctx, Z)
    # brute force: minimize the ratio over the V_h basis via the same pencil built densely
    free = system.space.free_dofs
    M = system.M_vel.toarray()
    A = system.A_visc.toarray()[np.ix_(free, free)]
    MZ = (M @ Z)[free]
    SX = MZ.T @ np.linalg.solve(A, MZ)
    Zf = Z[free]
    G = Z.T @ M @ Z
    SV = G @ np.linalg.solve(Zf.T @ A @ Zf, G)
    lam = sla.eigh(SV, SX, eigvals_only=True)
    assert c_star == pytest.approx(math.sqrt(lam[0]), rel=1e-8)


def test_equivalence_bounded_across_levels():
    cs = [equivalence_constant(assemble_system(build_space(generate_structured_square(n), "taylor-hood")))
          for n in (2, 4, 8)]
    assert all(0 < c <= 1 for c in cs)
    assert max(cs) / min(cs) < 2


def test_projection_identity_on_Vh(th4):
    system, ctx, Z = th4
    s = system.space
    stokes_mass = apply_constraints(system, K=system.M_vel)
    c = Z @ np.random.default_rng(7).standard_normal(Z.shape[1])
    from nsfem.sparse_linalg import factorize
    x = factorize(stokes_mass.matrix).solve(stokes_mass.rhs(system.M_vel @ c))
    assert np.abs(stokes_mass.split(x)[0] - c).max() <= 1e-10 * np.abs(c).max()


def test_projection_orthogonality(th4):
    system, ctx, Z = th4
    ms = manufactured_solution("stream_vortex")
    coeffs, ratio = l2_project_Vh(system, ms.u, ms.grad_u, 0.0)
    from nsfem.assembly import assemble_load
    from nsfem.elements import quadrature_rule
    Fu = assemble_load(system.space, ms.u, 0.0, quadrature_rule(7))
    rng = np.random.default_rng(8)
    for _ in range(20):
        v = Z @ rng.standard_normal(Z.shape[1])
        assert abs(v @ (system.M_vel @ coeffs) - v @ Fu) <= 1e-10 * np.linalg.norm(v)
    assert np.abs(system.B_div @ coeffs).max() <= 1e-10
    assert 0 < ratio < 2


def test_projection_ratio_bounded():
    ms = manufactured_solution("stream_vortex")
    ratios = [l2_project_Vh(assemble_system(build_space(generate_structured_square(n), "taylor-hood")),
                            ms.u, ms.grad_u)[1] for n in (2, 4, 8, 16)]
    assert max(ratios) / min(ratios) < 1.5


def test_calibrate_c1_is_a_lower_bound_of_sampled_ratios(th2):
    system, _ = th2
    best, fields = calibrate_c1(system, n_samples=8, seed=3)
    assert best > 0
    assert best == max(r for _, r in fields)
    # any other sampled triple never exceeds the sup it was derived from
    rng = np.random.default_rng(9)
    s = system.space
    for u, ratio in fields[:3]:
        for _ in range(30):
            v, z = rng.standard_normal((2, s.n_vel_dofs))
            v[s.dirichlet_dofs] = z[s.dirichlet_dofs] = 0
            b = abs(z @ (system.N_conv(u) @ v))
            bound = ratio * norm(system, u, "H1semi") * norm(system, v, "H1semi") * norm(system, z, "H1semi")
            assert b <= bound * (1 + 1e-10)


def test_calibrate_c1_deterministic(th2):
    system, _ = th2
    assert calibrate_c1(system, 4, seed=1)[0] == calibrate_c1(system, 4, seed=1)[0]


def test_constants_report_json():
    r = ConstantsReport(4, 0.35, 0.36, None, 0.2, 1.0)
    assert '"c_star": null' in r.to_json()
