import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cblab.lattice import (Ball, Box, DegenerateDiscretization, DiscreteField, InteractionStencil,
                           InvalidStencil, LatticeDomain, Polygon, StencilLeavesDomain,
                           build_domain, discrete_divergence, discrete_gradient,
                           harmonic_extension, norm)

NN1 = InteractionStencil.nearest_neighbour(1)
NN2 = InteractionStencil.nearest_neighbour(2)


def interval(eps=0.1, lo=0.0, hi=1.0, stencil=NN1):
    return build_domain(Box([lo], [hi]), eps, stencil)


def square(eps=0.25, side=1.0, stencil=NN2):
    return build_domain(Box([0.0, 0.0], [side, side]), eps, stencil)


# ------------------------------------------------------------ stencils


def test_stencil_radii():
    assert NN1.r_max == 1.0 and NN1.r0 == 1.0
    S = InteractionStencil.square_with_diagonals()
    assert S.r_max == pytest.approx(np.sqrt(2.0))
    assert InteractionStencil.triangular().size == 6


@pytest.mark.parametrize("dirs", [
    [[1], [2]],                 # not closed under negation
    [[0], [1], [-1]],           # zero direction
    [[2], [-2]],                # spans 2Z only
    [[1, 1], [-1, -1], [1, -1], [-1, 1]],  # index-2 sublattice
])
def test_invalid_stencils(dirs):
    with pytest.raises(InvalidStencil, match="invalid stencil"):
        InteractionStencil(dirs)


def test_reflection_of_bond_matrix():
    S = InteractionStencil.triangular()
    A = np.random.default_rng(0).standard_normal((2, S.size))
    TA = S.reflect(A)
    for r, rho in enumerate(S.directions):
        assert np.array_equal(TA[:, r], -A[:, S.index(-rho)])
    assert np.array_equal(S.reflect(TA), A)


# ---------------------------------------------------------- classification


def test_unit_square_quarter_spacing():
    dom = square(0.25)
    assert (dom.n_points, dom.n_semi, dom.n_interior, dom.n_boundary) == (9, 1, 0, 9)
    assert np.allclose(dom.coords[dom.semi[0]], [0.5, 0.5])


def test_unit_square_spacing_two_is_degenerate():
    with pytest.raises(DegenerateDiscretization, match="degenerate discretization"):
        square(2.0)


def test_interval_tenth_spacing():
    dom = interval(0.1)
    assert (dom.n_points, dom.n_semi, dom.n_interior) == (9, 7, 5)


def test_points_are_lexicographic_and_classes_nested():
    dom = build_domain(Ball([0.0, 0.0], 1.0), 0.1, NN2)
    z = dom.points
    order = np.lexsort(z.T[::-1])
    assert np.array_equal(order, np.arange(len(z)))
    assert set(dom.interior) <= set(dom.semi) <= set(range(dom.n_points))
    assert set(dom.boundary) == set(range(dom.n_points)) - set(dom.interior)


@pytest.mark.parametrize("shape,stencil", [
    (Box([0, 0], [1, 1.5]), InteractionStencil.square_with_diagonals()),
    (Ball([0.1, 0.0], 0.9), InteractionStencil.triangular()),
    (Polygon([[0, 0], [1, 0], [0.8, 1.1], [0.1, 0.7]]), NN2),
])
def test_stencil_invariants(shape, stencil):
    dom = build_domain(shape, 0.08, stencil)
    pts = {tuple(p) for p in dom.points}
    semi = {tuple(dom.points[i]) for i in dom.semi}
    for i in dom.semi:
        for rho in stencil.directions:
            assert tuple(dom.points[i] + rho) in pts
    for i in dom.interior:
        for rho in stencil.directions:
            assert tuple(dom.points[i] - rho) in semi


def test_polygon_distance_matches_box():
    P = Polygon([[0, 0], [1, 0], [1, 1], [0, 1]])
    B = Box([0, 0], [1, 1])
    x = np.random.default_rng(1).uniform(0.01, 0.99, (50, 2))
    assert np.allclose(P.signed_distance(x), B.signed_distance(x), atol=1e-12)


# ----------------------------------------------------------- differences


def test_gradient_of_affine_is_constant():
    dom = square(0.05, stencil=InteractionStencil.square_with_diagonals())
    A = np.array([[1.2, 0.3], [-0.4, 0.9]])
    y = dom.coords @ A.T + np.array([0.5, -1.0])
    D = dom.gradient(y)
    assert np.allclose(D, A @ dom.stencil.matrix, atol=1e-12)
    assert np.allclose(dom.gradient(np.ones_like(y)), 0.0)


def test_gradient_hand_example():
    dom = interval(0.5, 0.0, 2.0)
    y = DiscreteField(dom, np.array([[0.0], [1.0], [3.0]]))
    D = discrete_gradient(y, [1.0])
    assert D[0, NN1.index([1])] == 4.0
    assert D[0, NN1.index([-1])] == -2.0


def test_gradient_outside_semi_interior():
    dom = interval(0.1)
    y = DiscreteField(dom, dom.coords.copy())
    with pytest.raises(StencilLeavesDomain, match="stencil leaves domain"):
        discrete_gradient(y, [0.1])


def test_divergence_of_constant_and_affine_bond_fields():
    dom = square(0.1)
    R = dom.stencil.matrix
    C = np.random.default_rng(2).standard_normal((2, R.shape[1]))
    assert np.allclose(dom.divergence(np.broadcast_to(C, (dom.n_semi, 2, R.shape[1]))), 0.0, atol=1e-12)
    L = np.random.default_rng(3).standard_normal((R.shape[1], 2, 2))
    x = dom.coords[dom.semi]
    M = C[None] + np.einsum("rjk,nk->njr", L, x)
    expected = np.einsum("rjk,kr->j", L, R)
    assert np.allclose(dom.divergence(M), expected, atol=1e-10)
    xi = dom.coords[dom.interior[0]]
    assert np.allclose(discrete_divergence(dom, M, xi), expected, atol=1e-10)


def test_divergence_outside_interior():
    dom = interval(0.1)
    M = np.zeros((dom.n_semi, 1, 2))
    with pytest.raises(StencilLeavesDomain):
        discrete_divergence(dom, M, [0.15 + 0.05])


def test_adjointness_against_double_sum():
    dom = interval(1 / 6)          # 5 points
    assert dom.n_points == 5
    rng = np.random.default_rng(4)
    M = rng.standard_normal((dom.n_semi, 1, 2))
    u = dom.embed(rng.standard_normal((dom.n_interior, 1)))
    eps = dom.eps
    lhs = eps * np.sum(u[dom.interior] * -dom.divergence(M))
    rhs = 0.0
    for s, i in enumerate(dom.semi):
        for r, rho in enumerate(dom.stencil.directions):
            j = dom.index_of(dom.points[i] + rho)
            rhs += eps * M[s, 0, r] * (u[j, 0] - u[i, 0]) / eps
    assert lhs == pytest.approx(rhs, rel=1e-13)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.sampled_from([1, 2]), n=st.integers(6, 14))
def test_summation_by_parts(seed, d, n):
    rng = np.random.default_rng(seed)
    stencil = InteractionStencil.nearest_neighbour(d) if d == 1 or seed % 2 else \
        InteractionStencil.triangular()
    dom = build_domain(Box([0.0] * d, [1.0] * d), 1.0 / n, stencil)
    M = rng.standard_normal((dom.n_semi, d, stencil.size))
    u = dom.embed(rng.standard_normal((dom.n_interior, d)))
    vol = dom.eps ** d
    lhs = vol * np.sum(u[dom.interior] * -dom.divergence(M))
    rhs = vol * np.sum(M * dom.gradient(u))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs), vol * np.sum(np.abs(M * dom.gradient(u))))


# ---------------------------------------------------------------- norms


def test_zero_field_norms():
    dom = square(0.1)
    z = np.zeros((dom.n_points, 2))
    for kind in ("l2_interior", "l2_points", "h1"):
        assert norm(DiscreteField(dom, z), kind) == 0.0
    assert dom.norm(np.zeros((dom.n_interior, 2)), "h_minus1") == 0.0
    assert dom.norm(np.zeros((dom.n_boundary, 2)), "boundary_seminorm") == 0.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), shape=st.sampled_from(["interval", "square", "ball"]))
def test_poincare_and_duality(seed, shape):
    rng = np.random.default_rng(seed)
    if shape == "interval":
        dom = interval(1 / 23, 0.0, 2.0)
    elif shape == "square":
        dom = square(1 / 13)
    else:
        dom = build_domain(Ball([0.0, 0.0], 0.8), 0.1, InteractionStencil.triangular())
    C = dom.diameter + 1.0
    assert dom.poincare_constant == C
    u = rng.standard_normal((dom.n_interior, dom.dim)) * rng.uniform(0.1, 10)
    full = dom.embed(u)
    assert dom.l2_norm(full) <= C * dom.h1_norm(full)
    assert dom.hminus1_norm(u) <= C * dom.l2_norm(u)


def test_hminus1_equals_sup_definition():
    dom = interval(1 / 22, 0.0, 1.0)
    n = dom.n_interior
    assert n <= 20
    rng = np.random.default_rng(5)
    r = rng.standard_normal((n, 1))
    # Gram matrix of the h¹ inner product assembled from canonical basis pairs
    E = np.eye(n)
    G = np.array([[dom.h1_inner(dom.embed(E[i][:, None]), dom.embed(E[j][:, None])) for j in range(n)]
                  for i in range(n)])
    b = dom.eps * r[:, 0]
    sup = np.sqrt(b @ np.linalg.solve(G, b))
    assert dom.hminus1_norm(r) == pytest.approx(sup, rel=1e-8)
    # no test function exceeds it, and the maximizer attains it
    phis = rng.standard_normal((2000, n))
    vals = (phis @ b) / np.sqrt(np.einsum("ki,ij,kj->k", phis, G, phis))
    assert vals.max() <= sup * (1 + 1e-12)
    phi = np.linalg.solve(G, b)
    assert (phi @ b) / np.sqrt(phi @ G @ phi) == pytest.approx(sup, rel=1e-10)


# ---------------------------------------------------- harmonic extension


def test_harmonic_extension_reproduces_affine_and_constants():
    dom = build_domain(Ball([0.0, 0.0], 1.0), 0.1, InteractionStencil.square_with_diagonals())
    A = np.array([[1.0, 0.2], [0.1, 0.8]])
    y = dom.coords @ A.T + 0.3
    assert np.allclose(dom.harmonic_extension(y[dom.boundary]), y, atol=1e-10)
    c = np.full((dom.n_boundary, 2), 0.7)
    assert np.allclose(dom.harmonic_extension(c), 0.7, atol=1e-10)


def test_harmonic_extension_orthogonality_and_projection():
    dom = interval(0.1)
    g = np.random.default_rng(6).standard_normal((dom.n_boundary, 1))
    Tg = harmonic_extension(dom, g)
    assert Tg.support == "all_points"
    assert np.array_equal(Tg.values[dom.boundary], g)
    for i in range(dom.n_interior):
        e = np.zeros((dom.n_interior, 1))
        e[i] = 1.0
        assert abs(dom.h1_inner(Tg.values, dom.embed(e))) <= 1e-10
    again = dom.harmonic_extension(Tg.values[dom.boundary])
    assert np.allclose(again, Tg.values, atol=1e-12)
    g2 = np.random.default_rng(7).standard_normal((dom.n_boundary, 1))
    lin = dom.harmonic_extension(2 * g - 3 * g2)
    assert np.allclose(lin, 2 * Tg.values - 3 * dom.harmonic_extension(g2), atol=1e-12)


def test_zero_on_boundary_support_is_enforced():
    dom = interval(0.1)
    with pytest.raises(ValueError):
        DiscreteField(dom, np.ones((dom.n_points, 1)), "zero_on_boundary_layer")
    f = DiscreteField.from_function(dom, lambda x: x ** 2, "zero_on_boundary_layer")
    assert np.all(f.values[dom.boundary] == 0)
