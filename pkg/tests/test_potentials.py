import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cblab.lattice import TRIANGULAR_BASIS, InteractionStencil
from cblab.potentials import (FTMassSpring, Harmonic, LennardJones, LinearizationTensor, Morse,
                              PairSum, PotentialSingularity, QuadraticForm, SymmetryViolation,
                              UserComposite, cauchy_born, linearize, make_pair_potential,
                              site_derivatives, site_energy, triangular_pair_potential)

LJ = LennardJones()
TRI = InteractionStencil.triangular()


def lj(r):
    return r ** -12 - 2 * r ** -6


def quartic_composite(stencil):
    """W(A) = Σ_ρ |A_ρ|⁴/4 + (A_ρ·A_{-ρ})²: reflection symmetric, non-pair."""
    neg = stencil.neg

    def energy(A):
        s = np.sum(A * A, axis=-2)
        c = np.sum(A * A[..., neg], axis=-2)
        return np.sum(0.25 * s ** 2 + c ** 2, axis=-1)

    def gradient(A):
        s = np.sum(A * A, axis=-2)[..., None, :]
        c = np.sum(A * A[..., neg], axis=-2)[..., None, :]
        return s * A + 2 * c * A[..., neg] + 2 * c[..., neg] * A[..., neg]

    def hessian(A, h=1e-6):
        d, R = A.shape[-2:]
        out = np.zeros(A.shape[:-2] + (d, R, d, R))
        for l in range(d):
            for s in range(R):
                E = np.zeros((d, R))
                E[l, s] = h
                out[..., l, s] = (gradient(A + E) - gradient(A - E)) / (2 * h)
        return out

    return UserComposite(stencil, energy, gradient, hessian)


def all_kinds():
    rng = np.random.default_rng(0)
    nn2 = InteractionStencil.nearest_neighbour(2)
    sq = InteractionStencil.square_with_diagonals()
    mixed = [Harmonic(1.0, 1.0) if np.abs(rho).sum() == 1 else LJ for rho in sq.directions]
    return {
        "pair_lj_tri": (triangular_pair_potential(LJ, 0.5), TRIANGULAR_BASIS),
        "pair_morse_nn": (PairSum(nn2, Morse(1.0, 2.0, 1.0)), np.eye(2)),
        "pair_mixed": (PairSum(sq, mixed), np.eye(2) * 1.05),
        "ft": (FTMassSpring(1.0, 2.0, 1.0, math.sqrt(2) * 0.25), np.eye(2)),
        "quadratic": (QuadraticForm(LinearizationTensor.random(nn2, rng), np.eye(2)), np.eye(2)),
        "composite": (quartic_composite(nn2), np.eye(2)),
    }


KINDS = all_kinds()


def sample(W, F, rng, scale=0.03):
    return W.stencil.bonds(F) + scale * rng.standard_normal((W.dim, W.n_bonds))


# ----------------------------------------------------------------- energy


def test_triangular_lj_energy_at_natural_state():
    W = triangular_pair_potential(LJ, bond_weight=0.5)
    A = TRI.bonds(TRIANGULAR_BASIS)
    assert np.allclose(np.linalg.norm(A, axis=0), 1.0)
    assert site_energy(W, A) == pytest.approx(-3.0, abs=1e-14)
    t = 1.07
    assert site_energy(W, TRI.bonds(t * TRIANGULAR_BASIS)) == pytest.approx(3 * lj(t), rel=1e-14)


@pytest.mark.parametrize("name", sorted(KINDS))
def test_reflection_invariance_of_energy(name):
    W, F = KINDS[name]
    rng = np.random.default_rng(1)
    for _ in range(10):
        A = sample(W, F, rng)
        assert site_energy(W, W.stencil.reflect(A)) == pytest.approx(site_energy(W, A), rel=1e-13, abs=1e-13)


def test_asymmetric_potential_rejected():
    S = InteractionStencil.nearest_neighbour(1)
    with pytest.raises(SymmetryViolation):
        UserComposite(S, lambda A: np.sum(A[..., 0, :] * np.array([1.0, 2.0]), axis=-1),
                      lambda A: A, lambda A: A)


def test_quadratic_form_energy_is_exact():
    rng = np.random.default_rng(2)
    S = InteractionStencil.square_with_diagonals()
    K = LinearizationTensor.random(S, rng)
    W = QuadraticForm(K, np.eye(2), W0=0.3)
    A0 = S.bonds(np.eye(2))
    H = rng.standard_normal(A0.shape)
    assert W.energy(A0 + H) - W.energy(A0) == pytest.approx(0.5 * K.form(H, H), rel=1e-12)
    assert np.array_equal(linearize(W, np.eye(2)).entries, K.entries)


def test_short_bond_is_a_singularity():
    W = triangular_pair_potential(LJ)
    A = TRI.bonds(TRIANGULAR_BASIS)
    A[:, 0] = 0.0
    with pytest.raises(PotentialSingularity, match="potential singularity"):
        site_energy(W, A)


def test_unknown_pair_potential():
    with pytest.raises(ValueError):
        make_pair_potential("buckingham")


# ------------------------------------------------------------ derivatives


def test_gradient_vanishes_at_triangular_natural_state():
    W = triangular_pair_potential(LJ)
    assert np.allclose(site_derivatives(W, TRI.bonds(TRIANGULAR_BASIS), 1), 0.0, atol=1e-12)


def _fd(f, A, h):
    out = []
    for idx in np.ndindex(A.shape):
        E = np.zeros_like(A)
        E[idx] = h
        out.append((f(A + E) - f(A - E)) / (2 * h))
    out = np.array(out)
    return np.moveaxis(out.reshape(A.shape + out.shape[1:]), (0, 1), (-2, -1))


# the composite's third derivative is itself a difference of its Hessian, so it is not re-checked
FD_CASES = [(n, k) for n in sorted(KINDS) for k in (1, 2, 3) if not (n == "composite" and k == 3)]


@pytest.mark.parametrize("name,order", FD_CASES)
def test_derivatives_match_finite_differences(name, order):
    W, F = KINDS[name]
    rng = np.random.default_rng(3)
    A = sample(W, F, rng)
    exact = W.derivative(A, order)
    approx = _fd(lambda B: W.derivative(B, order - 1), A, 1e-5)
    scale = max(1.0, np.max(np.abs(exact)))
    assert np.max(np.abs(exact - approx)) <= 1e-6 * scale


@pytest.mark.parametrize("name", sorted(KINDS))
def test_derivative_symmetry(name):
    W, F = KINDS[name]
    A = sample(W, F, np.random.default_rng(4))
    d, R = W.dim, W.n_bonds
    H = W.hessian(A).reshape(d * R, d * R)
    assert np.allclose(H, H.T, atol=1e-8)
    T = W.third(A).reshape((d * R,) * 3)
    for perm in [(1, 0, 2), (0, 2, 1), (2, 1, 0)]:
        assert np.allclose(T, T.transpose(perm), atol=1e-5 * max(1, np.abs(T).max()))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), name=st.sampled_from(sorted(KINDS)))
def test_reflection_identity_for_derivatives(seed, name):
    W, F = KINDS[name]
    rng = np.random.default_rng(seed)
    B = F + 0.05 * rng.standard_normal((W.dim, W.dim))
    A0 = W.stencil.bonds(B)
    H1, H2 = rng.standard_normal((2, W.dim, W.n_bonds))
    T = W.stencil.reflect
    g = W.gradient(A0)
    assert np.sum(g * T(H1)) == pytest.approx(np.sum(g * H1), rel=1e-10, abs=1e-10)
    Hs = W.hessian(A0)
    a = np.einsum("jrls,jr,ls->", Hs, T(H1), T(H2))
    b = np.einsum("jrls,jr,ls->", Hs, H1, H2)
    assert a == pytest.approx(b, rel=1e-10, abs=1e-10)


def test_third_derivative_of_quadratic_is_zero():
    W, _ = KINDS["quadratic"]
    assert np.all(W.third_norm_bound(W.reference) == 0.0)


def test_pair_norm_helpers_match_dense_tensors():
    W, F = KINDS["pair_mixed"]
    A = np.stack([sample(W, F, np.random.default_rng(s)) for s in range(5)])
    H = W.hessian(A).reshape(5, 16, 16)
    assert np.allclose(W.hessian_norm(A), np.abs(np.linalg.eigvalsh(H)).max(axis=1), rtol=1e-12)
    T = W.third(A).reshape(5, -1)
    assert np.all(W.third_norm_bound(A) <= np.linalg.norm(T, axis=1) * (1 + 1e-12))


# ------------------------------------------------------------ Cauchy-Born


def test_cauchy_born_triangular_formula():
    W = triangular_pair_potential(LJ, bond_weight=0.5)
    rng = np.random.default_rng(5)
    for _ in range(10):
        A = TRIANGULAR_BASIS + 0.1 * rng.standard_normal((2, 2))
        a1, a2 = A[:, 0], A[:, 1]
        expected = lj(np.linalg.norm(a1)) + lj(np.linalg.norm(a2)) + lj(np.linalg.norm(a2 - a1))
        assert cauchy_born(W, A) == pytest.approx(expected, rel=1e-12)
    assert cauchy_born(W, TRIANGULAR_BASIS) == pytest.approx(-3.0, abs=1e-14)


@pytest.mark.parametrize("name", sorted(KINDS))
def test_cauchy_born_tensor_relations(name):
    W, F = KINDS[name]
    K = linearize(W, F)
    L = cauchy_born(W, F, 2)
    rng = np.random.default_rng(6)
    S = W.stencil
    for _ in range(5):
        A, B = rng.standard_normal((2, W.dim, W.dim))
        assert L(A, B) == pytest.approx(K.form(S.bonds(A), S.bonds(B)), rel=1e-10, abs=1e-10)
        xi, eta = rng.standard_normal((2, W.dim))
        X = np.outer(xi, eta)
        rank1 = np.outer(xi, S.directions @ eta)
        assert L(X, X) == pytest.approx(K.form(rank1, rank1), rel=1e-10, abs=1e-10)
    # first derivative against finite differences of the energy density
    G = rng.standard_normal((W.dim, W.dim))
    h = 1e-6
    fd = (cauchy_born(W, F + h * G) - cauchy_born(W, F - h * G)) / (2 * h)
    assert np.sum(cauchy_born(W, F, 1) * G) == pytest.approx(fd, rel=1e-6, abs=1e-8)


# ------------------------------------------------------------ linearization


@pytest.mark.parametrize("t", [0.95, 1.0, 1.1])
def test_triangular_linearization_formula(t):
    W = triangular_pair_potential(LJ, bond_weight=1.0)
    K = linearize(W, t * TRIANGULAR_BASIS).entries
    v1, v2 = LJ.d1(t), LJ.d2(t)
    expected = np.zeros_like(K)
    for r, rho in enumerate(TRI.directions):
        m = TRIANGULAR_BASIS @ rho
        expected[:, r, :, r] = v1 / t * (np.eye(2) - np.outer(m, m)) + v2 * np.outer(m, m)
    assert np.max(np.abs(K - expected)) <= 1e-10 * max(1.0, np.abs(expected).max())


@pytest.mark.parametrize("alpha,kappa", [(0.25, 2.0), (0.25, 0.9), (0.4, 1.3)])
def test_ft_linearization_formula(alpha, kappa):
    K1, a1 = 1.3, 1.1
    K2, a2 = kappa * K1, math.sqrt(2) * alpha * a1
    W = FTMassSpring(K1, K2, a1, a2)
    rs = (K1 * a1 + math.sqrt(2) * K2 * a2) / (K1 + 2 * K2)
    assert W.r_star == pytest.approx(rs)
    K = linearize(W, rs * np.eye(2)).entries
    expected = np.zeros_like(K)
    for r, rho in enumerate(W.stencil.directions):
        rho = rho.astype(float)
        if np.dot(rho, rho) == 1:
            blk = np.eye(2) * K1 / 2 * (1 - a1 / rs) + np.outer(rho, rho) * K1 * a1 / (2 * rs)
        else:
            blk = np.eye(2) * K2 / 2 * (1 - a2 / (math.sqrt(2) * rs)) \
                + np.outer(rho, rho) * K2 * a2 / (4 * math.sqrt(2) * rs)
        expected[:, r, :, r] = blk
    assert np.allclose(K, expected, atol=1e-12)
    # r*·Id is stress free
    assert np.allclose(cauchy_born(W, rs * np.eye(2), 1), 0.0, atol=1e-12)


@pytest.mark.parametrize("name", sorted(KINDS))
def test_linearization_symmetries(name):
    W, F = KINDS[name]
    K = linearize(W, F)
    major, refl = K.symmetry_errors()
    assert major <= 1e-10 * max(1, np.abs(K.entries).max())
    assert refl <= 1e-10 * max(1, np.abs(K.entries).max())


def test_operator_norm_is_the_sup():
    K = LinearizationTensor.random(TRI, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    H = rng.standard_normal((4000, 2, 6))
    vals = np.abs(np.einsum("njr,jrls,nls->n", H, K.entries, H)) / np.sum(H * H, axis=(1, 2))
    assert vals.max() <= K.operator_norm * (1 + 1e-12)
    assert K.operator_norm == pytest.approx(np.abs(np.linalg.eigvalsh(K.matrix())).max())


def test_admissible_radius_is_half_shortest_bond():
    W = triangular_pair_potential(LJ)
    assert W.admissible_radius(TRI.bonds(1.2 * TRIANGULAR_BASIS)) == pytest.approx(0.6)
