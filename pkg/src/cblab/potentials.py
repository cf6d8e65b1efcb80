"""Site potentials on bond matrices, Cauchy-Born densities and linearization tensors.

A site potential W maps a bond matrix A of shape ``(d, |R|)`` to a scalar.
Every evaluator is batched over leading axes, so an array of shape
``(n, d, |R|)`` returns ``n`` energies, ``(n, d, |R|)`` gradients,
``(n, d, |R|, d, |R|)`` Hessians and ``(n, d, |R|, d, |R|, d, |R|)`` third
derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .lattice import TRIANGULAR_BASIS, InteractionStencil

SYMMETRY_TOL = 1e-10


class PotentialSingularity(ValueError):
    pass


class SymmetryViolation(ValueError):
    pass


# ---------------------------------------------------------- pair potentials


class PairPotential:
    """Radial potential V(r) with derivatives through third order."""

    name = "pair"

    def derivatives(self, r: np.ndarray, order: int) -> list[np.ndarray]:
        raise NotImplementedError

    def __call__(self, r):
        return self.derivatives(np.asarray(r, dtype=float), 0)[0]

    def d1(self, r):
        return self.derivatives(np.asarray(r, dtype=float), 1)[1]

    def d2(self, r):
        return self.derivatives(np.asarray(r, dtype=float), 2)[2]

    def d3(self, r):
        return self.derivatives(np.asarray(r, dtype=float), 3)[3]

    def params(self) -> dict:
        return {}

    def describe(self) -> dict:
        return {"name": self.name, **self.params()}

    def __eq__(self, other):
        return type(self) is type(other) and self.params() == other.params()

    def __hash__(self):
        return hash((type(self).__name__, tuple(sorted(self.params().items()))))


class LennardJones(PairPotential):
    """V(r) = depth·((r_min/r)^12 - 2(r_min/r)^6); minimum -depth at r_min."""

    name = "lennard_jones"

    def __init__(self, depth: float = 1.0, r_min: float = 1.0):
        self.depth = float(depth)
        self.r_min = float(r_min)

    def params(self):
        return {"depth": self.depth, "r_min": self.r_min}

    def derivatives(self, r, order):
        s = self.r_min / r
        s6 = s ** 6
        s12 = s6 * s6
        e = self.depth
        out = [e * (s12 - 2.0 * s6)]
        if order >= 1:
            out.append(e * (-12.0 * s12 + 12.0 * s6) / r)
        if order >= 2:
            out.append(e * (156.0 * s12 - 84.0 * s6) / r ** 2)
        if order >= 3:
            out.append(e * (-2184.0 * s12 + 672.0 * s6) / r ** 3)
        return out


class Harmonic(PairPotential):
    """V(r) = stiffness·(r - rest)²."""

    name = "harmonic"

    def __init__(self, stiffness: float = 1.0, rest: float = 1.0):
        self.stiffness = float(stiffness)
        self.rest = float(rest)

    def params(self):
        return {"stiffness": self.stiffness, "rest": self.rest}

    def derivatives(self, r, order):
        k = self.stiffness
        out = [k * (r - self.rest) ** 2]
        if order >= 1:
            out.append(2.0 * k * (r - self.rest))
        if order >= 2:
            out.append(np.full_like(r, 2.0 * k))
        if order >= 3:
            out.append(np.zeros_like(r))
        return out


class Morse(PairPotential):
    """V(r) = depth·(1 - exp(-width·(r - rest)))² - depth."""

    name = "morse"

    def __init__(self, depth: float = 1.0, width: float = 1.0, rest: float = 1.0):
        self.depth = float(depth)
        self.width = float(width)
        self.rest = float(rest)

    def params(self):
        return {"depth": self.depth, "width": self.width, "rest": self.rest}

    def derivatives(self, r, order):
        D, a = self.depth, self.width
        s = np.exp(-a * (r - self.rest))
        out = [D * (s * s - 2.0 * s)]
        if order >= 1:
            out.append(2.0 * a * D * (s - s * s))
        if order >= 2:
            out.append(2.0 * a * a * D * (2.0 * s * s - s))
        if order >= 3:
            out.append(2.0 * a ** 3 * D * (s - 4.0 * s * s))
        return out


PAIR_POTENTIALS = {"lennard_jones": LennardJones, "harmonic": Harmonic, "morse": Morse}


def make_pair_potential(name: str, **params) -> PairPotential:
    try:
        cls = PAIR_POTENTIALS[name]
    except KeyError:
        raise ValueError(f"unknown pair potential {name!r}") from None
    return cls(**params)


# ----------------------------------------------------------- site potentials


class SitePotential:
    """Base class; subclasses provide energy and derivatives on batched bond matrices."""

    kind = "abstract"

    def __init__(self, stencil: InteractionStencil):
        self.stencil = stencil

    @property
    def dim(self) -> int:
        return self.stencil.dim

    @property
    def n_bonds(self) -> int:
        return self.stencil.size

    def _as_bonds(self, A) -> np.ndarray:
        A = np.asarray(A, dtype=float)
        if A.shape[-2:] != (self.dim, self.n_bonds):
            raise ValueError(f"bond matrix must end in shape {(self.dim, self.n_bonds)}, got {A.shape}")
        return A

    def energy(self, A) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, A) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, A) -> np.ndarray:
        raise NotImplementedError

    def third(self, A) -> np.ndarray:
        raise NotImplementedError

    def derivative(self, A, order: int):
        if order == 0:
            return self.energy(A)
        if order == 1:
            return self.gradient(A)
        if order == 2:
            return self.hessian(A)
        if order == 3:
            return self.third(A)
        raise ValueError("derivative order must be 0..3")

    def hessian_action(self, A, H) -> np.ndarray:
        """D²W(A)[H, ·] for batched A and H of equal leading shape."""
        return np.einsum("...jrls,...ls->...jr", self.hessian(A), H)

    def hessian_norm(self, A) -> np.ndarray:
        """Operator norm of D²W(A) with respect to the Frobenius norm on bond matrices."""
        H = self.hessian(A)
        n = self.dim * self.n_bonds
        mats = H.reshape(H.shape[:-4] + (n, n))
        return np.max(np.abs(np.linalg.eigvalsh(mats)), axis=-1)

    def third_norm_bound(self, A) -> np.ndarray:
        """Upper bound for the trilinear operator norm of D³W(A) (Frobenius norm)."""
        T = self.third(A)
        return np.sqrt(np.sum(T.reshape(T.shape[:-6] + (-1,)) ** 2, axis=-1))

    def admissible_radius(self, reference) -> float:
        return math.inf

    def check_admissible(self, A) -> None:
        pass

    def sample_bonds(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Random admissible bond matrices used for the symmetry self-check."""
        F = np.eye(self.dim) + 0.2 * rng.standard_normal((n, self.dim, self.dim))
        return self.stencil.bonds(F) + 0.05 * rng.standard_normal((n, self.dim, self.n_bonds))

    def verify_reflection_symmetry(self, n: int = 16, seed: int = 0, tol: float = 1e-12) -> float:
        """Largest relative gap |W(A) - W(T(A))| over random samples; raises above ``tol``."""
        rng = np.random.default_rng(seed)
        A = self.sample_bonds(rng, n)
        e1 = self.energy(A)
        e2 = self.energy(self.stencil.reflect(A))
        gap = float(np.max(np.abs(e1 - e2) / np.maximum(1.0, np.abs(e1))))
        if gap > tol:
            raise SymmetryViolation(f"site potential is not reflection symmetric (gap {gap:.3e})")
        return gap

    def describe(self) -> dict:
        return {"kind": self.kind, "stencil": self.stencil.directions.tolist()}


def _sym_outer3(u: np.ndarray) -> np.ndarray:
    """δ_ij u_k + δ_ik u_j + δ_jk u_i for u of shape (..., d)."""
    d = u.shape[-1]
    eye = np.eye(d)
    return (np.einsum("ij,...k->...ijk", eye, u) + np.einsum("ik,...j->...ijk", eye, u)
            + np.einsum("jk,...i->...ijk", eye, u))


class PairSum(SitePotential):
    """W(A) = w·Σ_ρ V_ρ(|A_ρ|) with one radial potential per direction.

    ``bond_weight`` w defaults to 1/2, which counts every bond once when the
    site energies are summed over a lattice.
    """

    kind = "pair_sum"

    def __init__(self, stencil: InteractionStencil, pair, bond_weight: float = 0.5,
                 min_bond: float = 1e-6, check: bool = True):
        super().__init__(stencil)
        if isinstance(pair, PairPotential):
            pairs = [pair] * stencil.size
        else:
            pairs = list(pair)
            if len(pairs) != stencil.size:
                raise ValueError("need one pair potential per stencil direction")
        self.pairs = pairs
        self.bond_weight = float(bond_weight)
        self.min_bond = float(min_bond)
        groups: dict[int, list[int]] = {}
        uniq: list[PairPotential] = []
        for i, p in enumerate(pairs):
            for g, q in enumerate(uniq):
                if q is p or q == p:
                    groups[g].append(i)
                    break
            else:
                uniq.append(p)
                groups[len(uniq) - 1] = [i]
        self._groups = [(uniq[g], np.array(idx)) for g, idx in groups.items()]
        if check:
            self.verify_reflection_symmetry()

    def _radial(self, A, order):
        A = self._as_bonds(A)
        a = np.swapaxes(A, -1, -2)                  # (..., R, d)
        r = np.linalg.norm(a, axis=-1)
        if r.size and np.min(r) < self.min_bond:
            raise PotentialSingularity(
                f"potential singularity: bond length {np.min(r):.3e} below floor {self.min_bond:.1e}")
        V = [np.empty_like(r) for _ in range(order + 1)]
        for pot, idx in self._groups:
            vals = pot.derivatives(r[..., idx], order)
            for k in range(order + 1):
                V[k][..., idx] = vals[k]
        return a, r, V

    def check_admissible(self, A):
        self._radial(A, 0)

    def energy(self, A):
        _, _, V = self._radial(A, 0)
        return self.bond_weight * V[0].sum(axis=-1)

    def gradient(self, A):
        a, r, V = self._radial(A, 1)
        g = self.bond_weight * (V[1] / r)[..., None] * a
        return np.swapaxes(g, -1, -2)

    def hessian_blocks(self, A):
        """Per-bond d×d blocks of D²W, shape (..., |R|, d, d)."""
        a, r, V = self._radial(A, 2)
        u = a / r[..., None]
        uu = u[..., :, None] * u[..., None, :]
        eye = np.eye(self.dim)
        t = (V[1] / r)[..., None, None]
        return self.bond_weight * (V[2][..., None, None] * uu + t * (eye - uu))

    def third_blocks(self, A):
        a, r, V = self._radial(A, 3)
        u = a / r[..., None]
        c1 = V[3] - 3.0 * V[2] / r + 3.0 * V[1] / r ** 2
        c2 = V[2] / r - V[1] / r ** 2
        uuu = u[..., :, None, None] * u[..., None, :, None] * u[..., None, None, :]
        return self.bond_weight * (c1[..., None, None, None] * uuu
                                   + c2[..., None, None, None] * _sym_outer3(u))

    def hessian(self, A):
        B = self.hessian_blocks(A)
        return np.einsum("...rjl,rs->...jrls", B, np.eye(self.n_bonds))

    def third(self, A):
        B = self.third_blocks(A)
        eye = np.eye(self.n_bonds)
        return np.einsum("...rjlm,rs,rt->...jrlsmt", B, eye, eye)

    def hessian_action(self, A, H):
        B = self.hessian_blocks(A)
        return np.einsum("...rjl,...lr->...jr", B, H)

    def hessian_norm(self, A):
        B = self.hessian_blocks(A)
        return np.max(np.abs(np.linalg.eigvalsh(B)), axis=(-1, -2))

    def third_norm_bound(self, A):
        # block diagonal in ρ: the trilinear norm is the largest block norm
        T = self.third_blocks(A)
        return np.max(np.sqrt(np.sum(T.reshape(T.shape[:-3] + (-1,)) ** 2, axis=-1)), axis=-1)

    def admissible_radius(self, reference) -> float:
        """Half the distance from the reference bonds to the nearest zero-length bond."""
        ref = self._as_bonds(reference)
        return 0.5 * float(np.min(np.linalg.norm(ref, axis=-2)))

    def sample_bonds(self, rng, n):
        R = self.n_bonds
        dirs = rng.standard_normal((n, self.dim, R))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        lengths = rng.uniform(0.8, 1.6, size=(n, 1, R)) * np.linalg.norm(self.stencil.matrix, axis=0)
        return dirs * lengths

    def describe(self):
        pairs = [p.describe() for p in self.pairs]
        same = all(p == pairs[0] for p in pairs)
        return {**super().describe(), "pair": pairs[0] if same else pairs,
                "bond_weight": self.bond_weight, "min_bond": self.min_bond}


class FTMassSpring(PairSum):
    """Square lattice with nearest and diagonal springs.

    W(A) = (K1/4)·Σ_{|ρ|=1} (|A_ρ| - a1)² + (K2/4)·Σ_{|ρ|=√2} (|A_ρ| - a2)².
    """

    kind = "ft_mass_spring"

    def __init__(self, K1: float, K2: float, a1: float, a2: float, min_bond: float = 1e-6):
        if min(K1, K2, a1, a2) <= 0:
            raise ValueError("K1, K2, a1, a2 must be positive")
        self.K1, self.K2, self.a1, self.a2 = float(K1), float(K2), float(a1), float(a2)
        stencil = InteractionStencil.square_with_diagonals()
        axis = Harmonic(self.K1 / 2.0, self.a1)
        diag = Harmonic(self.K2 / 2.0, self.a2)
        pairs = [axis if abs(np.linalg.norm(r) - 1.0) < 1e-12 else diag for r in stencil.directions]
        super().__init__(stencil, pairs, bond_weight=0.5, min_bond=min_bond)

    @property
    def r_star(self) -> float:
        return (self.K1 * self.a1 + math.sqrt(2.0) * self.K2 * self.a2) / (self.K1 + 2.0 * self.K2)

    def describe(self):
        return {"kind": self.kind, "K1": self.K1, "K2": self.K2, "a1": self.a1, "a2": self.a2}


class QuadraticForm(SitePotential):
    """W(A) = W0 + ½·K[A - A0, A - A0] around a homogeneous reference A0 = (Bρ)_ρ."""

    kind = "quadratic_form"

    def __init__(self, K, reference, W0: float = 0.0, check: bool = True):
        if not isinstance(K, LinearizationTensor):
            raise TypeError("QuadraticForm needs a LinearizationTensor")
        stencil, entries = K.stencil, K.entries
        super().__init__(stencil)
        ref = np.asarray(reference, dtype=float)
        if ref.shape == (self.dim, self.dim):
            ref = stencil.bonds(ref)
        self.reference = self._as_bonds(ref)
        self.K = K
        self.W0 = float(W0)
        self._entries = entries
        if check:
            if not np.allclose(stencil.reflect(self.reference), self.reference, rtol=0, atol=1e-12):
                raise SymmetryViolation("reference bond matrix must be homogeneous, (Bρ)_ρ")
            self.verify_reflection_symmetry()

    def energy(self, A):
        H = self._as_bonds(A) - self.reference
        return self.W0 + 0.5 * np.einsum("...jr,jrls,...ls->...", H, self._entries, H)

    def gradient(self, A):
        H = self._as_bonds(A) - self.reference
        return np.einsum("jrls,...ls->...jr", self._entries, H)

    def hessian(self, A):
        A = self._as_bonds(A)
        return np.broadcast_to(self._entries, A.shape[:-2] + self._entries.shape).copy()

    def hessian_action(self, A, H):
        return np.einsum("jrls,...ls->...jr", self._entries, H)

    def hessian_norm(self, A):
        A = self._as_bonds(A)
        return np.full(A.shape[:-2], self.K.operator_norm)

    def third(self, A):
        A = self._as_bonds(A)
        return np.zeros(A.shape[:-2] + (self.dim, self.n_bonds) * 3)

    def third_norm_bound(self, A):
        A = self._as_bonds(A)
        return np.zeros(A.shape[:-2])

    def sample_bonds(self, rng, n):
        return self.reference + rng.standard_normal((n, self.dim, self.n_bonds))

    def describe(self):
        return {**super().describe(), "W0": self.W0, "reference": self.reference.tolist(),
                "K": self._entries.tolist()}


class UserComposite(SitePotential):
    """Site potential given by host-program callbacks on single or batched bond matrices.

    ``third`` is optional; without it third derivatives come from central
    differences of ``hessian``.
    """

    kind = "user_composite"

    def __init__(self, stencil, energy, gradient, hessian, third=None, reference=None,
                 admissible_radius: float = math.inf, check: bool = True):
        super().__init__(stencil)
        self._energy, self._gradient, self._hessian, self._third = energy, gradient, hessian, third
        ref = stencil.matrix if reference is None else np.asarray(reference, dtype=float)
        if ref.shape == (self.dim, self.dim):
            ref = stencil.bonds(ref)
        self.reference = self._as_bonds(ref)
        self._radius = float(admissible_radius)
        if check:
            self.verify_reflection_symmetry()

    def energy(self, A):
        return np.asarray(self._energy(self._as_bonds(A)), dtype=float)

    def gradient(self, A):
        return np.asarray(self._gradient(self._as_bonds(A)), dtype=float)

    def hessian(self, A):
        return np.asarray(self._hessian(self._as_bonds(A)), dtype=float)

    def third(self, A, h: float = 1e-5):
        A = self._as_bonds(A)
        if self._third is not None:
            return np.asarray(self._third(A), dtype=float)
        out = np.zeros(A.shape[:-2] + (self.dim, self.n_bonds) * 3)
        for j in range(self.dim):
            for r in range(self.n_bonds):
                E = np.zeros((self.dim, self.n_bonds))
                E[j, r] = h
                out[..., j, r] = (self.hessian(A + E) - self.hessian(A - E)) / (2 * h)
        return out

    def admissible_radius(self, reference) -> float:
        return self._radius

    def sample_bonds(self, rng, n):
        return self.reference + 0.05 * rng.standard_normal((n, self.dim, self.n_bonds))


def triangular_pair_potential(V: PairPotential, bond_weight: float = 1.0, **kw) -> PairSum:
    """Pair sum on the triangular stencil.

    The default weight 1 is the normalization under which the closed-form
    stability constant of ``stability.closed_form_triangular`` is the smallest
    eigenvalue of the Hessian; pass 0.5 for the bond-counting convention.
    """
    return PairSum(InteractionStencil.triangular(), V, bond_weight=bond_weight, **kw)


def site_energy(W: SitePotential, A):
    return W.energy(A)


def site_derivatives(W: SitePotential, A, order: int):
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    return W.derivative(A, order)


# --------------------------------------------------------------- tensors


@dataclass
class ContinuumTensor:
    """Fourth-order tensor L_{jklm}; L[A, B] = Σ L_{jklm} A_{jk} B_{lm}."""

    entries: np.ndarray

    def __call__(self, A, B) -> float:
        return float(np.einsum("jklm,jk,lm->", self.entries, A, B))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def acoustic(self, eta: np.ndarray) -> np.ndarray:
        """Acoustic tensor Σ_{km} L_{jklm} η_k η_m for batched η of shape (..., d)."""
        return np.einsum("jklm,...k,...m->...jl", self.entries, eta, eta)


class LinearizationTensor:
    """K_{jρlσ} stored as an array of shape (d, |R|, d, |R|)."""

    def __init__(self, entries, stencil: InteractionStencil):
        entries = np.array(entries, dtype=float)
        d, R = stencil.dim, stencil.size
        if entries.shape != (d, R, d, R):
            raise ValueError(f"K must have shape {(d, R, d, R)}, got {entries.shape}")
        entries.setflags(write=False)
        self.entries = entries
        self.stencil = stencil

    @property
    def dim(self) -> int:
        return self.stencil.dim

    @property
    def n_bonds(self) -> int:
        return self.stencil.size

    def matrix(self) -> np.ndarray:
        n = self.dim * self.n_bonds
        return self.entries.reshape(n, n)

    @cached_property
    def operator_norm(self) -> float:
        """sup |K[A, B]| over unit bond matrices: the spectral norm of the matrix form."""
        return float(np.linalg.norm(self.matrix(), 2))

    def symmetry_errors(self) -> tuple[float, float]:
        K = self.entries
        neg = self.stencil.neg
        major = float(np.max(np.abs(K - K.transpose(2, 3, 0, 1))))
        refl = float(np.max(np.abs(K - K[:, neg][:, :, :, neg])))
        return major, refl

    def is_reflection_symmetric(self, tol: float = 1e-12) -> bool:
        return self.symmetry_errors()[1] <= tol * max(1.0, float(np.max(np.abs(self.entries))))

    def apply(self, A) -> np.ndarray:
        return np.einsum("jrls,...ls->...jr", self.entries, A)

    def form(self, A, B) -> float:
        return float(np.einsum("jr,jrls,ls->", A, self.entries, B))

    def continuum(self) -> ContinuumTensor:
        Rm = self.stencil.matrix
        return ContinuumTensor(np.einsum("jrls,kr,ms->jklm", self.entries, Rm, Rm))

    def __add__(self, other: "LinearizationTensor") -> "LinearizationTensor":
        return LinearizationTensor(self.entries + other.entries, self.stencil)

    def __sub__(self, other: "LinearizationTensor") -> "LinearizationTensor":
        return LinearizationTensor(self.entries - other.entries, self.stencil)

    def scaled(self, s: float) -> "LinearizationTensor":
        return LinearizationTensor(s * self.entries, self.stencil)

    @classmethod
    def identity(cls, stencil: InteractionStencil) -> "LinearizationTensor":
        d, R = stencil.dim, stencil.size
        return cls(np.einsum("jl,rs->jrls", np.eye(d), np.eye(R)), stencil)

    @classmethod
    def random(cls, stencil: InteractionStencil, rng: np.random.Generator,
               reflection: bool = True, scale: float = 1.0) -> "LinearizationTensor":
        """Random K with major symmetry, reflection-symmetrized on request."""
        d, R = stencil.dim, stencil.size
        n = d * R
        X = rng.standard_normal((n, n))
        K = (0.5 * scale * (X + X.T)).reshape(d, R, d, R)
        if reflection:
            neg = stencil.neg
            K = 0.5 * (K + K[:, neg][:, :, :, neg])
        return cls(K, stencil)


# ------------------------------------------------------------ Cauchy-Born


def _cb_tensor(W: SitePotential, F) -> np.ndarray:
    Rm = W.stencil.matrix
    K = W.hessian(W.stencil.bonds(F))
    return np.einsum("...jrls,kr,ms->...jklm", K, Rm, Rm)


def cauchy_born(W: SitePotential, F, order: int = 0):
    """W_CB(F) = W((Fρ)_ρ) and its first two derivatives in F.

    For a single d×d matrix, order 2 returns a ContinuumTensor; batched
    inputs of shape (..., d, d) return plain arrays.
    """
    F = np.asarray(F, dtype=float)
    A = W.stencil.bonds(F)
    if order == 0:
        e = W.energy(A)
        return float(e) if F.ndim == 2 else e
    if order == 1:
        return W.gradient(A) @ W.stencil.matrix.T
    if order == 2:
        L = _cb_tensor(W, F)
        return ContinuumTensor(L) if F.ndim == 2 else L
    raise ValueError("Cauchy-Born order must be 0, 1 or 2")


def linearize(W: SitePotential, A0) -> LinearizationTensor:
    """K = D²W((A0ρ)_ρ), with both symmetries verified on the assembled tensor."""
    A0 = np.asarray(A0, dtype=float)
    if A0.shape != (W.dim, W.dim):
        raise ValueError("reference deformation must be a d×d matrix")
    K = LinearizationTensor(W.hessian(W.stencil.bonds(A0)), W.stencil)
    major, refl = K.symmetry_errors()
    scale = max(1.0, float(np.max(np.abs(K.entries))))
    if major > SYMMETRY_TOL * scale or refl > SYMMETRY_TOL * scale:
        raise SymmetryViolation(f"linearization violates symmetry (major {major:.2e}, reflection {refl:.2e})")
    return K
